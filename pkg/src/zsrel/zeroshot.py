"""Projection into a relation semantic space (DeViSE / ConSE), ranking of
unseen relations, and evaluation artifacts."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoder import (EncoderConfig, Instance, PcnnParams, _backward, _forward, init_params,
                      read_checkpoint, sgd_step, write_checkpoint)
from .kgstore import Vocab
from .semspace import CombineParams, CoverageError, SemanticSpace, WordVectors

log = logging.getLogger(__name__)

HIT_KS = (1, 2, 5)


class UndefinedSimilarityError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class DeviseParams:
    W: np.ndarray
    b: np.ndarray
    margin: float = 1.0

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"W {self.W.shape} and b {self.b.shape} are inconsistent")


def devise_project(f: np.ndarray, params: DeviseParams) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (params.W.shape[1],):
        raise ValueError(f"feature length {f.shape} does not match W {params.W.shape}")
    return params.W @ f + params.b


def _cos_grad(g, e):
    """cos(g, e) and its gradients with respect to g and e."""
    ng, ne = np.linalg.norm(g), np.linalg.norm(e)
    c = float(g @ e / (ng * ne))
    return c, e / (ng * ne) - c * g / ng ** 2, g / (ng * ne) - c * e / ne ** 2


def devise_hinge(g: np.ndarray, gold: np.ndarray, negatives: Sequence[np.ndarray], margin: float):
    """sum_j max(0, margin - cos(g, gold) + cos(g, neg_j)) with gradients
    for g, the gold vector and each negative vector."""
    if not np.any(g):
        raise UndefinedSimilarityError("projected vector is zero")
    c_pos, dg_pos, de_pos = _cos_grad(g, gold)
    loss = 0.0
    dg = np.zeros_like(g)
    d_gold = np.zeros_like(gold)
    d_negs = []
    for e in negatives:
        c_neg, dg_neg, de_neg = _cos_grad(g, e)
        h = margin - c_pos + c_neg
        if h > 0:
            loss += h
            dg += dg_neg - dg_pos
            d_gold -= de_pos
            d_negs.append(de_neg)
        else:
            d_negs.append(np.zeros_like(e))
    return loss, dg, d_gold, d_negs


@dataclass
class DeviseConfig:
    margin: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 8
    negatives: int = 5
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)


def _label_vector(y, space, combine):
    if combine is None:
        return space[y], None
    A, B, cp = combine
    x = np.concatenate([A[y], B[y]]) + cp.b2
    return cp.W2 @ x, x


def devise_train(train_set: Sequence[Instance], wv: WordVectors, space: Optional[SemanticSpace],
                 cfg: DeviseConfig, combine=None):
    """Jointly train the PCNN trunk and the linear projection with the
    cosine hinge loss.

    ``combine=(A, B, CombineParams)`` makes the label vectors
    ``W2 @ ([A; B] + b2)`` and trains W2/b2 as well; ``space`` may then be None.
    Returns (trunk, DeviseParams, CombineParams or None).
    """
    classes = sorted({inst.label for inst in train_set})
    if combine is not None:
        A, B, cp = combine
        cp = CombineParams(cp.W2.copy(), cp.b2.copy(), cp.lam)
        combine = (A, B, cp)
        cover = A.coverage & B.coverage
        sem_dim = cp.W2.shape[0]
    else:
        cover = space.coverage
        sem_dim = space.dim
    missing = [c for c in classes if c not in cover]
    if missing:
        raise CoverageError(f"semantic space lacks seen relations {missing}", missing)

    rng = np.random.default_rng(cfg.seed)
    trunk = init_params(wv.dim, [], cfg.encoder, rng)
    feat = trunk.feature_dim
    bound = np.sqrt(6.0 / (feat + sem_dim))
    proj = DeviseParams(rng.uniform(-bound, bound, size=(sem_dim, feat)), np.zeros(sem_dim), cfg.margin)
    lr = cfg.learning_rate
    n_neg = min(cfg.negatives, len(classes) - 1)
    train_set = list(train_set)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc: dict = {}
            acc_proj = {"W": np.zeros_like(proj.W), "b": np.zeros_like(proj.b)}
            acc_comb = None if combine is None else {"W2": np.zeros_like(cp.W2), "b2": np.zeros_like(cp.b2)}
            for i in batch:
                inst = train_set[i]
                f, cache = _forward(inst, wv, trunk, True, rng)
                g = proj.W @ f + proj.b
                wrong = [c for c in classes if c != inst.label]
                negs = list(rng.choice(wrong, size=n_neg, replace=False)) if n_neg > 0 else []
                gold_vec, gold_x = _label_vector(inst.label, space, combine)
                neg_pairs = [_label_vector(y, space, combine) for y in negs]
                loss, dg, d_gold, d_negs = devise_hinge(g, gold_vec, [v for v, _ in neg_pairs], proj.margin)
                total += loss
                if loss == 0.0:
                    continue
                acc_proj["W"] += np.outer(dg, f)
                acc_proj["b"] += dg
                for name, gr in _backward(cache, proj.W.T @ dg, trunk).items():
                    acc[name] = acc.get(name, 0.0) + gr
                if acc_comb is not None:
                    for (_, x), de in zip([(gold_vec, gold_x)] + neg_pairs, [d_gold] + d_negs):
                        acc_comb["W2"] += np.outer(de, x)
                        acc_comb["b2"] += cp.W2.T @ de
            if not np.isfinite(total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            scale = 1.0 / len(batch)
            sgd_step(trunk, acc, lr, scale)
            sgd_step(proj, acc_proj, lr, scale)
            if acc_comb is not None:
                sgd_step(cp, acc_comb, lr, scale)
        log.info("event=devise-epoch epoch=%d loss=%.5f", epoch, total / max(len(train_set), 1))
    return trunk, proj, (combine[2] if combine is not None else None)


def conse_project(topT: Sequence[tuple[int, float]], space: SemanticSpace, renormalize: bool = False) -> np.ndarray:
    """sum_t p_t * E(R_t) over the top-T seen relations (raw p_t by default)."""
    if not topT:
        raise ValueError("empty top-T list")
    missing = [r for r, _ in topT if r not in space]
    if missing:
        raise CoverageError(f"space lacks seen relations {missing}", missing)
    p = np.array([pt for _, pt in topT], dtype=np.float64)
    if renormalize:
        p = p / p.sum()
    return p @ np.stack([space[r] for r, _ in topT])


@dataclass
class Prediction:
    """Candidates ranked best-first. For euclidean similarity the stored score
    is the negated distance, so scores always decrease down the list."""

    instance_id: object
    gold: int
    ranking: list
    excluded: tuple = ()

    def rank_of(self, r) -> Optional[int]:
        for i, (rel, _) in enumerate(self.ranking, 1):
            if rel == r:
                return i
        return None


def predict(g: np.ndarray, space: SemanticSpace, unseen, sim: str = "cosine",
            instance_id=None, gold: int = -1) -> Prediction:
    candidates = sorted(r for r in unseen if r in space)
    excluded = tuple(sorted(r for r in unseen if r not in space))
    if excluded:
        log.debug("event=excluded-candidates relations=%s", ",".join(map(str, excluded)))
    g = np.asarray(g, dtype=np.float64)
    M = space.matrix(candidates)
    if sim == "cosine":
        ng = np.linalg.norm(g)
        if ng == 0:
            raise UndefinedSimilarityError("cosine similarity of a zero vector")
        scores = (M @ g) / (np.linalg.norm(M, axis=1) * ng)
    elif sim == "euclidean":
        scores = -np.linalg.norm(M - g, axis=1)
    else:
        raise ValueError(f"unknown similarity {sim!r}")
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
    return Prediction(instance_id, gold, [(candidates[i], float(scores[i])) for i in order], excluded)


def evaluate(preds: Sequence[Prediction], ks: Sequence[int] = HIT_KS) -> dict:
    """Hit@K plus per-relation precision/recall/F1 of the rank-1 label.

    An instance whose gold relation is missing from its ranking counts as a
    miss at every K. Macro F1 averages over the gold relations.
    """
    if not preds:
        raise ValueError("no predictions to evaluate")
    ranks = [p.rank_of(p.gold) for p in preds]
    hit = {k: sum(1 for r in ranks if r is not None and r <= k) / len(preds) for k in ks}
    tp: dict = {}
    n_pred: dict = {}
    n_gold: dict = {}
    for p in preds:
        n_gold[p.gold] = n_gold.get(p.gold, 0) + 1
        if p.ranking:
            top = p.ranking[0][0]
            n_pred[top] = n_pred.get(top, 0) + 1
            if top == p.gold:
                tp[top] = tp.get(top, 0) + 1
    per_relation = {}
    for r in sorted(set(n_gold) | set(n_pred)):
        t = tp.get(r, 0)
        prec = t / n_pred[r] if n_pred.get(r) else 0.0
        rec = t / n_gold[r] if n_gold.get(r) else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_relation[r] = {"precision": prec, "recall": rec, "f1": f1, "support": n_gold.get(r, 0)}
    macro = float(np.mean([per_relation[r]["f1"] for r in n_gold]))
    return {"hit": hit, "per_relation": per_relation, "macro_f1": macro, "n": len(preds)}


def influence_matrix(records: Sequence[tuple[Sequence[tuple[int, float]], int]],
                     seen: Sequence[int], unseen: Sequence[int], renormalize: bool = False) -> np.ndarray:
    """Mean top-T probability mass of each seen relation (rows) over the test
    instances of each unseen gold relation (columns)."""
    seen = sorted(seen)
    unseen = sorted(unseen)
    row = {r: i for i, r in enumerate(seen)}
    col = {r: j for j, r in enumerate(unseen)}
    mass = np.zeros((len(seen), len(unseen)))
    counts = np.zeros(len(unseen))
    for topT, gold in records:
        j = col[gold]
        counts[j] += 1
        total = sum(p for _, p in topT) if renormalize else 1.0
        for r, p in topT:
            mass[row[r], j] += p / total
    return mass / np.where(counts > 0, counts, 1.0)


# --- files -------------------------------------------------------------------

def save_predictions(preds: Sequence[Prediction], path, relations: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            doc = {"id": p.instance_id, "gold": relations.name(p.gold),
                   "ranking": [[relations.name(r), s] for r, s in p.ranking]}
            if p.excluded:
                doc["excluded"] = [relations.name(r) for r in p.excluded]
            fh.write(json.dumps(doc) + "\n")


def load_predictions(path, relations: Vocab) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(Prediction(d["id"], relations.id(d["gold"]),
                                      [(relations.id(r), float(s)) for r, s in d["ranking"]],
                                      tuple(relations.id(r) for r in d.get("excluded", ()))))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad prediction ({exc})") from None
    return out


def metrics_to_json(metrics: dict, relations: Vocab) -> dict:
    return {"hit": {str(k): v for k, v in metrics["hit"].items()},
            "per_relation": {relations.name(r): v for r, v in metrics["per_relation"].items()},
            "macro_f1": metrics["macro_f1"], "n": metrics["n"]}


def save_influence(matrix: np.ndarray, seen: Sequence[int], unseen: Sequence[int], path, relations: Vocab) -> None:
    seen, unseen = sorted(seen), sorted(unseen)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("seen\\unseen\t" + "\t".join(relations.name(u) for u in unseen) + "\n")
        for i, s in enumerate(seen):
            fh.write(relations.name(s) + "\t" + "\t".join(format(x, ".17g") for x in matrix[i]) + "\n")


def save_devise(trunk: PcnnParams, proj: DeviseParams, combine: Optional[CombineParams], path,
                cfg: Optional[DeviseConfig] = None) -> None:
    arrays = {f"trunk_{k}": v for k, v in trunk.arrays().items()}
    arrays.update(W=proj.W, b=proj.b)
    if combine is not None:
        arrays.update(W2=combine.W2, b2=combine.b2)
    header = {"margin": proj.margin, "dropout": trunk.dropout, "max_dist": trunk.max_dist,
              "lam": combine.lam if combine is not None else None,
              "config": asdict(cfg) if cfg is not None else None}
    write_checkpoint(path, "devise", header, arrays)


def load_devise(path):
    from .encoder import PARAM_NAMES
    meta, arrays = read_checkpoint(path, "devise")
    trunk = PcnnParams(**{k: arrays[f"trunk_{k}"] for k in PARAM_NAMES}, classes=[],
                       dropout=meta["dropout"], max_dist=meta["max_dist"])
    proj = DeviseParams(arrays["W"], arrays["b"], meta["margin"])
    combine = CombineParams(arrays["W2"], arrays["b2"], meta["lam"]) if "W2" in arrays else None
    return trunk, proj, combine
