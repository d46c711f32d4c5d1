"""TransE embeddings: initialisation, filtered corruption, margin-loss SGD
and a filtered link-prediction harness."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .kgstore import KnowledgeGraph, Triple

log = logging.getLogger(__name__)


class SaturationError(RuntimeError):
    """No corrupted triple outside the graph exists for a positive."""


class DivergenceError(RuntimeError):
    pass


@dataclass
class TransEConfig:
    dim: int = 100
    margin: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 100
    norm: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.norm not in (1, 2):
            raise ValueError("norm must be 1 or 2")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class EmbeddingTable:
    entity_vecs: np.ndarray
    relation_vecs: np.ndarray
    entity_names: list = field(default_factory=list)
    relation_names: list = field(default_factory=list)

    def __post_init__(self):
        if self.entity_vecs.ndim != 2 or self.relation_vecs.ndim != 2:
            raise ValueError("embedding matrices must be 2-d")
        if self.entity_vecs.shape[1] != self.relation_vecs.shape[1]:
            raise ValueError("entity and relation dims differ")

    @property
    def dim(self) -> int:
        return self.entity_vecs.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.entity_vecs.copy(), self.relation_vecs.copy(),
                              list(self.entity_names), list(self.relation_names))


def init_embeddings(kg: KnowledgeGraph, cfg: TransEConfig) -> EmbeddingTable:
    rng = np.random.default_rng(cfg.seed)
    bound = 6.0 / np.sqrt(cfg.dim)
    ent = rng.uniform(-bound, bound, size=(kg.n_entities, cfg.dim))
    rel = rng.uniform(-bound, bound, size=(kg.n_relations, cfg.dim))
    norms = np.linalg.norm(rel, axis=1, keepdims=True)
    rel = rel / np.where(norms > 0, norms, 1.0)
    return EmbeddingTable(ent, rel, list(kg.entities.names), list(kg.relations.names))


def _lookup(E: EmbeddingTable, h, r, t):
    n_e, n_r = len(E.entity_vecs), len(E.relation_vecs)
    for e in (h, t):
        if not 0 <= e < n_e:
            raise KeyError(f"entity id {e} out of range")
    if not 0 <= r < n_r:
        raise KeyError(f"relation id {r} out of range")
    return E.entity_vecs[h], E.relation_vecs[r], E.entity_vecs[t]


def score_transe(E: EmbeddingTable, h: int, r: int, t: int, p: int = 2) -> float:
    """||E(h) + E(r) - E(t)||_p; lower is more plausible."""
    vh, vr, vt = _lookup(E, h, r, t)
    return float(np.linalg.norm(vh + vr - vt, ord=p))


def _saturated(kg: KnowledgeGraph, h, r, t):
    head_full = len(kg.tr2h.get((t, r), ())) >= kg.n_entities
    tail_full = len(kg.hr2t.get((h, r), ())) >= kg.n_entities
    return head_full, tail_full


def negative_sample(kg: KnowledgeGraph, pos, rng: np.random.Generator) -> Triple:
    """Uniformly corrupt head or tail, resampling until the triple is unknown."""
    if kg.n_entities < 2:
        raise ValueError("need at least two entities to corrupt")
    h, r, t = pos
    head_full, tail_full = _saturated(kg, h, r, t)
    if head_full and tail_full:
        raise SaturationError(f"no negative exists for {tuple(pos)}")
    corrupt_head = rng.random() < 0.5
    if corrupt_head and head_full:
        corrupt_head = False
    elif not corrupt_head and tail_full:
        corrupt_head = True
    while True:
        e = int(rng.integers(kg.n_entities))
        cand = Triple(e, r, t) if corrupt_head else Triple(h, r, e)
        if cand not in kg:
            return cand


class _Corrupter:
    """Vectorised version of :func:`negative_sample` for whole batches."""

    def __init__(self, kg: KnowledgeGraph):
        self.n_e = kg.n_entities
        self.n_r = max(kg.n_relations, 1)
        arr = np.asarray(kg.triples, dtype=np.int64).reshape(-1, 3)
        self.keys = np.sort(self._encode(arr))
        self.kg = kg

    def _encode(self, arr):
        return (arr[:, 0] * self.n_r + arr[:, 1]) * self.n_e + arr[:, 2]

    def _known(self, arr):
        k = self._encode(arr)
        pos = np.searchsorted(self.keys, k)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == k

    def __call__(self, pos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = len(pos)
        head_full = np.empty(n, dtype=bool)
        tail_full = np.empty(n, dtype=bool)
        for i, (h, r, t) in enumerate(pos):
            head_full[i], tail_full[i] = _saturated(self.kg, h, r, t)
        if np.any(head_full & tail_full):
            i = int(np.argmax(head_full & tail_full))
            raise SaturationError(f"no negative exists for {tuple(pos[i])}")
        corrupt_head = rng.random(n) < 0.5
        corrupt_head = np.where(head_full, False, np.where(tail_full, True, corrupt_head))
        neg = pos.copy()
        todo = np.arange(n)
        while len(todo):
            ents = rng.integers(self.n_e, size=len(todo))
            ch = corrupt_head[todo]
            neg[todo[ch], 0] = ents[ch]
            neg[todo[~ch], 2] = ents[~ch]
            todo = todo[self._known(neg[todo])]
            neg[todo] = pos[todo]
        return neg


def _distance_grad(d: np.ndarray, p: int):
    """Row-wise norm of ``d`` and its gradient; zero gradient at the origin."""
    if p == 1:
        return np.abs(d).sum(axis=1), np.sign(d)
    norms = np.linalg.norm(d, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return norms, d / safe[:, None]


def transe_loss_grad(ent: np.ndarray, rel: np.ndarray, pos: np.ndarray, neg: np.ndarray,
                     margin: float, p: int = 2):
    """Summed hinge loss over (pos, neg) pairs and dense gradients."""
    d_pos = ent[pos[:, 0]] + rel[pos[:, 1]] - ent[pos[:, 2]]
    d_neg = ent[neg[:, 0]] + rel[neg[:, 1]] - ent[neg[:, 2]]
    f_pos, u_pos = _distance_grad(d_pos, p)
    f_neg, u_neg = _distance_grad(d_neg, p)
    hinge = margin + f_pos - f_neg
    active = hinge > 0
    loss = float(np.maximum(hinge, 0.0).sum())   # NaN propagates

    g_ent = np.zeros_like(ent)
    g_rel = np.zeros_like(rel)
    up, un = u_pos[active], u_neg[active]
    pa, na = pos[active], neg[active]
    np.add.at(g_ent, pa[:, 0], up)
    np.add.at(g_ent, pa[:, 2], -up)
    np.add.at(g_rel, pa[:, 1], up)
    np.add.at(g_ent, na[:, 0], -un)
    np.add.at(g_ent, na[:, 2], un)
    np.add.at(g_rel, na[:, 1], -un)
    return loss, g_ent, g_rel


def _cap_norms(ent: np.ndarray):
    norms = np.linalg.norm(ent, axis=1)
    over = norms > 1.0
    if np.any(over):
        ent[over] /= norms[over, None]


def train_transe(kg: KnowledgeGraph, cfg: TransEConfig,
                 on_epoch: Optional[Callable[[int, EmbeddingTable, float], None]] = None) -> EmbeddingTable:
    """Mini-batch SGD on the margin ranking loss with filtered uniform negatives.

    ``on_epoch(epoch, table, loss)`` is called after every epoch with a live
    (not copied) table.
    """
    if len(kg) == 0:
        raise ValueError("cannot train on an empty graph")
    table = init_embeddings(kg, cfg)
    if cfg.epochs == 0:
        return table
    rng = np.random.default_rng([cfg.seed, 1])
    ent, rel = table.entity_vecs, table.relation_vecs
    triples = np.asarray(kg.triples, dtype=np.int64)
    corrupt = _Corrupter(kg)
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triples))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            pos = triples[order[start:start + cfg.batch_size]]
            neg = corrupt(pos, rng)
            loss, g_ent, g_rel = transe_loss_grad(ent, rel, pos, neg, cfg.margin, cfg.norm)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch} batch {b}")
            ent -= lr * g_ent
            rel -= lr * g_rel
            _cap_norms(ent)
            total += loss
        log.debug("event=transe-epoch epoch=%d loss=%.6f", epoch, total)
        if on_epoch is not None:
            on_epoch(epoch, table, total)
    return table


def link_prediction_eval(E: EmbeddingTable, kg: KnowledgeGraph, held_out: Sequence, p: int = 2) -> dict:
    """Filtered tail ranking: other known tails of (h, r) are removed before ranking."""
    if len(held_out) == 0:
        raise ValueError("held_out is empty")
    ent, rel = E.entity_vecs, E.relation_vecs
    ranks = []
    for h, r, t in held_out:
        _lookup(E, h, r, t)
        scores = np.linalg.norm(ent[h] + rel[r] - ent, ord=p, axis=1)
        keep = np.ones(len(ent), dtype=bool)
        for other in kg.hr2t.get((h, r), ()):
            keep[other] = False
        keep[t] = False
        ranks.append(1 + int(np.sum(scores[keep] < scores[t])))
    ranks = np.asarray(ranks)
    return {"mean_rank": float(ranks.mean()),
            "hits_at_10": float(np.mean(ranks <= 10)),
            "n": int(len(ranks))}


# --- text vector files -------------------------------------------------------

def save_vectors(path, names: Sequence[str], matrix: np.ndarray, header: Optional[str] = None) -> None:
    """``<count> <dim>`` then ``<name> v1 ... v_dim``; 17 significant digits."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if len(names) != len(matrix):
        raise ValueError("names and rows differ in length")
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(f"#{header}\n")
        fh.write(f"{matrix.shape[0]} {matrix.shape[1] if matrix.ndim == 2 else 0}\n")
        for name, row in zip(names, matrix):
            if not name or any(c.isspace() for c in name):
                raise ValueError(f"vector name {name!r} must be non-empty without whitespace")
            fh.write(name + " " + " ".join(format(x, ".17g") for x in row) + "\n")


def load_vectors(path):
    """Returns (names, matrix, header) where header is the ``#...`` line or None."""
    header = None
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if first.startswith("#"):
            header = first[1:].rstrip("\n")
            first = fh.readline()
        try:
            count, dim = (int(x) for x in first.split())
        except ValueError:
            raise ValueError(f"{path}: bad header line {first!r}") from None
        names, rows = [], []
        for lineno, line in enumerate(fh, 2 + (header is not None)):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(parts)}")
            names.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if len(names) != count:
        raise ValueError(f"{path}: header says {count} rows, found {len(names)}")
    matrix = np.array(rows, dtype=np.float64).reshape(count, dim)
    return names, matrix, header


def save_embeddings(E: EmbeddingTable, entity_path, relation_path) -> None:
    save_vectors(entity_path, E.entity_names, E.entity_vecs)
    save_vectors(relation_path, E.relation_names, E.relation_vecs)


def load_embeddings(entity_path, relation_path) -> EmbeddingTable:
    en, ev, _ = load_vectors(entity_path)
    rn, rv, _ = load_vectors(relation_path)
    return EmbeddingTable(ev, rv, en, rn)


def align_to_graph(E: EmbeddingTable, kg: KnowledgeGraph) -> EmbeddingTable:
    """Reorder rows so ids match the graph's vocabularies."""
    e_idx = {n: i for i, n in enumerate(E.entity_names)}
    r_idx = {n: i for i, n in enumerate(E.relation_names)}
    try:
        ent = E.entity_vecs[[e_idx[n] for n in kg.entities.names]]
        rel = E.relation_vecs[[r_idx[n] for n in kg.relations.names]]
    except KeyError as exc:
        raise KeyError(f"embedding file lacks {exc.args[0]!r}") from None
    return EmbeddingTable(ent, rel, list(kg.entities.names), list(kg.relations.names))
