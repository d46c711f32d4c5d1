"""Piecewise CNN sentence encoder with a softmax head over seen relations.

Forward and backward passes are written out by hand in numpy; everything is
float64 so the gradients can be checked against finite differences.
"""

from __future__ import annotations

import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kgstore import Vocab
from .semspace import WordVectors

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ZSREL-CKPT"
CHECKPOINT_VERSION = 1


class EmptySentenceError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Instance:
    """Tokenised sentence; spans are inclusive ``(start, end)`` token indices."""

    tokens: tuple
    head: tuple
    tail: tuple
    label: int = -1

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "head", tuple(int(i) for i in self.head))
        object.__setattr__(self, "tail", tuple(int(i) for i in self.tail))
        n = len(self.tokens)
        if n == 0:
            raise EmptySentenceError("instance has no tokens")
        for name, (s, e) in (("head", self.head), ("tail", self.tail)):
            if not 0 <= s <= e < n:
                raise ValueError(f"{name} span {(s, e)} outside sentence of length {n}")
        (a0, a1), (b0, b1) = self.ordered_spans
        if b0 <= a1:
            raise ValueError(f"head {self.head} and tail {self.tail} spans overlap")

    @property
    def swapped(self) -> bool:
        """True when the tail mention precedes the head mention."""
        return self.tail[0] < self.head[0]

    @property
    def ordered_spans(self):
        return (self.tail, self.head) if self.swapped else (self.head, self.tail)


def load_instances(path, relations: Vocab) -> list[Instance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(Instance(d["tokens"], d["head"], d["tail"], relations.id(d["relation"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad instance ({exc})") from None
    return out


def save_instances(instances: Sequence[Instance], path, relations: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps({"tokens": list(inst.tokens), "head": list(inst.head),
                                 "tail": list(inst.tail), "relation": relations.name(inst.label)}) + "\n")


@dataclass
class EncoderConfig:
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    channels: int = 250
    kernel: int = 3
    pos_dim: int = 5
    max_dist: int = 30
    dropout: float = 0.5
    # listed next to the PCNN settings but no loss here uses it
    margin: Optional[float] = None

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel width must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.margin is not None:
            warnings.warn("encoder margin has no role in cross-entropy training; ignored", stacklevel=2)


PARAM_NAMES = ("unk", "pos_head", "pos_tail", "filters", "conv_bias", "W_c", "b_c")


@dataclass
class PcnnParams:
    unk: np.ndarray
    pos_head: np.ndarray
    pos_tail: np.ndarray
    filters: np.ndarray      # (channels, kernel, word_dim + 2 * pos_dim)
    conv_bias: np.ndarray
    W_c: np.ndarray          # (n_classes, 3 * channels)
    b_c: np.ndarray
    classes: list = field(default_factory=list)
    dropout: float = 0.5
    max_dist: int = 30

    @property
    def channels(self) -> int:
        return self.filters.shape[0]

    @property
    def kernel(self) -> int:
        return self.filters.shape[1]

    @property
    def word_dim(self) -> int:
        return self.unk.shape[0]

    @property
    def pos_dim(self) -> int:
        return self.pos_head.shape[1]

    @property
    def feature_dim(self) -> int:
        return 3 * self.channels

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "PcnnParams":
        return PcnnParams(**{k: v.copy() for k, v in self.arrays().items()},
                          classes=list(self.classes), dropout=self.dropout, max_dist=self.max_dist)


def init_params(word_dim: int, classes: Sequence[int], cfg: EncoderConfig,
                rng: Optional[np.random.Generator] = None) -> PcnnParams:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    in_dim = word_dim + 2 * cfg.pos_dim
    n_pos = 2 * cfg.max_dist + 1
    fan_in = cfg.kernel * in_dim
    bound = np.sqrt(6.0 / (fan_in + cfg.channels))
    filters = rng.uniform(-bound, bound, size=(cfg.channels, cfg.kernel, in_dim))
    feat = 3 * cfg.channels
    wb = np.sqrt(6.0 / (feat + max(len(classes), 1)))
    return PcnnParams(
        unk=rng.normal(0.0, 0.1, size=word_dim),
        pos_head=rng.normal(0.0, 0.1, size=(n_pos, cfg.pos_dim)),
        pos_tail=rng.normal(0.0, 0.1, size=(n_pos, cfg.pos_dim)),
        filters=filters,
        conv_bias=np.zeros(cfg.channels),
        W_c=rng.uniform(-wb, wb, size=(len(classes), feat)),
        b_c=np.zeros(len(classes)),
        classes=sorted(classes),
        dropout=cfg.dropout,
        max_dist=cfg.max_dist,
    )


@dataclass
class _Cache:
    windows: np.ndarray
    argmax: list
    activ: np.ndarray
    mask: Optional[np.ndarray]
    unk_rows: np.ndarray
    pos_h: np.ndarray
    pos_t: np.ndarray
    n: int


def _word_rows(inst: Instance, wv: WordVectors, params: PcnnParams):
    rows = np.empty((len(inst.tokens), params.word_dim))
    unk = np.zeros(len(inst.tokens), dtype=bool)
    for i, tok in enumerate(inst.tokens):
        j = wv.vocab.get(tok)
        if j is None:
            j = wv.vocab.get(tok.lower())
        if j is None:
            rows[i] = params.unk
            unk[i] = True
        else:
            rows[i] = wv.vectors[j]
    return rows, unk


def _segments(inst: Instance, n: int):
    (_, a_end), (b_start, _) = inst.ordered_spans
    return ((0, a_end), (a_end + 1, b_start - 1), (b_start, n - 1))


def _forward(inst: Instance, wv: WordVectors, params: PcnnParams, train_mode: bool = False,
             rng: Optional[np.random.Generator] = None):
    n = len(inst.tokens)
    if n == 0:
        raise EmptySentenceError("instance has no tokens")
    if wv.dim != params.word_dim:
        raise ValueError(f"word vectors have dim {wv.dim}, encoder expects {params.word_dim}")
    words, unk_rows = _word_rows(inst, wv, params)
    idx = np.arange(n)
    md = params.max_dist
    pos_h = np.clip(idx - inst.head[0], -md, md) + md
    pos_t = np.clip(idx - inst.tail[0], -md, md) + md
    X = np.concatenate([words, params.pos_head[pos_h], params.pos_tail[pos_t]], axis=1)

    k, C = params.kernel, params.channels
    pad = (k - 1) // 2
    Xp = np.pad(X, ((pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(Xp, k, axis=0)  # (n, D, k)
    windows = windows.transpose(0, 2, 1).reshape(n, -1)
    conv = windows @ params.filters.reshape(C, -1).T + params.conv_bias

    pooled = np.zeros((3, C))
    argmax = []
    cols = np.arange(C)
    for s, (lo, hi) in enumerate(_segments(inst, n)):
        if lo > hi:
            argmax.append(None)
            continue
        am = lo + np.argmax(conv[lo:hi + 1], axis=0)
        pooled[s] = conv[am, cols]
        argmax.append(am)
    activ = np.tanh(pooled.reshape(-1))
    mask = None
    out = activ
    if train_mode and params.dropout > 0:
        rng = np.random.default_rng() if rng is None else rng
        keep = 1.0 - params.dropout
        mask = (rng.random(activ.shape) < keep) / keep
        out = activ * mask
    return out, _Cache(windows, argmax, activ, mask, unk_rows, pos_h, pos_t, n)


def pcnn_forward(inst: Instance, wv: WordVectors, params: PcnnParams, train_mode: bool = False,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Feature vector of length 3 * channels (tanh of piecewise max-pooled conv)."""
    return _forward(inst, wv, params, train_mode, rng)[0]


def _backward(cache: _Cache, d_out: np.ndarray, params: PcnnParams) -> dict:
    """Gradients of the trunk parameters given dLoss/dfeatures."""
    C, k = params.channels, params.kernel
    d = d_out if cache.mask is None else d_out * cache.mask
    d_pre = (d * (1.0 - cache.activ ** 2)).reshape(3, C)
    dconv = np.zeros((cache.n, C))
    cols = np.arange(C)
    for s, am in enumerate(cache.argmax):
        if am is not None:
            np.add.at(dconv, (am, cols), d_pre[s])
    Fmat = params.filters.reshape(C, -1)
    grads = {
        "filters": (dconv.T @ cache.windows).reshape(params.filters.shape),
        "conv_bias": dconv.sum(axis=0),
    }
    dwin = (dconv @ Fmat).reshape(cache.n, k, -1)
    pad = (k - 1) // 2
    dXp = np.zeros((cache.n + 2 * pad, dwin.shape[2]))
    for j in range(k):
        dXp[j:j + cache.n] += dwin[:, j]
    dX = dXp[pad:pad + cache.n]
    wd, pd = params.word_dim, params.pos_dim
    grads["unk"] = dX[cache.unk_rows, :wd].sum(axis=0)
    g_ph = np.zeros_like(params.pos_head)
    g_pt = np.zeros_like(params.pos_tail)
    np.add.at(g_ph, cache.pos_h, dX[:, wd:wd + pd])
    np.add.at(g_pt, cache.pos_t, dX[:, wd + pd:])
    grads["pos_head"] = g_ph
    grads["pos_tail"] = g_pt
    return grads


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def class_probs(f: np.ndarray, params: PcnnParams) -> np.ndarray:
    return softmax(params.W_c @ f + params.b_c)


def loss_and_grads(inst: Instance, wv: WordVectors, params: PcnnParams, train_mode: bool = False,
                   rng: Optional[np.random.Generator] = None):
    """Cross-entropy of the gold class and gradients for every parameter."""
    try:
        y = params.classes.index(inst.label)
    except ValueError:
        raise ValueError(f"label {inst.label} is not a seen class") from None
    f, cache = _forward(inst, wv, params, train_mode, rng)
    p = class_probs(f, params)
    loss = -np.log(max(p[y], 1e-300))
    dlogits = p.copy()
    dlogits[y] -= 1.0
    grads = _backward(cache, params.W_c.T @ dlogits, params)
    grads["W_c"] = np.outer(dlogits, f)
    grads["b_c"] = dlogits
    return float(loss), grads


def sgd_step(params, grads: dict, lr: float, scale: float = 1.0) -> None:
    for name, g in grads.items():
        getattr(params, name)[...] -= lr * scale * g


def train_classifier(train_set: Sequence[Instance], wv: WordVectors, cfg: EncoderConfig,
                     classes: Optional[Sequence[int]] = None) -> PcnnParams:
    """Mini-batch SGD on softmax cross-entropy over the seen classes.

    Word vectors stay frozen; the unknown-word vector, position tables,
    filters and the softmax head are trained.
    """
    if classes is None:
        classes = sorted({inst.label for inst in train_set})
    stray = {inst.label for inst in train_set} - set(classes)
    if stray:
        raise ValueError(f"training labels {sorted(stray)} are not seen classes")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(wv.dim, classes, cfg, rng)
    train_set = list(train_set)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc = None
            for i in batch:
                loss, grads = loss_and_grads(train_set[i], wv, params, True, rng)
                total += loss
                if acc is None:
                    acc = grads
                else:
                    for name, g in grads.items():
                        acc[name] += g
            if not np.isfinite(total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            sgd_step(params, acc, cfg.learning_rate, 1.0 / len(batch))
        log.info("event=encoder-epoch epoch=%d loss=%.5f", epoch, total / max(len(train_set), 1))
    return params


def classify_topT(f: np.ndarray, params: PcnnParams, T: int = 3) -> list[tuple[int, float]]:
    """Top-T seen relations with raw softmax probabilities, descending."""
    n = len(params.classes)
    if not 1 <= T <= n:
        raise ValueError(f"T must lie in [1, {n}]")
    p = class_probs(f, params)
    order = sorted(range(n), key=lambda i: (-p[i], params.classes[i]))[:T]
    return [(params.classes[i], float(p[i])) for i in order]


def accuracy(instances: Sequence[Instance], wv: WordVectors, params: PcnnParams) -> float:
    hits = 0
    for inst in instances:
        top = classify_topT(pcnn_forward(inst, wv, params), params, 1)[0][0]
        hits += top == inst.label
    return hits / len(instances)


# --- checkpoints -------------------------------------------------------------

def write_checkpoint(path, kind: str, header: dict, arrays: dict) -> None:
    """Magic line, one JSON header line, then an ``.npz`` payload."""
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    meta = {"kind": kind, "version": CHECKPOINT_VERSION, **header}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" " + str(CHECKPOINT_VERSION).encode() + b"\n")
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        fh.write(buf.getvalue())


def read_checkpoint(path, kind: str):
    with open(path, "rb") as fh:
        magic = fh.readline().split()
        if not magic or magic[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {magic[1].decode()}")
        meta = json.loads(fh.readline())
        if meta.get("kind") != kind:
            raise ValueError(f"{path}: checkpoint holds {meta.get('kind')!r}, expected {kind!r}")
        with np.load(io.BytesIO(fh.read())) as npz:
            arrays = {k: npz[k] for k in npz.files}
    return meta, arrays


def save_params(params: PcnnParams, path, relations: Vocab, cfg: Optional[EncoderConfig] = None) -> None:
    header = {"classes": [relations.name(c) for c in params.classes],
              "dropout": params.dropout, "max_dist": params.max_dist,
              "channels": params.channels, "kernel": params.kernel, "pos_dim": params.pos_dim,
              "word_dim": params.word_dim, "config": asdict(cfg) if cfg else None}
    write_checkpoint(path, "pcnn", header, params.arrays())


def load_params(path, relations: Vocab) -> PcnnParams:
    meta, arrays = read_checkpoint(path, "pcnn")
    return PcnnParams(**{k: arrays[k] for k in PARAM_NAMES},
                      classes=[relations.id(n) for n in meta["classes"]],
                      dropout=meta["dropout"], max_dist=meta["max_dist"])
