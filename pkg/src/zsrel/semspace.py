"""Relation semantic spaces: word (wd), KG (kg), rule-guided (rl) and the
combinations kw, rw (concat + linear map) and kr (convex mix)."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .kge import EmbeddingTable, load_vectors, save_vectors
from .kgstore import Vocab
from .rulemine import Rule, rules_about

log = logging.getLogger(__name__)

KINDS = ("wd", "kg", "rl", "kw", "rw", "kr")


class CoverageError(KeyError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)

    def __str__(self):
        return self.args[0]


class CompositionError(ValueError):
    pass


class UncoverableLabelError(KeyError):
    def __str__(self):
        return self.args[0]


class DegenerateVectorError(ValueError):
    pass


@dataclass
class WordVectors:
    vocab: dict
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.vocab):
            raise ValueError("vocab and vector rows disagree")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("word vectors must be finite")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_dict(cls, words: Mapping[str, Sequence[float]]) -> "WordVectors":
        names = list(words)
        vecs = np.array([words[w] for w in names], dtype=np.float64).reshape(len(names), -1)
        return cls({w: i for i, w in enumerate(names)}, vecs)

    def get(self, word: str):
        i = self.vocab.get(word)
        return None if i is None else self.vectors[i]

    def __contains__(self, word):
        return word in self.vocab


def load_word_vectors(path) -> WordVectors:
    """word2vec text format (``<count> <dim>`` header, one word per line)."""
    names, matrix, _ = load_vectors(path)
    return WordVectors({w: i for i, w in enumerate(names)}, matrix)


def save_word_vectors(wv: WordVectors, path) -> None:
    names = sorted(wv.vocab, key=wv.vocab.get)
    save_vectors(path, names, wv.vectors)


_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def label_tokens(label: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(label.lower()) if t]


def relation_word_embedding(wv: WordVectors, label: str) -> np.ndarray:
    """Mean of the in-vocabulary token vectors of a relation label."""
    if not label:
        raise ValueError("empty label")
    vecs = [wv.get(t) for t in label_tokens(label)]
    vecs = [v for v in vecs if v is not None]
    if not vecs:
        raise UncoverableLabelError(f"no token of label {label!r} is in the word vocabulary")
    return np.mean(vecs, axis=0)


@dataclass
class SemanticSpace:
    """relation id -> vector for one embedding variant."""

    kind: str
    dim: int
    table: dict = field(default_factory=dict)
    uncovered: frozenset = frozenset()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown space kind {self.kind!r}")
        clean = {}
        for r, v in self.table.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (self.dim,):
                raise ValueError(f"relation {r}: vector shape {v.shape} != ({self.dim},)")
            if not np.all(np.isfinite(v)):
                raise DegenerateVectorError(f"relation {r}: non-finite vector")
            if not np.any(v):
                raise DegenerateVectorError(f"relation {r}: zero vector")
            clean[int(r)] = v
        self.table = clean

    @property
    def coverage(self) -> frozenset:
        return frozenset(self.table)

    def __getitem__(self, r):
        try:
            return self.table[r]
        except KeyError:
            raise CoverageError(f"relation {r} not covered by {self.kind} space", [r]) from None

    def __contains__(self, r):
        return r in self.table

    def __len__(self):
        return len(self.table)

    def restrict(self, relations: Iterable[int]) -> "SemanticSpace":
        keep = set(relations)
        return SemanticSpace(self.kind, self.dim, {r: v for r, v in self.table.items() if r in keep})

    def matrix(self, relations: Sequence[int]) -> np.ndarray:
        return np.stack([self[r] for r in relations]) if relations else np.zeros((0, self.dim))


def build_space_wd(wv: WordVectors, relations: Vocab, ids: Optional[Iterable[int]] = None) -> SemanticSpace:
    """Label-word space; relations whose label is fully OOV are left uncovered."""
    ids = range(len(relations)) if ids is None else ids
    table, missing = {}, []
    for r in ids:
        try:
            table[r] = relation_word_embedding(wv, relations.name(r))
        except UncoverableLabelError:
            log.warning("event=uncoverable-label relation=%d", r)
            missing.append(r)
    return SemanticSpace("wd", wv.dim, table, frozenset(missing))


def build_space_kg(E: EmbeddingTable, relations: Iterable[int]) -> SemanticSpace:
    relations = list(relations)
    missing = [r for r in relations if not 0 <= r < len(E.relation_vecs)]
    if missing:
        raise CoverageError(f"no trained vector for relations {missing}", missing)
    return SemanticSpace("kg", E.dim, {r: E.relation_vecs[r].copy() for r in relations})


def _chain(rule: Rule):
    """Order body atoms as a walk from head subject to head object.

    Yields (atom, direction) with direction +1 when traversed subject->object.
    """
    cur, goal = rule.head.subject, rule.head.object
    remaining = list(rule.body)
    steps = []
    while remaining:
        for a in remaining:
            if a.subject == cur:
                steps.append((a, 1))
                cur = a.object
                break
            if a.object == cur:
                steps.append((a, -1))
                cur = a.subject
                break
        else:
            raise CompositionError(f"rule body is not a path from {rule.head.subject}: {rule}")
        remaining.remove(a)
    if cur != goal:
        raise CompositionError(f"rule body does not end at head object {goal}: {rule}")
    return steps


def compose_rule_embedding(rule: Rule, target: int, kg_space: SemanticSpace) -> np.ndarray:
    """Solve the translation identity  E(head) = sum_i dir_i * E(body_i)
    for the target relation's vector."""
    occurrences = rule.relations().count(target)
    if occurrences != 1:
        raise CompositionError(f"target relation {target} occurs {occurrences} times in rule")
    others = [r for r in rule.relations() if r != target]
    missing = [r for r in others if r not in kg_space]
    if missing:
        raise CoverageError(f"relations {missing} lack vectors", missing)
    steps = _chain(rule)
    if rule.head.relation == target:
        return sum(d * kg_space[a.relation] for a, d in steps)
    rest = kg_space[rule.head.relation].copy()
    sign = 0
    for a, d in steps:
        if a.relation == target:
            sign = d
        else:
            rest = rest - d * kg_space[a.relation]
    return sign * rest


def composable(rule: Rule, target: int, kg_space: SemanticSpace, unseen: Iterable[int] = ()) -> bool:
    rels = rule.relations()
    if rels.count(target) != 1:
        return False
    blocked = set(unseen)
    for r in rels:
        if r != target and (r in blocked or r not in kg_space):
            return False
    try:
        _chain(rule)
    except CompositionError:
        return False
    return True


def rule_embedding(rules: Sequence[Rule], target: int, kg_space: SemanticSpace, K: int,
                   unseen: Iterable[int] = ()):
    """Confidence-weighted mean of composed vectors over the top-K usable rules.

    Returns (vector or None, rules used).
    """
    unseen = frozenset(unseen)
    usable = [r for r in rules if composable(r, target, kg_space, unseen)]
    chosen = rules_about(usable, target, K)
    weights = np.array([r.pca_confidence for r in chosen])
    if not chosen or weights.sum() <= 0:
        return None, chosen
    vecs = np.stack([compose_rule_embedding(r, target, kg_space) for r in chosen])
    return weights @ vecs / weights.sum(), chosen


def build_space_rl(rules: Sequence[Rule], unseen: Iterable[int], kg_space: SemanticSpace, K: int = 5) -> SemanticSpace:
    """Rule-guided space. Unseen relations get rule-composed vectors; every
    other relation of ``kg_space`` keeps its KG vector."""
    if K < 1:
        raise ValueError("K must be >= 1")
    unseen = frozenset(unseen)
    table = {r: v.copy() for r, v in kg_space.table.items() if r not in unseen}
    uncovered = []
    for u in sorted(unseen):
        vec, _ = rule_embedding(rules, u, kg_space, K, unseen)
        if vec is None or not np.any(vec):
            uncovered.append(u)
        else:
            table[u] = vec
    if unseen and len(uncovered) == len(unseen):
        raise CoverageError(f"no composable rule for any unseen relation {uncovered}", uncovered)
    for u in uncovered:
        log.warning("event=uncovered-unseen relation=%d space=rl", u)
    return SemanticSpace("rl", kg_space.dim, table, frozenset(uncovered))


@dataclass
class CombineParams:
    W2: np.ndarray
    b2: np.ndarray
    lam: float = 0.5

    def __post_init__(self):
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.W2.ndim != 2 or self.b2.shape != (self.W2.shape[1],):
            raise ValueError(f"W2 {self.W2.shape} and b2 {self.b2.shape} are inconsistent")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def init_combine_params(dim_a: int, dim_b: int, out_dim: int, seed: int, lam: float = 0.5) -> CombineParams:
    concat = dim_a + dim_b
    bound = 1.0 / np.sqrt(concat)
    rng = np.random.default_rng(seed)
    return CombineParams(rng.uniform(-bound, bound, size=(out_dim, concat)), np.zeros(concat), lam)


_CONCAT_KIND = {("kg", "wd"): "kw", ("rl", "wd"): "rw"}


def combine_concat_linear(A: SemanticSpace, B: SemanticSpace, params: CombineParams,
                          kind: Optional[str] = None) -> SemanticSpace:
    """Per relation: W2 @ ([a; b] + b2)."""
    if A.coverage != B.coverage:
        missing = sorted(A.coverage ^ B.coverage)
        raise CoverageError(f"spaces cover different relations; unmatched {missing}", missing)
    if params.W2.shape[1] != A.dim + B.dim:
        raise ValueError(f"W2 expects {params.W2.shape[1]} inputs, spaces give {A.dim + B.dim}")
    kind = kind or _CONCAT_KIND.get((A.kind, B.kind))
    if kind is None:
        raise ValueError(f"no combined kind for ({A.kind}, {B.kind})")
    table = {r: params.W2 @ (np.concatenate([A[r], B[r]]) + params.b2) for r in sorted(A.coverage)}
    return SemanticSpace(kind, params.W2.shape[0], table)


def combine_weighted_sum(rl_space: SemanticSpace, kg_space: SemanticSpace, lam: float = 0.5) -> SemanticSpace:
    """lam * rl + (1 - lam) * kg; relations without an rl vector fall back to kg."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if rl_space.dim != kg_space.dim:
        raise ValueError(f"dimension mismatch {rl_space.dim} != {kg_space.dim}")
    extra = sorted(rl_space.coverage - kg_space.coverage)
    if extra:
        raise CoverageError(f"kg space lacks relations {extra}", extra)
    table = {}
    for r, v_kg in kg_space.table.items():
        v_rl = rl_space.table.get(r)
        table[r] = v_kg.copy() if v_rl is None else lam * v_rl + (1.0 - lam) * v_kg
    return SemanticSpace("kr", kg_space.dim, table)


def save_space(space: SemanticSpace, path, relations: Vocab) -> None:
    ids = sorted(space.table)
    save_vectors(path, [relations.name(r) for r in ids], space.matrix(ids), header=f"kind={space.kind}")


def load_space(path, relations: Vocab) -> SemanticSpace:
    names, matrix, header = load_vectors(path)
    if not header or not header.startswith("kind="):
        raise ValueError(f"{path}: missing '#kind=' header")
    kind = header.split("=", 1)[1].strip()
    return SemanticSpace(kind, matrix.shape[1], {relations.id(n): row for n, row in zip(names, matrix)})
