"""Seeded synthetic corpora: knowledge graphs with planted rules, templated
sentences and matching toy word vectors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoder import Instance
from .kgstore import KnowledgeGraph, RelationSplit, Vocab
from .rulemine import Atom, Rule, body_pairs
from .semspace import WordVectors, label_tokens

PATTERNS = {
    "xy,yz": (("x", "y"), ("y", "z")),
    "yx,yz": (("y", "x"), ("y", "z")),
    "xy,zy": (("x", "y"), ("z", "y")),
    "yx,zy": (("y", "x"), ("z", "y")),
    "xz": (("x", "z"),),
    "zx": (("z", "x"),),
}

FILLERS = ("the", "of", "and", "near", "was", "with", "in", "by")

DEFAULT_BASE_NAMES = ("founded", "located", "employs", "authored", "hosts", "governs", "supplies",
                      "trains", "funds", "owns", "edits", "visits")
DEFAULT_DERIVED_NAMES = ("sponsors", "orbits", "guards", "nominated", "borders", "inherits", "mentors")


class GenerationError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class DerivedSpec:
    name: str
    sources: list
    pattern: str = "xy,yz"
    noise_rate: float = 0.0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"unknown pattern {self.pattern!r}")
        if len(self.sources) != len(PATTERNS[self.pattern]):
            raise ConfigError(f"pattern {self.pattern} needs {len(PATTERNS[self.pattern])} sources")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError("noise_rate must lie in [0, 1)")


@dataclass
class SynthConfig:
    n_entities: int = 150
    base_relations: list = field(default_factory=lambda: list(DEFAULT_BASE_NAMES[:8]))
    derived_relations: list = field(default_factory=list)
    facts_per_relation: int = 200
    instances_per_relation: Optional[int] = None
    templates: dict = field(default_factory=dict)
    train_fraction: float = 0.8
    word_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.base_relations, int):
            self.base_relations = list(DEFAULT_BASE_NAMES[:self.base_relations])
        self.derived_relations = [d if isinstance(d, DerivedSpec) else DerivedSpec(**d)
                                  for d in self.derived_relations]
        names = list(self.base_relations) + [d.name for d in self.derived_relations]
        if len(set(names)) != len(names):
            raise ConfigError("relation names must be unique")
        for d in self.derived_relations:
            bad = [s for s in d.sources if s not in self.base_relations]
            if bad:
                raise ConfigError(f"{d.name}: sources {bad} are not base relations")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.n_entities < 3:
            raise ConfigError("need at least three entities")
        for rel, temps in self.templates.items():
            for t in temps:
                toks = t.split()
                if toks.count("HEAD") != 1 or toks.count("TAIL") != 1:
                    raise ConfigError(f"template {t!r} of {rel} needs exactly one HEAD and one TAIL slot")

    @property
    def relation_names(self) -> list:
        return list(self.base_relations) + [d.name for d in self.derived_relations]

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SynthConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def default_config(seed: int = 0, noise_rate: float = 0.1) -> SynthConfig:
    """8 base relations and 5 chain-derived ones."""
    base = list(DEFAULT_BASE_NAMES[:8])
    pairs = [(0, 1), (2, 3), (4, 5), (6, 7), (5, 0)]
    derived = [DerivedSpec(DEFAULT_DERIVED_NAMES[i], [base[a], base[b]], "xy,yz", noise_rate)
               for i, (a, b) in enumerate(pairs)]
    return SynthConfig(base_relations=base, derived_relations=derived, seed=seed)


def _stream(seed: int, *key: int) -> np.random.Generator:
    # one independent stream per (stage, relation) so output ignores scheduling
    return np.random.default_rng([seed, *key])


def _random_pairs(rng, n_entities: int, count: int, exclude=frozenset()):
    total = n_entities * (n_entities - 1)
    count = min(count, total - len(exclude))
    out, taken = [], set(exclude)
    while len(out) < count:
        for k in rng.choice(total, size=min(total, 2 * (count - len(out)) + 8), replace=False):
            h, rest = divmod(int(k), n_entities - 1)
            t = rest if rest < h else rest + 1
            if (h, t) not in taken:
                taken.add((h, t))
                out.append((h, t))
                if len(out) == count:
                    break
    return out


def planted_rule(spec: DerivedSpec, relations: Vocab) -> Rule:
    atoms = tuple(Atom(relations.id(src), s, o) for src, (s, o) in zip(spec.sources, PATTERNS[spec.pattern]))
    return Rule(atoms, Atom(relations.id(spec.name), "x", "z"))


def gen_kg(cfg: SynthConfig):
    """Returns (graph, planted rules). Derived facts are exactly the planted
    derivations, thinned by noise_rate and topped up with as many random
    spurious facts in expectation."""
    entities = Vocab(f"e{i}" for i in range(cfg.n_entities))
    relations = Vocab(cfg.relation_names)
    triples = []
    for i, name in enumerate(cfg.base_relations):
        r = relations.id(name)
        rng = _stream(cfg.seed, 0, i)
        triples += [(h, r, t) for h, t in _random_pairs(rng, cfg.n_entities, cfg.facts_per_relation)]
    base_kg = KnowledgeGraph(entities, relations, triples)

    planted = []
    for i, spec in enumerate(cfg.derived_relations):
        rule = planted_rule(spec, relations)
        planted.append(rule)
        pairs = sorted(body_pairs(base_kg, rule.body, "x", "z"))
        if not pairs:
            raise GenerationError(f"planted rule for {spec.name} derives no facts")
        rng = _stream(cfg.seed, 1, i)
        r = rule.head.relation
        kept = [p for p, u in zip(pairs, rng.random(len(pairs))) if u >= spec.noise_rate]
        n_spurious = int(rng.binomial(len(pairs), spec.noise_rate)) if spec.noise_rate > 0 else 0
        spurious = _random_pairs(rng, cfg.n_entities, n_spurious, exclude=frozenset(pairs))
        triples += [(h, r, t) for h, t in kept + spurious]
    return KnowledgeGraph(entities, relations, triples), planted


def _keywords(i: int):
    return (f"k{i}a", f"k{i}b")


def default_templates(cfg: SynthConfig) -> dict:
    """Keyword templates: each base relation owns two keywords; a derived
    relation's sentences carry one keyword from each source relation, so
    seen and unseen relations share vocabulary."""
    out = {}
    base_idx = {name: i for i, name in enumerate(cfg.base_relations)}
    for i, name in enumerate(cfg.base_relations):
        a, b = _keywords(i)
        out[name] = [f"HEAD {a} TAIL", f"HEAD {b} TAIL", f"HEAD the {a} of TAIL",
                     f"the HEAD was {b} by TAIL", f"HEAD {a} {b} TAIL", f"HEAD and {b} with TAIL"]
    for d in cfg.derived_relations:
        kws = [_keywords(base_idx[s]) for s in d.sources]
        if len(kws) == 1:
            (a, b), = kws
            out[d.name] = [f"HEAD {a} near TAIL", f"HEAD in {b} TAIL"]
        else:
            (a1, b1), (a2, b2) = kws
            out[d.name] = [f"HEAD {a1} {a2} TAIL", f"HEAD {b1} the {b2} TAIL",
                           f"HEAD {a1} of {b2} TAIL", f"the HEAD {b1} {a2} in TAIL"]
    return out


def templates_for(cfg: SynthConfig) -> dict:
    temps = default_templates(cfg)
    temps.update(cfg.templates)
    return temps


def realize(template: str, head: str, tail: str):
    """Substitute entity names; returns (tokens, head_span, tail_span)."""
    tokens, hspan, tspan = [], None, None
    for tok in template.split():
        if tok == "HEAD":
            words = head.split()
            hspan = (len(tokens), len(tokens) + len(words) - 1)
            tokens += words
        elif tok == "TAIL":
            words = tail.split()
            tspan = (len(tokens), len(tokens) + len(words) - 1)
            tokens += words
        else:
            tokens.append(tok)
    if hspan is None or tspan is None:
        raise ConfigError(f"template {template!r} lacks a HEAD or TAIL slot")
    return tokens, hspan, tspan


def gen_instances(kg: KnowledgeGraph, cfg: SynthConfig):
    """One sentence per sampled fact. Derived relations are unseen (test only);
    base relations are split into train and test."""
    temps = templates_for(cfg)
    derived = {d.name for d in cfg.derived_relations}
    per_rel = cfg.instances_per_relation or cfg.facts_per_relation
    train, test = [], []
    for i, name in enumerate(cfg.relation_names):
        r = kg.relations.id(name)
        facts = kg.facts(r)
        if not facts:
            continue
        if not temps.get(name):
            raise ConfigError(f"no template for relation {name}")
        rng = _stream(cfg.seed, 2, i)
        m = min(per_rel, len(facts))
        chosen = rng.choice(len(facts), size=m, replace=False)
        insts = []
        for k in chosen:
            h, t = facts[k]
            template = temps[name][int(rng.integers(len(temps[name])))]
            toks, hs, ts = realize(template, kg.entities.name(h), kg.entities.name(t))
            insts.append(Instance(toks, hs, ts, r))
        if name in derived:
            test += insts
        else:
            n_train = int(round(cfg.train_fraction * m))
            train += insts[:n_train]
            test += insts[n_train:]
    seen_sentences = {inst.tokens for inst in train}
    test = [inst for inst in test if inst.tokens not in seen_sentences]
    split = RelationSplit(frozenset(kg.relations.id(n) for n in cfg.base_relations),
                          frozenset(kg.relations.id(n) for n in derived))
    return train, test, split


def corpus_words(cfg: SynthConfig) -> list:
    words = []
    for temps in templates_for(cfg).values():
        for t in temps:
            words += [w for w in t.split() if w not in ("HEAD", "TAIL")]
    for name in cfg.relation_names:
        words += label_tokens(name)
    words += list(FILLERS)
    return list(dict.fromkeys(words))


def synth_word_vectors(words: Sequence[str], noise: float = 0.05, seed: int = 0) -> WordVectors:
    """One-hot vectors plus Gaussian noise, one dimension per word."""
    rng = np.random.default_rng([seed, 3])
    vecs = np.eye(len(words)) + noise * rng.standard_normal((len(words), len(words)))
    return WordVectors({w: i for i, w in enumerate(words)}, vecs)


def gen_typed_kg(n_entities: int = 200, n_relations: int = 10, n_triples: int = 2000,
                 n_groups: int = 20, seed: int = 0) -> KnowledgeGraph:
    """Entities fall into groups laid out on a line; relation r links a member
    of group g to a random member of group g + shift_r. A fixed shift per
    relation makes the graph exactly representable by translations."""
    if n_groups < 2:
        raise ConfigError("need at least two groups")
    rng = np.random.default_rng([seed, 4])
    group = rng.permutation(np.arange(n_entities) % n_groups)
    members = [np.flatnonzero(group == g) for g in range(n_groups)]
    shifts = 1 + rng.permutation(n_relations) % (n_groups - 1)
    entities = Vocab(f"e{i}" for i in range(n_entities))
    relations = Vocab(f"r{j}" for j in range(n_relations))
    capacity = sum(len(members[g]) * len(members[g + s]) for s in shifts for g in range(n_groups - s))
    if n_triples > capacity:
        raise ConfigError(f"at most {capacity} triples fit this layout, asked for {n_triples}")
    triples = set()
    while len(triples) < n_triples:
        r = int(rng.integers(n_relations))
        g = int(rng.integers(n_groups - shifts[r]))
        h = int(rng.choice(members[g]))
        t = int(rng.choice(members[g + shifts[r]]))
        triples.add((h, r, t))
    ordered = sorted(triples)
    rng.shuffle(ordered)
    return KnowledgeGraph(entities, relations, [tuple(x) for x in ordered])


def cluster_relations(vectors: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """k-means cluster id per row (label embeddings in, cluster ids out)."""
    from scipy.cluster.vq import kmeans2
    _, labels = kmeans2(np.asarray(vectors, dtype=np.float64), k, minit="++", seed=seed)
    return labels
