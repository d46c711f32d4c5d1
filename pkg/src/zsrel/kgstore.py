"""Knowledge-graph storage: vocabularies, an indexed triple set and the
seen/unseen relation split."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple


class KGError(Exception):
    pass


class ParseError(KGError, ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class EmptyGraphError(KGError, ValueError):
    pass


class DegenerateSplitError(KGError, ValueError):
    pass


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocab:
    """Bidirectional string <-> dense id map, ids assigned in insertion order."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.index: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self.index.get(name)
        if idx is None:
            idx = len(self.names)
            self.names.append(name)
            self.index[name] = idx
        return idx

    def id(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise KeyError(f"unknown name {name!r}") from None

    def name(self, idx: int) -> str:
        if not 0 <= idx < len(self.names):
            raise KeyError(f"id {idx} out of range [0, {len(self.names)})")
        return self.names[idx]

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.index

    def __iter__(self):
        return iter(self.names)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.names == other.names


class KnowledgeGraph:
    """Immutable set of triples with three lookup indexes.

    ``by_relation[r]`` lists (head, tail) pairs in insertion order,
    ``hr2t[(h, r)]`` and ``tr2h[(t, r)]`` give frozen sets.
    """

    def __init__(self, entities: Vocab, relations: Vocab, triples: Iterable[tuple[int, int, int]]):
        self.entities = entities
        self.relations = relations
        n_e, n_r = len(entities), len(relations)
        ordered: list[Triple] = []
        seen: set[Triple] = set()
        for h, r, t in triples:
            if not (0 <= h < n_e and 0 <= t < n_e):
                raise KeyError(f"entity id out of range in {(h, r, t)}")
            if not 0 <= r < n_r:
                raise KeyError(f"relation id out of range in {(h, r, t)}")
            tr = Triple(int(h), int(r), int(t))
            if tr not in seen:
                seen.add(tr)
                ordered.append(tr)
        self.triples: tuple[Triple, ...] = tuple(ordered)
        self._triple_set = frozenset(seen)

        by_rel = defaultdict(list)
        hr2t = defaultdict(set)
        tr2h = defaultdict(set)
        for h, r, t in ordered:
            by_rel[r].append((h, t))
            hr2t[(h, r)].add(t)
            tr2h[(t, r)].add(h)
        self.by_relation: dict[int, tuple[tuple[int, int], ...]] = {r: tuple(v) for r, v in by_rel.items()}
        self.hr2t: dict[tuple[int, int], frozenset[int]] = {k: frozenset(v) for k, v in hr2t.items()}
        self.tr2h: dict[tuple[int, int], frozenset[int]] = {k: frozenset(v) for k, v in tr2h.items()}

    @classmethod
    def from_names(cls, triples: Iterable[tuple[str, str, str]],
                   entities: Iterable[str] = (), relations: Iterable[str] = ()) -> "KnowledgeGraph":
        """Build from string triples. Optional ``entities``/``relations`` seed
        the vocabularies first (useful to keep ids aligned across subgraphs)."""
        ev, rv = Vocab(entities), Vocab(relations)
        ids = [(ev.add(h), rv.add(r), ev.add(t)) for h, r, t in triples]
        return cls(ev, rv, ids)

    def subgraph(self, triples: Iterable[tuple[int, int, int]]) -> "KnowledgeGraph":
        """Graph over the same vocabularies holding only ``triples``."""
        return KnowledgeGraph(self.entities, self.relations, triples)

    def __len__(self):
        return len(self.triples)

    def __contains__(self, triple) -> bool:
        return tuple(triple) in self._triple_set

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def facts(self, r: int) -> tuple[tuple[int, int], ...]:
        return self.by_relation.get(r, ())

    def named_triples(self):
        en, rn = self.entities.names, self.relations.names
        return [(en[h], rn[r], en[t]) for h, r, t in self.triples]

    def _check_entity(self, e):
        if not 0 <= e < len(self.entities):
            raise KeyError(f"entity id {e} out of range")

    def _check_relation(self, r):
        if not 0 <= r < len(self.relations):
            raise KeyError(f"relation id {r} out of range")


def objects(kg: KnowledgeGraph, h: int, r: int) -> frozenset[int]:
    kg._check_entity(h)
    kg._check_relation(r)
    return kg.hr2t.get((h, r), frozenset())


def subjects(kg: KnowledgeGraph, t: int, r: int) -> frozenset[int]:
    kg._check_entity(t)
    kg._check_relation(r)
    return kg.tr2h.get((t, r), frozenset())


def load_triples(path) -> KnowledgeGraph:
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3 or not all(fields):
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}")
            rows.append(tuple(fields))
    if not rows:
        raise EmptyGraphError(f"{path}: no triples")
    return KnowledgeGraph.from_names(rows)


def save_triples(kg: KnowledgeGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.named_triples():
            fh.write(f"{h}\t{r}\t{t}\n")


@dataclass(frozen=True)
class RelationSplit:
    seen: frozenset[int]
    unseen: frozenset[int]

    def __post_init__(self):
        if self.seen & self.unseen:
            raise DegenerateSplitError(f"seen and unseen overlap: {sorted(self.seen & self.unseen)}")


def split_relations(kg: KnowledgeGraph, instance_counts: Mapping[int, int],
                    cluster_assign: Mapping[int, object],
                    seen_threshold: int = 1200, drop_threshold: int = 500) -> RelationSplit:
    """Threshold split within clusters.

    Clusters whose relations all fall below ``drop_threshold`` are dropped.
    In the remaining clusters, relations with at least ``seen_threshold``
    instances are seen and the rest unseen.
    """
    if not seen_threshold > drop_threshold > 0:
        raise ValueError("need seen_threshold > drop_threshold > 0")
    rels = range(kg.n_relations)
    missing = [kg.relations.name(r) for r in rels if r not in instance_counts or r not in cluster_assign]
    if missing:
        raise ValueError(f"relations without count or cluster: {missing}")

    clusters = defaultdict(list)
    for r in rels:
        clusters[cluster_assign[r]].append(r)
    seen, unseen = set(), set()
    for members in clusters.values():
        if all(instance_counts[r] < drop_threshold for r in members):
            continue
        for r in members:
            (seen if instance_counts[r] >= seen_threshold else unseen).add(r)
    if not seen or not unseen:
        raise DegenerateSplitError(f"split has {len(seen)} seen and {len(unseen)} unseen relations")
    return RelationSplit(frozenset(seen), frozenset(unseen))


def save_split(split: RelationSplit, relations: Vocab, path) -> None:
    doc = {"seen": [relations.name(r) for r in sorted(split.seen)],
           "unseen": [relations.name(r) for r in sorted(split.unseen)]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_split(path, relations: Vocab) -> RelationSplit:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if set(doc) != {"seen", "unseen"}:
        raise ValueError(f"{path}: split file needs exactly 'seen' and 'unseen' keys")
    return RelationSplit(frozenset(relations.id(n) for n in doc["seen"]),
                         frozenset(relations.id(n) for n in doc["unseen"]))
