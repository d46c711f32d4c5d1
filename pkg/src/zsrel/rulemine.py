"""Closed Horn rules of body length <= 2, scored AMIE-style.

Groundings are injective: distinct variables bind to distinct entities, so a
body can never be satisfied through a reflexive binding.
"""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Sequence

from .kgstore import KnowledgeGraph, Vocab


class InvalidRuleError(ValueError):
    pass


class Atom(NamedTuple):
    relation: int
    subject: str
    object: str


@dataclass(frozen=True)
class Rule:
    body: tuple[Atom, ...]
    head: Atom
    support: int = 0
    head_coverage: float = 0.0
    pca_confidence: float = 0.0

    @property
    def length(self) -> int:
        return len(self.body)

    @property
    def signature(self) -> tuple:
        return (len(self.body), tuple(self.head), tuple(tuple(a) for a in self.body))

    def relations(self) -> list[int]:
        return [a.relation for a in self.body] + [self.head.relation]

    def format(self, relations: Vocab | None = None) -> str:
        name = (lambda r: relations.name(r)) if relations is not None else str
        atoms = " ∧ ".join(f"{name(a.relation)}({a.subject},{a.object})" for a in self.body)
        h = self.head
        return f"{atoms} ⇒ {name(h.relation)}({h.subject},{h.object})"


# Length-2 bodies, first atom over {x,y}, second over {y,z}; head is r3(x,z).
CHAIN_PATTERNS = (
    (("x", "y"), ("y", "z")),
    (("y", "x"), ("y", "z")),
    (("x", "y"), ("z", "y")),
    (("y", "x"), ("z", "y")),
)
SINGLE_PATTERNS = (("x", "z"), ("z", "x"))


def validate_rule(rule: Rule) -> None:
    if not 1 <= len(rule.body) <= 2:
        raise InvalidRuleError(f"body length {len(rule.body)} not in {{1, 2}}")
    atoms = list(rule.body) + [rule.head]
    for a in atoms:
        if a.subject == a.object:
            raise InvalidRuleError(f"atom {a} repeats a variable")
    counts = Counter(v for a in atoms for v in (a.subject, a.object))
    open_vars = [v for v, c in counts.items() if c < 2]
    if open_vars:
        raise InvalidRuleError(f"rule is not closed, variables {open_vars} occur once")
    # connectivity over shared variables
    reached = {rule.head.subject, rule.head.object}
    pending = list(rule.body)
    progress = True
    while pending and progress:
        progress = False
        for a in list(pending):
            if a.subject in reached or a.object in reached:
                reached.update((a.subject, a.object))
                pending.remove(a)
                progress = True
    if pending:
        raise InvalidRuleError("rule body is not connected to the head")


def body_pairs(kg: KnowledgeGraph, body: Sequence[Atom], x: str, z: str) -> set[tuple[int, int]]:
    """Distinct (x, z) bindings admitting an injective grounding of ``body``."""
    bindings: list[dict[str, int]] = [{}]
    for atom in body:
        rel, s, o = atom
        nxt = []
        for b in bindings:
            used = set(b.values())
            if s in b and o in b:
                if (b[s], rel, b[o]) in kg:
                    nxt.append(b)
            elif s in b:
                for e in kg.hr2t.get((b[s], rel), ()):
                    if e not in used:
                        nxt.append({**b, o: e})
            elif o in b:
                for e in kg.tr2h.get((b[o], rel), ()):
                    if e not in used:
                        nxt.append({**b, s: e})
            else:
                for h, t in kg.facts(rel):
                    if h != t:
                        nxt.append({**b, s: h, o: t})
        bindings = nxt
    return {(b[x], b[z]) for b in bindings}


def _metrics_from_pairs(kg: KnowledgeGraph, pairs, head: Atom):
    r = head.relation
    facts = kg.facts(r)
    if not facts:
        raise ZeroDivisionError(f"head relation {r} has no facts")
    support = sum(1 for (a, b) in pairs if (a, r, b) in kg)
    denom = sum(1 for (a, _) in pairs if (a, r) in kg.hr2t)
    pca = support / denom if denom else 0.0
    return support, support / len(facts), pca


def support(kg: KnowledgeGraph, rule: Rule) -> int:
    validate_rule(rule)
    pairs = body_pairs(kg, rule.body, rule.head.subject, rule.head.object)
    r = rule.head.relation
    return sum(1 for (a, b) in pairs if (a, r, b) in kg)


def pca_confidence(kg: KnowledgeGraph, rule: Rule) -> float:
    """support / #body pairs whose subject has some fact of the head relation."""
    validate_rule(rule)
    pairs = body_pairs(kg, rule.body, rule.head.subject, rule.head.object)
    r = rule.head.relation
    sup = sum(1 for (a, b) in pairs if (a, r, b) in kg)
    denom = sum(1 for (a, _) in pairs if (a, r) in kg.hr2t)
    return sup / denom if denom else 0.0


def head_coverage(kg: KnowledgeGraph, rule: Rule) -> float:
    validate_rule(rule)
    n = len(kg.facts(rule.head.relation))
    if n == 0:
        raise ZeroDivisionError(f"head relation {rule.head.relation} has no facts")
    return support(kg, rule) / n


def score_rule(kg: KnowledgeGraph, rule: Rule) -> Rule:
    """Return ``rule`` with all three metrics recomputed on ``kg``."""
    validate_rule(rule)
    pairs = body_pairs(kg, rule.body, rule.head.subject, rule.head.object)
    sup, hc, pca = _metrics_from_pairs(kg, pairs, rule.head)
    return replace(rule, support=sup, head_coverage=hc, pca_confidence=pca)


def candidate_bodies(n_relations: int, max_len: int = 2):
    for r1 in range(n_relations):
        for s, o in SINGLE_PATTERNS:
            yield (Atom(r1, s, o),)
    if max_len >= 2:
        for (s1, o1), (s2, o2) in CHAIN_PATTERNS:
            for r1 in range(n_relations):
                for r2 in range(n_relations):
                    yield (Atom(r1, s1, o1), Atom(r2, s2, o2))


def _rank_key(rule: Rule):
    return (-rule.pca_confidence, -rule.support, rule.signature)


def _mine_heads(kg: KnowledgeGraph, heads: Sequence[int], max_len: int,
                min_support: int, min_head_coverage: float, min_pca: float) -> list[Rule]:
    head_subjects = {r: {h for h, _ in kg.facts(r)} for r in heads}
    out = []
    for body in candidate_bodies(kg.n_relations, max_len):
        pairs = body_pairs(kg, body, "x", "z")
        if len(pairs) < min_support:
            continue
        x_counts = Counter(a for a, _ in pairs)
        for r3 in heads:
            n_facts = len(kg.facts(r3))
            if n_facts == 0:
                continue
            if len(body) == 1 and body[0] == Atom(r3, "x", "z"):
                continue
            sup = sum(1 for (a, b) in pairs if (a, r3, b) in kg)
            if sup < min_support:
                continue
            hc = sup / n_facts
            denom = sum(c for a, c in x_counts.items() if a in head_subjects[r3])
            pca = sup / denom
            if hc < min_head_coverage or pca < min_pca:
                continue
            out.append(Rule(body, Atom(r3, "x", "z"), sup, hc, pca))
    return out


def mine_rules(kg: KnowledgeGraph, max_len: int = 2, min_support: int = 2,
               min_head_coverage: float = 0.01, min_pca: float = 0.1, jobs: int = 1) -> list[Rule]:
    """Exhaustive search over the chain and single-atom rule shapes.

    Head relations are partitioned over ``jobs`` worker processes; the merged
    list is globally sorted by (pca desc, support desc, signature), so the
    result does not depend on ``jobs``.
    """
    if max_len not in (1, 2):
        raise ValueError("max_len must be 1 or 2")
    if min_support < 1:
        raise ValueError("min_support must be >= 1")
    if not (0.0 <= min_head_coverage <= 1.0 and 0.0 <= min_pca <= 1.0):
        raise ValueError("coverage/confidence thresholds must lie in [0, 1]")
    heads = list(range(kg.n_relations))
    args = (max_len, min_support, min_head_coverage, min_pca)
    if jobs > 1 and len(heads) > 1:
        parts = [heads[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_mine_heads, [kg] * len(parts), parts, *[[a] * len(parts) for a in args]))
        rules = [r for chunk in chunks for r in chunk]
    else:
        rules = _mine_heads(kg, heads, *args)
    rules.sort(key=_rank_key)
    return rules


def rules_about(rules: Iterable[Rule], r: int, K: int) -> list[Rule]:
    if K < 1:
        raise ValueError("K must be >= 1")
    hits = [rule for rule in rules if r in rule.relations()]
    hits.sort(key=lambda rule: (-rule.pca_confidence, rule.signature))
    return hits[:K]


def save_rules(rules: Iterable[Rule], path, relations: Vocab) -> None:
    def atom(a):
        return {"rel": relations.name(a.relation), "subj": a.subject, "obj": a.object}

    with open(path, "w", encoding="utf-8") as fh:
        for rule in rules:
            doc = {"body": [atom(a) for a in rule.body], "head": atom(rule.head),
                   "support": rule.support, "hc": rule.head_coverage, "pca": rule.pca_confidence}
            fh.write(json.dumps(doc) + "\n")


def load_rules(path, relations: Vocab) -> list[Rule]:
    def atom(d):
        return Atom(relations.id(d["rel"]), d["subj"], d["obj"])

    rules = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rule = Rule(tuple(atom(a) for a in d["body"]), atom(d["head"]),
                            int(d["support"]), float(d["hc"]), float(d["pca"]))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed rule ({exc})") from None
            validate_rule(rule)
            rules.append(rule)
    return rules
