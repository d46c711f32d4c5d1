import numpy as np
import pytest

from zsrel.kgstore import KnowledgeGraph
from zsrel.rulemine import body_pairs, mine_rules, score_rule
from zsrel.synth import (ConfigError, DerivedSpec, GenerationError, SynthConfig, cluster_relations, corpus_words,
                         default_config, gen_instances, gen_kg, gen_typed_kg, realize, synth_word_vectors)


def two_rule_config(noise=0.0, seed=0, n=100, facts=250):
    derived = [DerivedSpec("sponsors", ["founded", "located"], "xy,yz", noise),
               DerivedSpec("orbits", ["employs", "authored"], "yx,zy", noise)]
    return SynthConfig(n_entities=n, base_relations=4, derived_relations=derived, facts_per_relation=facts, seed=seed)


def test_noise_free_rules_recovered_exactly():
    cfg = two_rule_config(n=40, facts=60)
    kg, planted = gen_kg(cfg)
    mined = {(r.body, r.head): r for r in mine_rules(kg)}
    for rule in planted:
        derived = kg.facts(rule.head.relation)
        assert set(derived) == body_pairs(kg, rule.body, "x", "z")
        found = mined[(rule.body, rule.head)]
        assert found.support == len(derived)
        assert found.pca_confidence == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_noisy_rules_pca_band(seed):
    kg, planted = gen_kg(two_rule_config(noise=0.2, seed=seed))
    for rule in planted:
        assert len(body_pairs(kg, rule.body, "x", "z")) >= 500
        assert 0.6 <= score_rule(kg, rule).pca_confidence <= 0.95


def test_generation_deterministic():
    a, _ = gen_kg(default_config(seed=3))
    b, _ = gen_kg(default_config(seed=3))
    c, _ = gen_kg(default_config(seed=4))
    assert a.triples == b.triples
    assert a.triples != c.triples


def test_base_relations_unaffected_by_derived_list():
    small = SynthConfig(n_entities=30, base_relations=2, facts_per_relation=40, seed=1)
    more = SynthConfig(n_entities=30, base_relations=2, facts_per_relation=40, seed=1,
                       derived_relations=[DerivedSpec("sponsors", ["founded", "located"])])
    a, b = gen_kg(small)[0], gen_kg(more)[0]
    for r in range(2):
        assert a.facts(r) == b.facts(r)


def test_empty_derivation_is_an_error():
    cfg = SynthConfig(n_entities=50, base_relations=2, facts_per_relation=1, seed=0,
                      derived_relations=[DerivedSpec("sponsors", ["founded", "located"])])
    with pytest.raises(GenerationError):
        gen_kg(cfg)


def test_realize_example():
    toks, hs, ts = realize("HEAD flows into TAIL", "nile", "sea")
    assert toks == ["nile", "flows", "into", "sea"]
    assert hs == (0, 0) and ts == (3, 3)


def test_realize_multiword_entity():
    toks, hs, ts = realize("the HEAD of TAIL", "new york", "x")
    assert toks == ["the", "new", "york", "of", "x"]
    assert hs == (1, 2) and ts == (4, 4)


def test_realize_missing_slot():
    with pytest.raises(ConfigError):
        realize("HEAD only", "a", "b")


def test_template_validation():
    with pytest.raises(ConfigError):
        SynthConfig(base_relations=1, templates={"founded": ["HEAD and HEAD"]})
    with pytest.raises(ConfigError):
        DerivedSpec("x", ["a", "b"], noise_rate=1.0)
    with pytest.raises(ConfigError):
        DerivedSpec("x", ["a"], "xy,yz")
    with pytest.raises(ConfigError):
        SynthConfig(base_relations=2, derived_relations=[DerivedSpec("x", ["founded", "nope"])])


def test_instances_split_contract():
    cfg = default_config(seed=0)
    kg, _ = gen_kg(cfg)
    train, test, split = gen_instances(kg, cfg)
    assert not {i.label for i in train} & split.unseen
    assert {i.label for i in train} <= split.seen
    assert split.unseen <= {i.label for i in test}
    train_sents = {i.tokens for i in train}
    assert not any(i.tokens in train_sents for i in test)
    for inst in train + test:
        assert (kg.entities.id(inst.tokens[inst.head[0]]), inst.label,
                kg.entities.id(inst.tokens[inst.tail[0]])) in kg


def test_instance_counts():
    cfg = SynthConfig(n_entities=60, base_relations=3, facts_per_relation=50, train_fraction=0.7, seed=2)
    kg, _ = gen_kg(cfg)
    train, test, _ = gen_instances(kg, cfg)
    for r in range(3):
        n_train = sum(i.label == r for i in train)
        assert n_train == 35
        # duplicate sentences are removed from test only
        assert sum(i.label == r for i in test) <= 15


def test_instances_deterministic():
    cfg = default_config(seed=1)
    kg, _ = gen_kg(cfg)
    assert gen_instances(kg, cfg) == gen_instances(kg, cfg)


def test_word_vectors_cover_corpus():
    cfg = default_config()
    kg, _ = gen_kg(cfg)
    words = corpus_words(cfg)
    wv = synth_word_vectors(words, 0.05, seed=0)
    train, test, _ = gen_instances(kg, cfg)
    entity_words = set(kg.entities.names)
    for inst in train + test:
        assert all(w in wv or w in entity_words for w in inst.tokens)
    assert wv.dim == len(words)
    off = wv.vectors - np.eye(len(words))
    assert 0.03 < off.std() < 0.07


def test_typed_kg_shape_and_capacity():
    kg = gen_typed_kg(200, 10, 2000, seed=0)
    assert isinstance(kg, KnowledgeGraph)
    assert len(kg) == 2000 and kg.n_entities == 200 and kg.n_relations == 10
    assert gen_typed_kg(200, 10, 2000, seed=0).triples == kg.triples
    with pytest.raises(ConfigError):
        gen_typed_kg(10, 1, 10_000, n_groups=5)
    with pytest.raises(ConfigError):
        gen_typed_kg(n_groups=1)


def test_typed_kg_is_translational():
    # positions p and offsets s with p[t] - p[h] = s[r] for every fact, s[0] pinned to 1
    kg = gen_typed_kg(60, 4, 300, n_groups=6, seed=1)
    n, m = kg.n_entities, kg.n_relations
    rows = []
    for h, r, t in kg.triples:
        row = np.zeros(n + m)
        row[t], row[h], row[n + r] = 1.0, -1.0, -1.0
        rows.append(row)
    pin = np.zeros(n + m)
    pin[n] = 1.0
    A, b = np.vstack(rows + [pin]), np.r_[np.zeros(len(rows)), 1.0]
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    assert np.abs(A @ x - b).max() < 1e-8


def test_cluster_relations():
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.normal(0, 0.05, size=(5, 3)), rng.normal(5, 0.05, size=(5, 3))])
    labels = cluster_relations(pts, 2, seed=0)
    assert len(set(labels[:5])) == 1 and len(set(labels[5:])) == 1 and labels[0] != labels[5]
