"""End-to-end wiring of the modules, shared by the CLI and the acceptance run."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import encoder, kge, rulemine, semspace, synth, zeroshot

log = logging.getLogger(__name__)


def stage_seed(seed: int, stage: str) -> int:
    """Seed for one pipeline stage: first 32-bit word of
    SeedSequence([seed, crc32(stage)])."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0])


def build_spaces(kinds, kg, split, E, rules, wv, seed: int, K: int = 5, lam: float = 0.5,
                 combine: Optional[semspace.CombineParams] = None) -> dict:
    """Build the requested semantic spaces over every relation of ``kg``."""
    spaces = {}
    all_rels = range(kg.n_relations)
    kg_space = semspace.build_space_kg(E, all_rels)
    need = set(kinds)
    if need & {"kg", "kw", "kr"}:
        spaces["kg"] = kg_space
    if need & {"wd", "kw", "rw"}:
        spaces["wd"] = semspace.build_space_wd(wv, kg.relations, all_rels)
    if need & {"rl", "rw", "kr"}:
        spaces["rl"] = semspace.build_space_rl(rules, split.unseen, kg_space, K)
    if "kr" in need:
        spaces["kr"] = semspace.combine_weighted_sum(spaces["rl"], kg_space, lam)
    for kind, src in (("kw", "kg"), ("rw", "rl")):
        if kind in need:
            A = spaces[src]
            common = A.coverage & spaces["wd"].coverage
            A, B = A.restrict(common), spaces["wd"].restrict(common)
            params = combine or semspace.init_combine_params(A.dim, B.dim, A.dim, stage_seed(seed, "combine"), lam)
            spaces[kind] = semspace.combine_concat_linear(A, B, params, kind)
    return {k: spaces[k] for k in kinds}


def conse_predictions(test, wv, params, space, unseen, T: int = 3, sim: str = "cosine",
                      renormalize: bool = False):
    preds, records = [], []
    for i, inst in enumerate(test):
        f = encoder.pcnn_forward(inst, wv, params)
        top = encoder.classify_topT(f, params, T)
        g = zeroshot.conse_project(top, space, renormalize)
        preds.append(zeroshot.predict(g, space, unseen, sim, instance_id=i, gold=inst.label))
        records.append((top, inst.label))
    return preds, records


def devise_predictions(test, wv, trunk, proj, space, unseen, sim: str = "cosine"):
    preds = []
    for i, inst in enumerate(test):
        g = zeroshot.devise_project(encoder.pcnn_forward(inst, wv, trunk), proj)
        preds.append(zeroshot.predict(g, space, unseen, sim, instance_id=i, gold=inst.label))
    return preds


@dataclass
class SynthRunConfig:
    seed: int = 0
    noise_rate: float = 0.1
    kinds: tuple = ("wd", "kg", "rl", "kw", "rw", "kr")
    top_t: int = 3
    rule_k: int = 5
    lam: float = 0.5
    transe: dict = field(default_factory=lambda: {"epochs": 100, "batch_size": 100})
    encoder: dict = field(default_factory=lambda: {"epochs": 15, "batch_size": 8})
    mining: dict = field(default_factory=dict)


def run_synthetic(run: SynthRunConfig, synth_cfg: Optional[synth.SynthConfig] = None) -> dict:
    """Generate a planted-rule corpus and evaluate ConSE over every space kind."""
    cfg = synth_cfg or synth.default_config(run.seed, run.noise_rate)
    kg, planted = synth.gen_kg(cfg)
    train, test, split = synth.gen_instances(kg, cfg)
    test = [inst for inst in test if inst.label in split.unseen]
    wv = synth.synth_word_vectors(synth.corpus_words(cfg), cfg.word_noise, cfg.seed)

    E = kge.train_transe(kg, kge.TransEConfig(seed=stage_seed(run.seed, "train-kge"), **run.transe))
    rules = rulemine.mine_rules(kg, **run.mining)
    spaces = build_spaces(run.kinds, kg, split, E, rules, wv, run.seed, run.rule_k, run.lam)

    enc_cfg = encoder.EncoderConfig(seed=stage_seed(run.seed, "train-encoder"), **run.encoder)
    params = encoder.train_classifier(train, wv, enc_cfg, classes=sorted(split.seen))

    results = {}
    for kind, space in spaces.items():
        preds, records = conse_predictions(test, wv, params, space, split.unseen, run.top_t)
        results[kind] = {"metrics": zeroshot.evaluate(preds), "records": records}
    return {"kg": kg, "planted": planted, "rules": rules, "split": split, "spaces": spaces,
            "params": params, "train": train, "test": test, "wv": wv, "results": results,
            "seen_accuracy": None}
