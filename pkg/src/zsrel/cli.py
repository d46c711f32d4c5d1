"""Command-line pipeline.

Every subcommand reads and writes the documented file formats and leaves a
``<artifact>.manifest.json`` next to its primary output. Exit status: 0 on
success, 1 on validation errors (bad flags, missing inputs, malformed
files), 2 on runtime failures.

Configuration precedence: explicit flags > ``--set a.b=value`` overrides >
``--config`` JSON > built-in defaults.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__, encoder, kge, kgstore, rulemine, semspace, synth, zeroshot
from .pipeline import build_spaces, conse_predictions, devise_predictions, stage_seed

log = logging.getLogger("zsrel")

DEFAULTS = {
    "seed": 0,
    "synth": {},
    "transe": {"dim": 100, "margin": 1.0, "learning_rate": 0.01, "epochs": 100, "batch_size": 100, "norm": 2},
    "mining": {"max_len": 2, "min_support": 2, "min_head_coverage": 0.01, "min_pca": 0.1},
    "space": {"rule_k": 5, "lam": 0.5},
    "encoder": {"learning_rate": 0.01, "epochs": 15, "batch_size": 8, "channels": 250, "kernel": 3,
                "pos_dim": 5, "max_dist": 30, "dropout": 0.5},
    "devise": {"margin": 1.0, "learning_rate": 0.01, "epochs": 10, "batch_size": 8, "negatives": 5},
    "predict": {"top_t": 3, "sim": "cosine", "renormalize": False},
}


class UsageError(Exception):
    """Validation failure; exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _KVFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        if "=" not in msg.split(" ", 1)[0]:
            msg = "msg=" + json.dumps(msg)
        return f"{record.levelname.lower()} logger={record.name} {msg}"


# --- config ------------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"override {assignment!r} is not key=value")
    key, value = assignment.split("=", 1)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = _parse_value(value)


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path, overrides) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = _merge(cfg, json.load(fh))
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    for ov in overrides or ():
        apply_override(cfg, ov)
    return cfg


# --- manifest ----------------------------------------------------------------

def content_hash(path) -> str:
    """git blob hash of a file."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(primary, subcommand, cfg, seeds, inputs, outputs, started) -> Path:
    primary = Path(primary)
    target = primary / f"{subcommand}.manifest.json" if primary.is_dir() else primary.with_name(primary.name + ".manifest.json")
    doc = {
        "subcommand": subcommand,
        "version": __version__,
        "config": cfg,
        "seeds": seeds,
        "inputs": {k: {"path": str(v), "sha1": content_hash(v)} for k, v in inputs.items() if v},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "duration_s": round(time.time() - started, 3),
    }
    _atomic_write_text(target, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return target


def _require(path, what):
    if path is None:
        raise UsageError(f"missing --{what}")
    if not Path(path).exists():
        raise UsageError(f"{what} file {path} does not exist")
    return path


# --- subcommands -------------------------------------------------------------

def cmd_gen_synth(args, cfg):
    scfg = synth.SynthConfig.from_dict({"seed": cfg["seed"], **cfg["synth"]}) if cfg["synth"] \
        else synth.default_config(cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kg, planted = synth.gen_kg(scfg)
    train, test, split = synth.gen_instances(kg, scfg)
    wv = synth.synth_word_vectors(synth.corpus_words(scfg), scfg.word_noise, scfg.seed)
    files = {"triples": out / "kg.tsv", "train": out / "train.jsonl", "test": out / "test.jsonl",
             "split": out / "split.json", "words": out / "words.vec", "planted": out / "planted.jsonl",
             "synth_config": out / "synth_config.json"}
    kgstore.save_triples(kg, files["triples"])
    encoder.save_instances(train, files["train"], kg.relations)
    encoder.save_instances(test, files["test"], kg.relations)
    kgstore.save_split(split, kg.relations, files["split"])
    semspace.save_word_vectors(wv, files["words"])
    rulemine.save_rules(planted, files["planted"], kg.relations)
    files["synth_config"].write_text(json.dumps(scfg.to_dict(), indent=1) + "\n")
    log.info("event=gen-synth triples=%d train=%d test=%d", len(kg), len(train), len(test))
    return out, {"seed": scfg.seed}, {}, files


def _kg(args):
    return kgstore.load_triples(_require(args.triples, "triples"))


def _embeddings(args, kg):
    d = Path(_require(args.embeddings, "embeddings"))
    return kge.align_to_graph(kge.load_embeddings(d / "entities.vec", d / "relations.vec"), kg)


def cmd_train_kge(args, cfg):
    kg = _kg(args)
    tcfg = dict(cfg["transe"])
    for flag, key in (("dim", "dim"), ("margin", "margin"), ("lr", "learning_rate"), ("epochs", "epochs")):
        if getattr(args, flag) is not None:
            tcfg[key] = getattr(args, flag)
    seed = stage_seed(cfg["seed"], "train-kge")
    table = kge.train_transe(kg, kge.TransEConfig(seed=seed, **tcfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {"entities": out / "entities.vec", "relations": out / "relations.vec"}
    kge.save_embeddings(table, files["entities"], files["relations"])
    cfg["transe"] = tcfg
    return out, {"train-kge": seed}, {"triples": args.triples}, files


def cmd_eval_kge(args, cfg):
    kg = _kg(args)
    E = _embeddings(args, kg)
    held = kgstore.load_triples(_require(args.held_out, "held-out"))
    try:
        triples = [(kg.entities.id(h), kg.relations.id(r), kg.entities.id(t)) for h, r, t in held.named_triples()]
    except KeyError as exc:
        raise UsageError(f"held-out triple uses unknown name: {exc}") from None
    metrics = kge.link_prediction_eval(E, kg, triples, cfg["transe"]["norm"])
    _atomic_write_text(args.out, json.dumps(metrics, indent=1) + "\n")
    return Path(args.out), {}, {"triples": args.triples, "held_out": args.held_out}, {"metrics": args.out}


def cmd_mine_rules(args, cfg):
    kg = _kg(args)
    mcfg = dict(cfg["mining"])
    if args.max_len is not None:
        mcfg["max_len"] = args.max_len
    rules = rulemine.mine_rules(kg, jobs=args.jobs, **mcfg)
    rulemine.save_rules(rules, args.out, kg.relations)
    cfg["mining"] = mcfg
    log.info("event=mine-rules rules=%d", len(rules))
    return Path(args.out), {}, {"triples": args.triples}, {"rules": args.out}


def cmd_build_space(args, cfg):
    kg = _kg(args)
    split = kgstore.load_split(_require(args.split, "split"), kg.relations)
    kind = args.kind
    E = _embeddings(args, kg) if kind != "wd" else None
    rules = rulemine.load_rules(_require(args.rules, "rules"), kg.relations) if kind in ("rl", "rw", "kr") else []
    wv = semspace.load_word_vectors(_require(args.words, "words")) if kind in ("wd", "kw", "rw") else None
    combine = None
    if args.combine:
        combine = zeroshot.load_devise(_require(args.combine, "combine"))[2]
    lam = args.lam if args.lam is not None else cfg["space"]["lam"]
    spaces = build_spaces([kind], kg, split, E, rules, wv, cfg["seed"], cfg["space"]["rule_k"], lam, combine)
    semspace.save_space(spaces[kind], args.out, kg.relations)
    inputs = {"triples": args.triples, "split": args.split, "rules": args.rules if rules else None,
              "words": args.words if wv else None}
    if E is not None:
        inputs["entities"] = Path(args.embeddings) / "entities.vec"
        inputs["relations"] = Path(args.embeddings) / "relations.vec"
    return Path(args.out), {"combine": stage_seed(cfg["seed"], "combine")}, inputs, {"space": args.out}


def _encoder_cfg(args, cfg, section="encoder"):
    ecfg = dict(cfg["encoder"])
    for flag, key in (("kernel", "kernel"), ("pos_dim", "pos_dim"), ("channels", "channels"),
                      ("dropout", "dropout"), ("lr", "learning_rate"), ("epochs", "epochs")):
        if getattr(args, flag, None) is not None:
            ecfg[key] = getattr(args, flag)
    if "margin" in ecfg:
        log.warning("event=ignored key=encoder.margin reason=no_margin_loss_in_classifier")
        ecfg.pop("margin")
    cfg["encoder"] = ecfg
    return ecfg


def cmd_train_encoder(args, cfg):
    kg = _kg(args)
    split = kgstore.load_split(_require(args.split, "split"), kg.relations)
    train = encoder.load_instances(_require(args.train, "train"), kg.relations)
    wv = semspace.load_word_vectors(_require(args.words, "words"))
    seed = stage_seed(cfg["seed"], "train-encoder")
    ecfg = encoder.EncoderConfig(seed=seed, **_encoder_cfg(args, cfg))
    train = [i for i in train if i.label in split.seen]
    params = encoder.train_classifier(train, wv, ecfg, classes=sorted(split.seen))
    encoder.save_params(params, args.out, kg.relations, ecfg)
    return Path(args.out), {"train-encoder": seed}, \
        {"triples": args.triples, "split": args.split, "train": args.train, "words": args.words}, {"model": args.out}


def cmd_train_devise(args, cfg):
    kg = _kg(args)
    split = kgstore.load_split(_require(args.split, "split"), kg.relations)
    train = [i for i in encoder.load_instances(_require(args.train, "train"), kg.relations) if i.label in split.seen]
    wv = semspace.load_word_vectors(_require(args.words, "words"))
    dcfg = dict(cfg["devise"])
    if args.margin is not None:
        dcfg["margin"] = args.margin
    seed = stage_seed(cfg["seed"], "train-devise")
    enc = encoder.EncoderConfig(seed=seed, **_encoder_cfg(args, cfg))
    devcfg = zeroshot.DeviseConfig(seed=seed, encoder=enc, **dcfg)
    inputs = {"triples": args.triples, "split": args.split, "train": args.train, "words": args.words}
    if args.concat:
        a_path, b_path = args.concat
        A = semspace.load_space(_require(a_path, "concat"), kg.relations)
        B = semspace.load_space(_require(b_path, "concat"), kg.relations)
        common = A.coverage & B.coverage
        A, B = A.restrict(common), B.restrict(common)
        cp = semspace.init_combine_params(A.dim, B.dim, A.dim, stage_seed(cfg["seed"], "combine"),
                                          cfg["space"]["lam"])
        trunk, proj, comb = zeroshot.devise_train(train, wv, None, devcfg, combine=(A, B, cp))
        inputs.update(space_a=a_path, space_b=b_path)
    else:
        space = semspace.load_space(_require(args.space, "space"), kg.relations)
        trunk, proj, comb = zeroshot.devise_train(train, wv, space, devcfg)
        inputs["space"] = args.space
    zeroshot.save_devise(trunk, proj, comb, args.out, devcfg)
    cfg["devise"] = dcfg
    return Path(args.out), {"train-devise": seed}, inputs, {"model": args.out}


def cmd_predict(args, cfg):
    kg = _kg(args)
    split = kgstore.load_split(_require(args.split, "split"), kg.relations)
    test = [i for i in encoder.load_instances(_require(args.test, "test"), kg.relations) if i.label in split.unseen]
    if not test:
        raise UsageError("test file has no instance of an unseen relation")
    wv = semspace.load_word_vectors(_require(args.words, "words"))
    space = semspace.load_space(_require(args.space, "space"), kg.relations)
    pcfg = dict(cfg["predict"])
    for flag, key in (("top_t", "top_t"), ("sim", "sim")):
        if getattr(args, flag) is not None:
            pcfg[key] = getattr(args, flag)
    if args.renormalize:
        pcfg["renormalize"] = True
    cfg["predict"] = pcfg
    outputs = {"predictions": args.out}
    if args.projector == "conse":
        params = encoder.load_params(_require(args.model, "model"), kg.relations)
        preds, records = conse_predictions(test, wv, params, space, split.unseen, pcfg["top_t"], pcfg["sim"],
                                           pcfg["renormalize"])
        if args.records:
            with open(args.records, "w", encoding="utf-8") as fh:
                for i, (top, gold) in enumerate(records):
                    fh.write(json.dumps({"id": i, "gold": kg.relations.name(gold),
                                         "top": [[kg.relations.name(r), p] for r, p in top]}) + "\n")
            outputs["records"] = args.records
    else:
        trunk, proj, _ = zeroshot.load_devise(_require(args.model, "model"))
        preds = devise_predictions(test, wv, trunk, proj, space, split.unseen, pcfg["sim"])
    zeroshot.save_predictions(preds, args.out, kg.relations)
    return Path(args.out), {}, {"triples": args.triples, "split": args.split, "test": args.test,
                                "words": args.words, "space": args.space, "model": args.model}, outputs


def cmd_evaluate(args, cfg):
    kg = _kg(args)
    preds = zeroshot.load_predictions(_require(args.predictions, "predictions"), kg.relations)
    if not preds:
        raise UsageError(f"{args.predictions}: no predictions")
    metrics = zeroshot.metrics_to_json(zeroshot.evaluate(preds), kg.relations)
    _atomic_write_text(args.out, json.dumps(metrics, indent=1) + "\n")
    log.info("event=evaluate hit1=%.4f hit2=%.4f hit5=%.4f", *(metrics["hit"][k] for k in ("1", "2", "5")))
    return Path(args.out), {}, {"triples": args.triples, "predictions": args.predictions}, {"metrics": args.out}


def cmd_influence(args, cfg):
    kg = _kg(args)
    split = kgstore.load_split(_require(args.split, "split"), kg.relations)
    records = []
    with open(_require(args.records, "records"), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(([(kg.relations.id(r), float(p)) for r, p in d["top"]], kg.relations.id(d["gold"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise UsageError(f"{args.records}:{lineno}: bad record ({exc})") from None
    M = zeroshot.influence_matrix(records, split.seen, split.unseen, args.renormalize)
    zeroshot.save_influence(M, split.seen, split.unseen, args.out, kg.relations)
    return Path(args.out), {}, {"triples": args.triples, "split": args.split, "records": args.records}, \
        {"matrix": args.out}


def cmd_split_relations(args, cfg):
    """Cluster relation labels and apply the threshold split."""
    kg = _kg(args)
    counts = {r: 0 for r in range(kg.n_relations)}
    for inst in encoder.load_instances(_require(args.instances, "instances"), kg.relations):
        counts[inst.label] += 1
    wv = semspace.load_word_vectors(_require(args.words, "words"))
    space = semspace.build_space_wd(wv, kg.relations)
    ids = sorted(space.coverage)
    labels = synth.cluster_relations(space.matrix(ids), args.clusters, cfg["seed"])
    assign = {r: int(c) for r, c in zip(ids, labels)}
    for r in range(kg.n_relations):
        assign.setdefault(r, -1 - r)   # uncovered labels form singleton clusters
    split = kgstore.split_relations(kg, counts, assign, args.seen_threshold, args.drop_threshold)
    kgstore.save_split(split, kg.relations, args.out)
    return Path(args.out), {"kmeans": cfg["seed"]}, {"triples": args.triples, "instances": args.instances,
                                                    "words": args.words}, {"split": args.out}


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zsrel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"zsrel {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, e.g. transe.epochs=50")
    common.add_argument("--seed", type=int, help="top-level seed (default: 0)")
    common.add_argument("--jobs", type=int, default=1, help="intra-command parallelism (default: 1)")
    common.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-synth", cmd_gen_synth, "generate a synthetic planted-rule corpus")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("train-kge", cmd_train_kge, "train TransE embeddings")
    sp.add_argument("--triples", required=True)
    sp.add_argument("--out", required=True, help="output directory for entities.vec / relations.vec")
    sp.add_argument("--dim", type=int, help="embedding size (default: 100)")
    sp.add_argument("--margin", type=float, help="hinge margin (default: 1.0)")
    sp.add_argument("--lr", type=float, help="learning rate (default: 0.01)")
    sp.add_argument("--epochs", type=int, help="epochs (default: 100)")

    sp = add("eval-kge", cmd_eval_kge, "filtered link-prediction sanity check")
    sp.add_argument("--triples", required=True)
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--held-out", required=True)
    sp.add_argument("--out", required=True)

    sp = add("mine-rules", cmd_mine_rules, "mine Horn rules of length <= 2")
    sp.add_argument("--triples", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-len", type=int, choices=[1, 2], help="max rule body length (default: 2)")

    sp = add("build-space", cmd_build_space, "build one relation semantic space")
    sp.add_argument("--kind", required=True, choices=list(semspace.KINDS))
    sp.add_argument("--triples", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--embeddings")
    sp.add_argument("--rules")
    sp.add_argument("--words")
    sp.add_argument("--combine", help="DeViSE checkpoint whose trained W2/b2 define kw/rw")
    sp.add_argument("--lam", type=float, help="kr mixing weight (default: 0.5)")
    sp.add_argument("--out", required=True)

    for name, func, help_ in (("train-encoder", cmd_train_encoder, "train the PCNN classifier for ConSE"),
                              ("train-devise", cmd_train_devise, "train PCNN + DeViSE projection")):
        sp = add(name, func, help_)
        sp.add_argument("--triples", required=True)
        sp.add_argument("--split", required=True)
        sp.add_argument("--train", required=True)
        sp.add_argument("--words", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--kernel", type=int, help="convolution width (default: 3)")
        sp.add_argument("--pos-dim", type=int, help="position embedding size (default: 5)")
        sp.add_argument("--channels", type=int, help="number of filters (default: 250)")
        sp.add_argument("--dropout", type=float, help="dropout rate (default: 0.5)")
        sp.add_argument("--lr", type=float, help="learning rate (default: 0.01)")
        sp.add_argument("--epochs", type=int, help="epochs (default: 15 encoder, 10 devise)")
        if name == "train-devise":
            sp.add_argument("--space", help="semantic space file")
            sp.add_argument("--concat", nargs=2, metavar=("SPACE_A", "SPACE_B"),
                            help="train W2/b2 jointly over [A; B] (kw: kg wd, rw: rl wd)")
            sp.add_argument("--margin", type=float, help="ranking margin (default: 1.0)")

    sp = add("predict", cmd_predict, "rank unseen relations for test sentences")
    sp.add_argument("--projector", required=True, choices=["conse", "devise"])
    sp.add_argument("--sim", choices=["cosine", "euclidean"], help="similarity (default: cosine)")
    sp.add_argument("--top-t", type=int, help="ConSE top-T seen classes (default: 3)")
    sp.add_argument("--renormalize", action="store_true", help="renormalise ConSE weights over the top T")
    sp.add_argument("--triples", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--words", required=True)
    sp.add_argument("--space", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--records", help="also write ConSE top-T records (JSON lines)")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "Hit@K and per-relation F1")
    sp.add_argument("--triples", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--out", required=True)

    sp = add("influence", cmd_influence, "seen x unseen influence matrix from ConSE records")
    sp.add_argument("--triples", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--records", required=True)
    sp.add_argument("--renormalize", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("split-relations", cmd_split_relations, "cluster labels and threshold-split relations")
    sp.add_argument("--triples", required=True)
    sp.add_argument("--instances", required=True)
    sp.add_argument("--words", required=True)
    sp.add_argument("--clusters", type=int, default=10)
    sp.add_argument("--seen-threshold", type=int, default=1200)
    sp.add_argument("--drop-threshold", type=int, default=500)
    sp.add_argument("--out", required=True)
    return p


def _setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KVFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level.upper()))
    logging.captureWarnings(True)


_RUNTIME_ERRORS = (kge.DivergenceError, encoder.DivergenceError, zeroshot.DivergenceError, kge.SaturationError)


def main(argv=None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg["seed"] = args.seed
        primary, seeds, inputs, outputs = args.func(args, cfg)
        seeds = {"top": cfg["seed"], **seeds}
        manifest = write_manifest(primary, args.command, cfg, seeds, inputs, outputs, started)
        log.info("event=done command=%s manifest=%s", args.command, manifest)
        return 0
    except _RUNTIME_ERRORS as exc:
        log.error("event=runtime-failure error=%s", json.dumps(str(exc)))
        return 2
    except (UsageError, ValueError, KeyError, FileNotFoundError, synth.ConfigError) as exc:
        log.error("event=validation-error error=%s", json.dumps(str(exc)))
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("event=runtime-failure error=%s", json.dumps(str(exc)))
        return 2


if __name__ == "__main__":
    sys.exit(main())
