"""Command-line experiment runner.

    modelab gen-data --config exp.cfg --out runs/data
    modelab train --stage extractor --config exp.cfg --out runs/ex
    modelab train --stage gan --config exp.cfg --out runs/gan
    modelab eval --config exp.cfg --out runs/eval --generator runs/gan/generator.mlab
    modelab ablate --config exp.cfg --out runs/ablate --seeds 5

Every command writes ``manifest-<command>.json`` next to its outputs. The
manifest holds the canonical config text, its hash, the seeds and the
content hashes of inputs and outputs; passing it back as ``--config``
re-runs the command with byte-identical CSV outputs.
"""
import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, config_to_text, parse_config
from .data import dataset_to_csv, oracle_for
from .errors import (CheckpointFormatError, ConfigError, IoError, MissingCheckpoint,
                     ModelabError)
from .experiment import evaluate, identity_features, make_splits, synthesis_plan, synthesize
from .models import ConditionalGenerator, FeatureExtractor, load_mlp, save_mlp
from .plotting import write_svg
from .training import train_extractor, train_gan

MANIFEST_VERSION = 1
LOW_CONFIDENCE_SEEDS = 3
CELLS = (("cdp", "at"), ("nocdp", "at"), ("cdp", "triplet"), ("nocdp", "triplet"))
_LOSS = {"at": "adversarial_triplet", "triplet": "triplet"}


# --- files and manifests ----------------------------------------------------------------

def _sha1(path):
    with open(path, "rb") as fh:
        return hashlib.sha1(fh.read()).hexdigest()


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    return out


def write_manifest(out, command, cfg, args, inputs, outputs):
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "args": args,
        "config": config_to_text(cfg),
        "config_hash": config_hash(cfg),
        "seeds": args.get("seeds_list", [cfg.seed]),
        "inputs": {str(p): _sha1(p) for p in inputs},
        "outputs": {name: _sha1(out / name) for name in outputs},
    }
    path = out / f"manifest-{command}.json"
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a valid manifest ({exc})") from exc
    cfg = parse_config(manifest.get("config", ""))
    if config_hash(cfg) != manifest.get("config_hash"):
        raise ConfigError(f"{path}: config does not match its recorded hash")
    return manifest, cfg


def load_run_config(path):
    """Config from a ``key = value`` file or a manifest; defaults when ``path`` is None."""
    if path is None:
        return ExperimentConfig(), {}
    if str(path).endswith(".json"):
        manifest, cfg = read_manifest(path)
        return cfg, manifest.get("args", {})
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return parse_config(text), {}


# --- model io ----------------------------------------------------------------------------

def _require(path, what):
    if not path:
        raise MissingCheckpoint(f"no {what} checkpoint configured")
    if not Path(path).is_file():
        raise MissingCheckpoint(f"{what} checkpoint {path} does not exist")
    return path


def load_extractor(cfg, path):
    mlp = load_mlp(_require(path, "extractor"))
    if mlp.in_dim != cfg.data.dim or mlp.out_dim != cfg.model.embedding_dim:
        raise CheckpointFormatError(f"{path}: extractor dims {mlp.layer_dims} do not fit the config")
    ex = FeatureExtractor(cfg.data.dim, cfg.model.embedding_dim, mlp.layer_dims[1:-1])
    ex.net = mlp.freeze()
    return ex


def load_generator(cfg, path):
    mlp = load_mlp(_require(path, "generator"))
    if mlp.in_dim != cfg.data.dim + cfg.data.K or mlp.out_dim != cfg.data.dim:
        raise CheckpointFormatError(f"{path}: generator dims {mlp.layer_dims} do not fit the config")
    g = ConditionalGenerator(cfg.data.dim, cfg.data.K, mlp.layer_dims[1:-1])
    g.net = mlp
    return g


# --- commands ------------------------------------------------------------------------------

def cmd_gen_data(cfg, out):
    dataset, train, test = make_splits(cfg)
    names = {"dataset.csv": dataset, "train.csv": train, "test.csv": test}
    for name, ds in names.items():
        _write_text(out / name, dataset_to_csv(ds))
    write_manifest(out, "gen-data", cfg, {}, [], list(names))
    return len(dataset)


def _train_extractor_into(cfg, out):
    _, train, _ = make_splits(cfg)
    extractor, trace = train_extractor(cfg, train)
    save_mlp(out / "extractor.mlab", extractor.net)
    _write_text(out / "extractor_trace.csv", trace.to_csv(cfg.trace_wall_time))
    return extractor


def cmd_train(cfg, out, stage):
    if stage == "extractor":
        _train_extractor_into(cfg, out)
        write_manifest(out, "train-extractor", cfg, {"stage": stage}, [],
                       ["extractor.mlab", "extractor_trace.csv"])
        return
    ex_path = cfg.gan.extractor_checkpoint
    extractor = load_extractor(cfg, ex_path)
    _, train, _ = make_splits(cfg)
    result = train_gan(cfg, train, extractor)
    outputs = ["generator.mlab", "image_discriminator.mlab", "gan_trace.csv"]
    save_mlp(out / "generator.mlab", result.generator.net)
    save_mlp(out / "image_discriminator.mlab", result.image_disc)
    for i, member in enumerate(result.pool.members):
        save_mlp(out / f"pool_{i}.mlab", member)
        outputs.append(f"pool_{i}.mlab")
    _write_text(out / "gan_trace.csv", result.trace.to_csv(cfg.trace_wall_time))
    write_manifest(out, "train-gan", cfg, {"stage": stage}, [ex_path], outputs)


def cmd_eval(cfg, out):
    ex_path, gen_path = cfg.gan.extractor_checkpoint, cfg.eval.generator_checkpoint
    extractor = load_extractor(cfg, ex_path)
    generator = load_generator(cfg, gen_path)
    _, _, test = make_splits(cfg)
    report = evaluate(cfg, extractor, generator, test)
    _write_text(out / "metrics.csv", report.to_csv())
    _write_text(out / "metrics.txt", report.to_text())

    oracle = oracle_for(cfg.data.spec())
    src, targets = synthesis_plan(test, cfg.data.K, cfg.eval.targets)
    synth = synthesize(generator, test.features[src], targets)
    write_svg(out / "samples.svg",
              [(test.features, oracle.classify(test.features), "ring"),
               (synth, oracle.classify(synth), "dot")],
              "real (rings) and synthesized (dots) by oracle category")
    theta = identity_features(extractor, test.features)
    emb = theta * extractor.features(test.features)[0].data
    labels = test.identity if len(np.unique(test.identity)) >= 2 else test.category
    write_svg(out / "embedding.svg", [(emb, labels, "dot")], "extractor embedding by identity")
    write_manifest(out, "eval", cfg, {}, [ex_path, gen_path],
                   ["metrics.csv", "metrics.txt", "samples.svg", "embedding.svg"])
    return report


# --- ablation grid ---------------------------------------------------------------------------

def cell_config(cfg, seed, pool, loss):
    return cfg.replace(**{"seed": seed, "gan.use_cdp": pool == "cdp",
                          "extractor.at_loss": _LOSS[loss], "gan.at_loss": _LOSS[loss],
                          "gan.extractor_checkpoint": "", "eval.generator_checkpoint": ""})


def _is_complete(out, command, cfg):
    path = out / f"manifest-{command}.json"
    if not path.is_file():
        return False
    try:
        manifest, _ = read_manifest(path)
    except ModelabError:
        return False
    if manifest.get("config_hash") != config_hash(cfg):
        return False
    return all((out / name).is_file() and _sha1(out / name) == digest
               for name, digest in manifest.get("outputs", {}).items())


def _run_seed_loss(job):
    """Train (or reuse) one extractor, then run both pool variants on it."""
    cfg, root, seed, loss = job
    root = Path(root)
    ex_cfg = cell_config(cfg, seed, "cdp", loss)
    ex_dir = _out_dir(root / "extractors" / f"{loss}-seed{seed}")
    if _is_complete(ex_dir, "train-extractor", ex_cfg):
        extractor = load_extractor(ex_cfg, ex_dir / "extractor.mlab")
    else:
        extractor = _train_extractor_into(ex_cfg, ex_dir)
        write_manifest(ex_dir, "train-extractor", ex_cfg, {"stage": "extractor"}, [],
                       ["extractor.mlab", "extractor_trace.csv"])
    for pool in ("cdp", "nocdp"):
        c_cfg = cell_config(cfg, seed, pool, loss)
        c_dir = _out_dir(root / "cells" / f"{pool}-{loss}" / f"seed{seed}")
        if _is_complete(c_dir, "cell", c_cfg):
            continue
        _, train, test = make_splits(c_cfg)
        result = train_gan(c_cfg, train, extractor)
        report = evaluate(c_cfg, extractor, result.generator, test)
        _write_text(c_dir / "gan_trace.csv", result.trace.to_csv(c_cfg.trace_wall_time))
        _write_text(c_dir / "metrics.csv", report.to_csv())
        write_manifest(c_dir, "cell", c_cfg, {}, [ex_dir / "extractor.mlab"],
                       ["gan_trace.csv", "metrics.csv"])
    return seed, loss


def _read_metrics(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return dict(zip(lines[0].split(","), (float(v) for v in lines[1].split(","))))


def _median(rows, key):
    vals = [r[key] for r in rows if not np.isnan(r[key])]
    return float(np.median(vals)) if vals else float("nan")


def thread_cap():
    raw = os.environ.get("MODELAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MODELAB_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("MODELAB_THREADS must be at least 1")
    return n


def ablation_verdicts(medians, n_seeds, single_identity):
    """The four ordering checks on per-cell medians."""
    conf = "low" if n_seeds < LOW_CONFIDENCE_SEEDS else "ok"
    checks = [
        ("mode_collapse_kl", "cdp-at", "nocdp-at", "kl_mode_collapse", "<"),
        ("synthesis_accuracy", "cdp-at", "nocdp-at", "mean_category_accuracy", ">"),
        ("identity_permanence", "cdp-at", "cdp-triplet", "verification_accuracy", ">="),
        ("intra_class_variance", "cdp-at", "cdp-triplet", "intra_class_variance", "<"),
    ]
    rows = []
    for name, lhs, rhs, key, op in checks:
        a, b = medians[lhs][key], medians[rhs][key]
        if single_identity and name in ("identity_permanence", "intra_class_variance"):
            verdict = "n/a"
        elif np.isnan(a) or np.isnan(b):
            verdict = "n/a"
        else:
            ok = {"<": a < b, ">": a > b, ">=": a >= b}[op]
            verdict = "pass" if ok else "fail"
        rows.append((name, lhs, op, rhs, key, a, b, verdict, conf))
    return rows


def cmd_ablate(cfg, out, n_seeds):
    if n_seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    seeds = [cfg.seed + i for i in range(n_seeds)]
    jobs = [(cfg, str(out), s, loss) for s in seeds for loss in ("at", "triplet")]
    workers = min(thread_cap(), len(jobs))
    if workers == 1:
        for job in jobs:
            _run_seed_loss(job)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_seed_loss, jobs))

    medians = {}
    table = ["cell,n_seeds,kl_mode_collapse,mean_category_accuracy,min_category_accuracy,"
             "intra_class_variance,verification_accuracy,frechet_distance,classifier_score,"
             "mode_coverage"]
    for pool, loss in CELLS:
        name = f"{pool}-{loss}"
        rows = []
        for s in seeds:
            r = _read_metrics(out / "cells" / name / f"seed{s}" / "metrics.csv")
            accs = [v for k, v in r.items() if k.startswith("category_accuracy_")]
            r["mean_category_accuracy"] = float(np.mean(accs))
            r["min_category_accuracy"] = float(np.min(accs))
            rows.append(r)
        keys = table[0].split(",")[2:]
        medians[name] = {k: _median(rows, k) for k in keys}
        table.append(",".join([name, str(n_seeds)] + [repr(medians[name][k]) for k in keys]))
    _write_text(out / "ablation.csv", "\n".join(table) + "\n")

    single = cfg.data.kind == "mixture"
    verdicts = ablation_verdicts(medians, n_seeds, single)
    lines = ["check,lhs,op,rhs,metric,lhs_median,rhs_median,verdict,confidence"]
    for name, lhs, op, rhs, key, a, b, verdict, conf in verdicts:
        lines.append(f"{name},{lhs},{op},{rhs},{key},{a!r},{b!r},{verdict},{conf}")
    _write_text(out / "verdicts.csv", "\n".join(lines) + "\n")
    write_manifest(out, "ablate", cfg, {"seeds": n_seeds, "seeds_list": seeds}, [],
                   ["ablation.csv", "verdicts.csv"])
    return medians, verdicts


# --- entry point --------------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="modelab", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file or manifest-*.json to re-run")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")

    common(sub.add_parser("gen-data", help="write the dataset and its split as CSV"))
    p = sub.add_parser("train", help="train the extractor or the conditional GAN")
    common(p)
    p.add_argument("--stage", choices=("extractor", "gan"))
    p.add_argument("--extractor", help="extractor checkpoint (gan stage)")
    p = sub.add_parser("eval", help="metrics and plots for trained checkpoints")
    common(p)
    p.add_argument("--extractor", help="extractor checkpoint")
    p.add_argument("--generator", help="generator checkpoint")
    p = sub.add_parser("ablate", help="{CDP, w/o CDP} x {AT, Triplet} over several seeds")
    common(p)
    p.add_argument("--seeds", type=int, help="number of seeds (default 5)")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg, recorded = load_run_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "extractor", None):
        overrides["gan.extractor_checkpoint"] = args.extractor
    if getattr(args, "generator", None):
        overrides["eval.generator_checkpoint"] = args.generator
    if overrides:
        cfg = cfg.replace(**overrides)
    cfg.validate()
    out = _out_dir(args.out)

    if args.command == "gen-data":
        n = cmd_gen_data(cfg, out)
        print(f"wrote {n} samples to {out}")
    elif args.command == "train":
        stage = args.stage or recorded.get("stage")
        if stage not in ("extractor", "gan"):
            raise ConfigError("--stage extractor|gan is required")
        cmd_train(cfg, out, stage)
        print(f"trained {stage} into {out}")
    elif args.command == "eval":
        print(cmd_eval(cfg, out).to_text(), end="")
    else:
        n_seeds = args.seeds if args.seeds is not None else recorded.get("seeds", 5)
        _, verdicts = cmd_ablate(cfg, out, n_seeds)
        for name, lhs, op, rhs, key, a, b, verdict, conf in verdicts:
            print(f"{verdict:4s} {name}: {lhs} {a:.4g} {op} {rhs} {b:.4g} ({conf} confidence)")
    return 0


def main(argv=None):
    try:
        return run(argv)
    except ModelabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
