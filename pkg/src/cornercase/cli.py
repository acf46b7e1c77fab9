"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors (bad flags, bad configuration),
2 on runtime failures (unreadable data, training divergence, corrupt files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import augmentation as aug
from .config import RunConfig, load_config_file
from .datasets import load_dataset
from .exceptions import CornerCaseError, UsageError
from .generator import load_corpus, run_campaign, write_corpus
from .manifest import hash_arrays, hash_path, read_manifest, write_manifest
from .model_zoo import ModelEnsemble, train_ensemble
from .sweeps import SweepReport, sweep_lambda, sweep_seeds, sweep_threshold

log = logging.getLogger("cornercase")

COMMANDS = ("train", "generate", "sweep-lambda", "sweep-threshold", "sweep-seeds", "augment-retrain", "report")

# settings a command uses unless the config file or a flag says otherwise
COMMAND_DEFAULTS = {
    "augment-retrain": {"deviating_policy": "round_robin", "seeds": 150},
    "sweep-lambda": {"seeds": 20},
}

_COMMON = [
    ("--dataset", "dataset name (builtin_synthetic) or path"),
    ("--format", "idx, image_dir_csv or builtin_synthetic"),
    ("--data-seed", "seed of the builtin dataset generator"),
    ("--models", "three comma-separated variants, e.g. lenet1,lenet4,lenet5"),
    ("--model-dir", "load a trained ensemble instead of training one"),
    ("--epochs", "training epochs"),
    ("--learning-rate", "training learning rate"),
    ("--lambda1", "weight of the deviating model's confidence"),
    ("--lambda2", "weight of the neuron-coverage term"),
    ("--step", "ascent step size (default depends on the constraint)"),
    ("--threshold", "neuron activation threshold t"),
    ("--max-iters", "ascent iterations per seed"),
    ("--constraint", "light, contrast, affine, blur, occl_rect, occl_dots or overlay[:mask]"),
    ("--deviating-policy", "least_confident or round_robin"),
    ("--neuron-model", "index of the model whose neurons are targeted"),
    ("--dots", "dot count for occl_dots"),
    ("--dot-color", "black or white"),
    ("--seeds", "number of test images used as seeds"),
    ("--workers", "worker processes"),
    ("--rng-seed", "master random seed"),
    ("--out", "output directory"),
]

_EXTRA = {
    "sweep-lambda": [("--lambda1-grid", "comma-separated lambda1 values"),
                     ("--lambda2-grid", "comma-separated lambda2 values"),
                     ("--repetitions", "timing repetitions per cell")],
    "sweep-threshold": [("--threshold-grid", "comma-separated thresholds")],
    "sweep-seeds": [("--seed-grid", "comma-separated seed counts")],
    "augment-retrain": [("--corpus", "existing corpus directory (generated when omitted)"),
                        ("--control", "none, random_original, random_transform or both"),
                        ("--retrain-epochs", "fine-tuning epochs"),
                        ("--retrain-lr", "fine-tuning learning rate")],
}


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        print(f"\nerror: {message}", file=sys.stderr)
        raise _Usage(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cornercase", description="Differential corner-case generation for small image classifiers.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", default=None, help="flat key = value settings file")
        if name != "report":
            p.add_argument("--from-manifest", default=None, help="re-run exactly the configuration in this manifest")
            for flag, text in _COMMON + _EXTRA.get(name, []):
                p.add_argument(flag, default=argparse.SUPPRESS, help=text)
        else:
            p.add_argument("--out", default=argparse.SUPPRESS, help="run directory to summarise")
        p.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    return parser


_HELP = {
    "train": "train the three-model ensemble",
    "generate": "run a corner-case campaign and write the corpus",
    "sweep-lambda": "runtime to first corner case over a lambda1 x lambda2 grid",
    "sweep-threshold": "neuron coverage over a grid of thresholds",
    "sweep-seeds": "neuron coverage over a grid of seed counts",
    "augment-retrain": "retrain on corner cases and compare with control augmentations",
    "report": "print the reports of a run directory",
}

_CONTROL_FLAGS = {"command", "config", "from_manifest", "quiet"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then command defaults, then the config file, then flags."""
    cfg = RunConfig().updated(COMMAND_DEFAULTS.get(args.command, {}))
    if args.config:
        cfg = cfg.updated(load_config_file(args.config))
    flags = {k: v for k, v in vars(args).items() if k not in _CONTROL_FLAGS}
    return cfg.updated(flags)


# -- shared pipeline pieces ----------------------------------------------------


def _load_data(cfg: RunConfig):
    train, test = load_dataset(cfg.dataset, cfg.format, cfg.data_seed)
    if cfg.format == "builtin_synthetic":
        digest = {f"builtin:{cfg.dataset}:{cfg.data_seed}": hash_arrays(*train, *test)}
    else:
        digest = {f"dataset/{k}": v for k, v in hash_path(cfg.dataset).items()}
    return train, test, digest


def _ensemble(cfg: RunConfig, train, test):
    if cfg.model_dir:
        ens = ModelEnsemble.load(cfg.model_dir)
        return ens, None, {f"models/{k}": v for k, v in hash_path(cfg.model_dir).items()}
    log.info("training %s", ", ".join(cfg.models))
    ens, report = train_ensemble(train, test, cfg.training())
    return ens, report, {}


def _seed_order(cfg: RunConfig, n_test: int) -> np.ndarray:
    return np.random.default_rng(cfg.rng_seed).permutation(n_test)


def _pick_seeds(cfg: RunConfig, test, count: int | None = None):
    X, y = test
    count = cfg.seeds if count is None else count
    if count < 0 or count > len(X):
        raise UsageError(f"asked for {count} seeds but the test split has {len(X)} images")
    ids = _seed_order(cfg, len(X))[:count]
    return (X[ids], y[ids]), [int(i) for i in ids]


def _write_json(path: Path, body) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _write_sweep(out: Path, name: str, report: SweepReport) -> None:
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / f"{name}.json").write_text(report.to_json() + "\n")
    (out / "reports" / f"{name}.csv").write_text(report.to_csv())


def _report_hash(out: Path, name: str) -> dict:
    return {f"reports/{k}": v for k, v in hash_path(out / "reports" / name).items()}


def _campaign_summary(result) -> dict:
    return {
        "stats": result.stats.to_dict(),
        "coverage": [m.report() for m in result.coverage_maps],
    }


# -- commands ------------------------------------------------------------------


def cmd_train(cfg: RunConfig, out: Path):
    train, test, inputs = _load_data(cfg)
    ens, report = train_ensemble(train, test, cfg.training())
    ens.save(out / "models")
    _write_json(out / "reports" / "train.json", report.to_dict())
    for name, acc in zip(report.names, report.test_accuracy):
        print(f"{name:<8} test accuracy {100 * acc:.1f}%")
    return inputs, hash_path(out / "models")


def cmd_generate(cfg: RunConfig, out: Path):
    train, test, inputs = _load_data(cfg)
    ens, _, model_inputs = _ensemble(cfg, train, test)
    seeds, ids = _pick_seeds(cfg, test)
    result = run_campaign(ens, seeds, cfg.generation(), ids, cfg.workers)
    write_corpus(result.corpus, out / "corpus")
    _write_json(out / "reports" / "campaign.json", _campaign_summary(result))
    s = result.stats
    conv = "n/a" if s.conversion is None else f"{100 * s.conversion:.1f}%"
    print(f"{s.n_cases} corner cases from {s.n_seeds} seeds (conversion {conv}), coverage {100 * s.coverage:.1f}%")
    return {**inputs, **model_inputs}, {f"corpus/{k}": v for k, v in hash_path(out / "corpus").items()}


def cmd_sweep_lambda(cfg: RunConfig, out: Path):
    train, test, inputs = _load_data(cfg)
    ens, _, model_inputs = _ensemble(cfg, train, test)
    seeds, ids = _pick_seeds(cfg, test)
    report = sweep_lambda(ens, seeds, cfg.generation(), cfg.lambda1_grid, cfg.lambda2_grid, cfg.repetitions, ids)
    _write_sweep(out, "sweep_lambda", report)
    print(report.table())
    return {**inputs, **model_inputs}, {}


def cmd_sweep_threshold(cfg: RunConfig, out: Path):
    train, test, inputs = _load_data(cfg)
    ens, _, model_inputs = _ensemble(cfg, train, test)
    seeds, ids = _pick_seeds(cfg, test)
    report = sweep_threshold(ens, seeds, cfg.generation(), cfg.threshold_grid, ids, cfg.workers)
    _write_sweep(out, "sweep_threshold", report)
    print(report.table())
    return {**inputs, **model_inputs}, _report_hash(out, "sweep_threshold.csv")


def cmd_sweep_seeds(cfg: RunConfig, out: Path):
    train, test, inputs = _load_data(cfg)
    ens, _, model_inputs = _ensemble(cfg, train, test)
    if not cfg.seed_grid:
        raise UsageError("seed grid must be non-empty")
    pool, ids = _pick_seeds(cfg, test, max(cfg.seed_grid))
    report = sweep_seeds(ens, pool, cfg.generation(), cfg.seed_grid, ids, cfg.workers)
    _write_sweep(out, "sweep_seeds", report)
    print(report.table())
    return {**inputs, **model_inputs}, _report_hash(out, "sweep_seeds.csv")


def cmd_augment_retrain(cfg: RunConfig, out: Path):
    if cfg.control not in ("none", "random_original", "random_transform", "both"):
        raise UsageError(f"unknown control {cfg.control!r}")
    train, test, inputs = _load_data(cfg)
    ens, _, model_inputs = _ensemble(cfg, train, test)
    inputs = {**inputs, **model_inputs}
    Xt, yt = test
    if cfg.corpus:
        records, _ = load_corpus(cfg.corpus)
        cases = aug.build_augmented(cfg.corpus, yt)
        used = sorted({int(r["seed_id"]) for r in records})
        inputs.update({f"corpus/{k}": v for k, v in hash_path(cfg.corpus).items()})
    else:
        seeds, used = _pick_seeds(cfg, test)
        result = run_campaign(ens, seeds, cfg.generation(), used, cfg.workers)
        write_corpus(result.corpus, out / "corpus")
        _write_json(out / "reports" / "campaign.json", _campaign_summary(result))
        cases = aug.build_augmented(result.corpus, yt, image_shape=ens.input_shape)
    if len(cases) == 0:
        raise UsageError("the corpus is empty; nothing to retrain on")
    rng = np.random.default_rng([cfg.rng_seed, 1])
    sets = [("corner_cases", cases)]
    if cfg.control in ("random_original", "both"):
        sets.append(("random_original", aug.build_control("random_original", len(cases), test, rng, exclude=used)))
    if cfg.control in ("random_transform", "both"):
        sets.append(("random_transform", aug.build_control("random_transform", len(cases), train, rng)))
    # seeds and control-1 picks were seen in training by some strategy; score all on the rest
    seen = set(used)
    for name, s in sets:
        if name == "random_original":
            seen.update(s.source_ids)
    keep = np.array([i for i in range(len(Xt)) if i not in seen], dtype=np.int64)
    held_out = (Xt[keep], yt[keep])
    reports = []
    for name, s in sets:
        _, rep = aug.retrain_and_eval(
            ens, train, s, held_out, cfg.retrain_epochs, eval_set=cases,
            learning_rate=cfg.retrain_lr, rng_seed=cfg.rng_seed, strategy=name,
        )
        reports.append(rep)
    table = aug.format_table(reports)
    _write_json(out / "reports" / "retrain.json", {
        "n_cases": len(cases), "held_out_test": int(len(keep)),
        "strategies": [r.to_dict() for r in reports],
    })
    (out / "reports" / "retrain.txt").write_text(table + "\n")
    print(table)
    return inputs, {}


def cmd_report(out: Path) -> int:
    reports = out / "reports"
    files = sorted(reports.glob("*.json")) if reports.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no reports under {reports}")
    for f in files:
        body = json.loads(f.read_text())
        print(f"== {f.name}")
        if f.stem.startswith("sweep_"):
            print(SweepReport.from_dict(body).table())
        elif f.stem == "retrain":
            print((reports / "retrain.txt").read_text().rstrip())
        elif f.stem == "campaign":
            s = body["stats"]
            print(f"seeds {s['n_seeds']}  cases {s['n_cases']}  conversion {s['conversion']}  coverage {s['coverage']:.4f}")
        elif f.stem == "train":
            for m in body["models"]:
                print(f"{m['name']:<8} test accuracy {100 * m['test_accuracy']:.1f}%")
        else:
            print(json.dumps(body, indent=2))
    return 0


_RUNNERS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "sweep-lambda": cmd_sweep_lambda,
    "sweep-threshold": cmd_sweep_threshold,
    "sweep-seeds": cmd_sweep_seeds,
    "augment-retrain": cmd_augment_retrain,
}


def _from_manifest(args) -> RunConfig:
    body = read_manifest(args.from_manifest)
    if body["command"] != args.command:
        raise UsageError(f"manifest was written by {body['command']!r}, not {args.command!r}")
    cfg = RunConfig.from_dict(body["config"])
    overrides = {k: v for k, v in vars(args).items() if k in ("out", "workers")}
    return cfg.updated(overrides), body["inputs"]


def _absolute_paths(cfg: RunConfig) -> RunConfig:
    # manifests must stay valid when replayed from another working directory
    paths = {k: str(Path(getattr(cfg, k)).resolve()) for k in ("model_dir", "corpus") if getattr(cfg, k)}
    if cfg.format != "builtin_synthetic":
        paths["dataset"] = str(Path(cfg.dataset).resolve())
    return cfg.updated(paths)


def run(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return 1
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "report":
        return cmd_report(Path(getattr(args, "out", RunConfig.out)))
    expected = None
    if args.from_manifest:
        cfg, expected = _from_manifest(args)
    else:
        cfg = resolve_config(args)
    cfg = _absolute_paths(cfg)
    cfg.generation()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    inputs, outputs = _RUNNERS[args.command](cfg, out)
    if expected is not None and expected != inputs:
        changed = sorted(k for k in set(expected) | set(inputs) if expected.get(k) != inputs.get(k))
        raise ManifestMismatch(f"inputs differ from the manifest: {', '.join(changed)}")
    write_manifest(out, args.command, cfg.to_dict(), inputs, outputs)
    log.info("%s finished in %.1f s; outputs in %s", args.command, time.perf_counter() - start, out)
    return 0


class ManifestMismatch(CornerCaseError):
    pass


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return run(argv)
    except _Usage:
        return 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CornerCaseError, OSError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
