"""Command-line driver: generate data and bags, train, sweep lambda, plot, evaluate.

Config files are INI style (``[data]``, ``[train]``, ``[sweep]`` sections,
``#`` comments). Flags override file values, which override defaults.

Exit codes: 0 ok, 1 runtime or I/O problem, 2 config error, 3 divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import math
import os
import sys
import time

import numpy as np

from . import llp_data, model as model_mod, ot_core, pipeline
from .pseudo_label import export_blocks

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

DATA_DEFAULTS = {
    "dataset": "two_moons",
    "n": 2000,
    "test_n": 1000,
    "noise": 0.1,
    "num_classes": 3,
    "dim": 2,
    "spread": 1.0,
    "path": "",
    "test_path": "",
    "label_column": "label",
    "bag_size": 50,
}
DATASETS = ("two_moons", "blobs", "csv")
# test sets are drawn from the same generator under a shifted seed
TEST_SEED_OFFSET = 1000

RUN_DEFAULTS = {"label_noise": 0.0, "checkpoint_every": 0}
SWEEP_DEFAULTS = {"lambdas": "1e-6,1,5,25,125", "instances": 20, "rows": 4, "cols": 6, "mass_units": 12}

TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(pipeline.TrainConfig)}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class CliConfig:
    data: dict
    train: pipeline.TrainConfig
    run: dict
    sweep: dict
    seed: int

    def as_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        train["hidden"] = list(self.train.hidden)
        return {"seed": self.seed, "data": dict(self.data), "train": train, "run": dict(self.run), "sweep": dict(self.sweep)}


def _coerce(raw: str, like, key):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def read_config_file(path) -> dict:
    """Parse an INI file into ``{section: {key: raw string}}``; unknown names are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known = {
        "data": set(DATA_DEFAULTS),
        "train": set(TRAIN_FIELDS) | set(RUN_DEFAULTS),
        "sweep": set(SWEEP_DEFAULTS),
    }
    unknown = []
    for section in parser.sections():
        if section not in known:
            unknown.append(f"[{section}]")
            continue
        unknown += [f"{section}.{k}" for k in parser[section] if k not in known[section]]
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    return {s: dict(parser[s]) for s in parser.sections()}


def resolve_config(args) -> CliConfig:
    """Merge defaults, the config file and flags, then validate everything up front."""
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    data = dict(DATA_DEFAULTS)
    for k, v in raw.get("data", {}).items():
        data[k] = _coerce(v, DATA_DEFAULTS[k], f"data.{k}")
    train_kwargs, run = {}, dict(RUN_DEFAULTS)
    for k, v in raw.get("train", {}).items():
        if k in RUN_DEFAULTS:
            run[k] = _coerce(v, RUN_DEFAULTS[k], f"train.{k}")
        else:
            train_kwargs[k] = _coerce(v, TRAIN_FIELDS[k].default, f"train.{k}")
    sweep = dict(SWEEP_DEFAULTS)
    for k, v in raw.get("sweep", {}).items():
        sweep[k] = v if k == "lambdas" else _coerce(v, SWEEP_DEFAULTS[k], f"sweep.{k}")

    flag = lambda name: getattr(args, name, None)  # noqa: E731
    if flag("seed") is not None:
        train_kwargs["seed"] = args.seed
    if flag("bag_size") is not None:
        data["bag_size"] = args.bag_size
    if flag("lam") is not None:
        if len(args.lam) > 1 and args.command != "sweep-lambda":
            raise ConfigError("--lambda may be given only once outside sweep-lambda")
        if len(args.lam) == 1:
            train_kwargs["lam"] = args.lam[0]
        sweep["lambdas"] = ",".join(repr(v) for v in args.lam)
    if flag("ot_mode") is not None:
        train_kwargs["ot_mode"] = args.ot_mode.replace("-", "_")
    if flag("loss") is not None:
        train_kwargs["loss_mode"] = args.loss
    if flag("mixup") is not None:
        train_kwargs["use_mixup"] = args.mixup == "on"
    if flag("stage1_epochs") is not None:
        train_kwargs["stage1_epochs"] = args.stage1_epochs
    if flag("stage2_epochs") is not None:
        train_kwargs["stage2_epochs"] = args.stage2_epochs

    try:
        train = pipeline.TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    problems = []
    if data["dataset"] not in DATASETS:
        problems.append(f"data.dataset must be one of {DATASETS}")
    if data["dataset"] == "csv" and not data["path"]:
        problems.append("data.path is required for dataset = csv")
    if data["dataset"] != "csv":
        if data["n"] < 2:
            problems.append("data.n must be >= 2")
        elif not 1 <= data["bag_size"] <= data["n"]:
            problems.append(f"data.bag_size must be in [1, n={data['n']}], got {data['bag_size']}")
    elif data["bag_size"] < 1:
        problems.append("data.bag_size must be >= 1")
    if data["noise"] < 0 or data["spread"] < 0:
        problems.append("data.noise and data.spread must be >= 0")
    if not 0 <= run["label_noise"] <= 1:
        problems.append("train.label_noise must lie in [0, 1]")
    if run["checkpoint_every"] < 0:
        problems.append("train.checkpoint_every must be >= 0")
    try:
        lambdas = parse_lambdas(sweep["lambdas"])
    except ConfigError as exc:
        problems.append(str(exc))
        lambdas = []
    if min(sweep["instances"], sweep["rows"], sweep["cols"], sweep["mass_units"]) < 1:
        problems.append("sweep sizes must be >= 1")
    if problems:
        raise ConfigError("; ".join(problems))
    sweep["lambdas"] = lambdas
    return CliConfig(data=data, train=train, run=run, sweep=sweep, seed=train.seed)


def parse_lambdas(text) -> list:
    if isinstance(text, (list, tuple)):
        values = [float(v) for v in text]
    else:
        try:
            values = [float(v) for v in str(text).replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"sweep.lambdas: cannot parse {text!r}") from None
    if any(not v > 0 or not math.isfinite(v) for v in values):
        raise ConfigError("sweep.lambdas must all be positive and finite")
    return values


def build_datasets(cfg: CliConfig):
    """Training and test datasets named by the ``[data]`` section."""
    d, seed = cfg.data, cfg.seed
    if d["dataset"] == "two_moons":
        train = llp_data.two_moons(d["n"], d["noise"], seed)
        test = llp_data.two_moons(d["test_n"], d["noise"], seed + TEST_SEED_OFFSET) if d["test_n"] > 0 else None
    elif d["dataset"] == "blobs":
        # the same center seed for both splits, so they share one distribution
        train = llp_data.gaussian_blobs(d["n"], d["num_classes"], d["dim"], d["spread"], seed)
        test = None
        if d["test_n"] > 0:
            full = llp_data.gaussian_blobs(d["n"] + d["test_n"], d["num_classes"], d["dim"], d["spread"], seed)
            train = llp_data.LabeledDataset(full.features[: d["n"]], full.labels[: d["n"]], full.num_classes)
            test = llp_data.LabeledDataset(full.features[d["n"] :], full.labels[d["n"] :], full.num_classes)
    else:
        train, mapping = llp_data.load_csv(d["path"], d["label_column"])
        test = None
        if d["test_path"]:
            test, test_map = llp_data.load_csv(d["test_path"], d["label_column"])
            unseen = sorted(set(test_map) - set(mapping))
            if unseen:
                raise ConfigError(f"test labels not present in the training data: {unseen}")
            # both files index labels by first appearance; express test labels in the training indices
            remap = np.empty(len(test_map), dtype=int)
            for name, idx in test_map.items():
                remap[idx] = mapping[name]
            test = llp_data.LabeledDataset(test.features, remap[test.labels], train.num_classes)
        if d["bag_size"] > len(train):
            raise ConfigError(f"data.bag_size must be in [1, n={len(train)}], got {d['bag_size']}")
    return train, test


def _jsonable(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _append_log(out, line) -> None:
    # wall-clock provenance goes here, never into the CSV/JSON artifacts
    with open(os.path.join(out, "run.log"), "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    train, test = build_datasets(cfg)
    llp = llp_data.make_bags(train, cfg.data["bag_size"], cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    llp_data.save_csv(train, os.path.join(args.out, "train.csv"))
    if test is not None:
        llp_data.save_csv(test, os.path.join(args.out, "test.csv"))
    llp_data.save_partition(llp, os.path.join(args.out, "bags.csv"))
    props = np.stack([b.proportions for b in llp.bags])
    dropped = len(train) - sum(b.size for b in llp.bags)
    print(f"bags: {llp.num_bags} of size {cfg.data['bag_size']} ({dropped} instances dropped)")
    print("class  mean_prop  min_prop  max_prop")
    for k in range(llp.num_classes):
        col = props[:, k]
        print(f"{k:5d}  {col.mean():9.4f}  {col.min():8.4f}  {col.max():8.4f}")
    return EXIT_OK


def _checkpoint_hook(out, every):
    if every <= 0:
        return None

    def hook(stage, epoch, model):
        if epoch % every == 0:
            model_mod.save_checkpoint(model, os.path.join(out, f"model_{stage}_{epoch:04d}.ckpt"))

    return hook


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    train, test = build_datasets(cfg)
    llp = llp_data.make_bags(train, cfg.data["bag_size"], cfg.seed)
    out = args.out
    os.makedirs(out, exist_ok=True)
    llp_data.save_csv(train, os.path.join(out, "train.csv"))
    if test is not None:
        llp_data.save_csv(test, os.path.join(out, "test.csv"))
    llp_data.save_partition(llp, os.path.join(out, "bags.csv"))

    t0 = time.perf_counter()
    model, metrics, summary = pipeline.run_two_stage(
        llp, cfg.train, test, cfg.run["label_noise"], _checkpoint_hook(out, cfg.run["checkpoint_every"])
    )
    metrics.write_csv(os.path.join(out, "metrics.csv"))
    model_mod.save_checkpoint(model, os.path.join(out, "model.ckpt"))
    if metrics.final_labels is not None:
        export_blocks(metrics.final_labels, [b.instance_indices for b in llp.bags], os.path.join(out, "pseudo_labels.csv"))
    summary["resolved_config"] = cfg.as_dict()
    del summary["config"]
    write_json(summary, os.path.join(out, "summary.json"))
    _append_log(out, f"train seed={cfg.seed} wall_time_s={time.perf_counter() - t0:.3f}")

    s1, s2 = summary["stage1"], summary["stage2"]
    print(f"stage1 test accuracy: {s1['test_accuracy']:.4f}")
    if not s2["skipped"]:
        print(f"stage2 test accuracy: {s2['test_accuracy']:.4f} (converged: {s2['converged']})")
    print(f"wrote {out}")
    return EXIT_OK


def ot_suite(count: int, rows: int, cols: int, units: int, seed: int):
    """Seeded random instances with masses in multiples of ``1/units``."""
    rng = np.random.default_rng(seed)
    suite = []
    for _ in range(count):
        a = _positive_multinomial(rng, units, rows)
        b = _positive_multinomial(rng, units, cols)
        suite.append((rng.random((rows, cols)), a, b))
    return suite


def _positive_multinomial(rng, units, size):
    if units < size:
        return rng.multinomial(units, np.full(size, 1.0 / size)) / units
    # one unit per support point first, so no zero-mass rows
    return (1 + rng.multinomial(units - size, np.full(size, 1.0 / size))) / units


def sweep_gaps(lambdas, suite) -> list:
    """Mean ``<Q_lam, C> - exact cost`` over the suite, per lambda."""
    exact = [ot_core.exact_ot(C, a, b)[1] for C, a, b in suite]
    gaps = []
    for lam in lambdas:
        cfg = ot_core.SinkhornConfig(lam=lam)
        diffs = [ot_core.transport_cost(ot_core.sinkhorn(C, a, b, cfg).plan, C) - e for (C, a, b), e in zip(suite, exact)]
        gaps.append(float(np.mean(diffs)))
    return gaps


def cmd_sweep_lambda(args) -> int:
    cfg = resolve_config(args)
    lambdas = cfg.sweep["lambdas"]
    if not lambdas:
        raise ConfigError("the lambda list is empty")
    sw = cfg.sweep
    suite = ot_suite(sw["instances"], sw["rows"], sw["cols"], sw["mass_units"], cfg.seed)
    gaps = sweep_gaps(lambdas, suite)
    train, test = build_datasets(cfg)
    llp = llp_data.make_bags(train, cfg.data["bag_size"], cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "mean_ot_gap", "final_accuracy"])
        for lam, gap in zip(lambdas, gaps):
            tcfg = dataclasses.replace(cfg.train, lam=lam)
            model, _, _ = pipeline.run_two_stage(llp, tcfg, test, cfg.run["label_noise"])
            acc = pipeline.evaluate(model, test if test is not None else train).accuracy
            w.writerow([repr(lam), repr(gap), repr(acc)])
            print(f"lambda={lam:g} mean_gap={gap:.6g} final_accuracy={acc:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def load_labeled(path, num_classes=None):
    """Read a CSV written by this tool, keeping integer labels as they were saved."""
    data, mapping = llp_data.load_csv(path)
    try:
        original = {idx: int(name) for name, idx in mapping.items()}
    except ValueError:
        return data
    labels = np.array([original[i] for i in data.labels], dtype=int)
    if labels.min() < 0:
        return data
    K = max(int(labels.max()) + 1, num_classes or 0)
    return llp_data.LabeledDataset(data.features, labels, K)


def _load_run_data(run_dir, name):
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        return None
    return load_labeled(path)


def cmd_plot(args) -> int:
    from . import plotting

    metrics_path = os.path.join(args.run_dir, "metrics.csv")
    if not os.path.exists(metrics_path):
        print(f"error: metrics file not found: {metrics_path}", file=sys.stderr)
        return EXIT_RUNTIME
    out = args.out or args.run_dir
    os.makedirs(out, exist_ok=True)
    metrics = pipeline.read_metrics_csv(metrics_path)
    curves = os.path.join(out, "accuracy_curves.svg")
    plotting.plot_accuracy_curves(metrics.records, curves)
    print(f"wrote {curves}")

    ckpt = os.path.join(args.run_dir, "model.ckpt")
    data = _load_run_data(args.run_dir, "train.csv")
    if not os.path.exists(ckpt) or data is None:
        print(f"error: decision regions need {ckpt} and train.csv in the run directory", file=sys.stderr)
        return EXIT_RUNTIME
    model = model_mod.load_checkpoint(ckpt)
    boundary = os.path.join(out, "decision_regions.svg")
    try:
        plotting.plot_decision_regions(model, data.features, boundary)
    except plotting.NotTwoDimensionalError as exc:
        print(f"error: {exc}; accuracy curves were still written", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {boundary}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = args.checkpoint or os.path.join(args.run_dir, "model.ckpt")
    data_path = args.data or os.path.join(args.run_dir, "test.csv")
    for p in (ckpt, data_path):
        if not os.path.exists(p):
            print(f"error: file not found: {p}", file=sys.stderr)
            return EXIT_RUNTIME
    model = model_mod.load_checkpoint(ckpt)
    data = load_labeled(data_path, model.num_classes)
    res = pipeline.evaluate(model, data)
    print(f"accuracy: {res.accuracy:.4f}")
    for k, acc in enumerate(res.per_class):
        print(f"class {k}: {acc:.4f}")
    print("confusion (rows = true, cols = predicted):")
    for row in res.confusion:
        print(" ".join(f"{v:6d}" for v in row))
    if args.run_dir:
        write_json(
            {"data": data_path, "accuracy": res.accuracy, "per_class": res.per_class.tolist(), "confusion": res.confusion.tolist()},
            os.path.join(args.run_dir, "evaluation.json"),
        )
    return EXIT_OK


def _add_common(p, out_default="run"):
    p.add_argument("--config", help="INI config file with [data], [train] and [sweep] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--bag-size", type=int, dest="bag_size")


def _add_train_flags(p):
    p.add_argument("--lambda", type=float, dest="lam", action="append", help="entropic inverse regularization")
    p.add_argument("--ot-mode", choices=("soft", "hard", "hard-exact", "none"), dest="ot_mode")
    p.add_argument("--loss", choices=pipeline.LOSS_MODES)
    p.add_argument("--mixup", choices=("on", "off"))
    p.add_argument("--stage1-epochs", type=int, dest="stage1_epochs")
    p.add_argument("--stage2-epochs", type=int, dest="stage2_epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plotllp", description="Label-proportion learning with OT pseudo-labels.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a dataset CSV and its bag partition")
    _add_common(p, "data")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run stage 1 and stage 2, write metrics, summary and checkpoint")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-lambda", help="OT gap and accuracy for a list of lambda values")
    _add_common(p, "sweep")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("plot", help="accuracy curves and decision regions as SVG")
    p.add_argument("run_dir")
    p.add_argument("--out", help="directory for the SVGs (default: the run directory)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("evaluate", help="accuracy, per-class accuracy and confusion of a checkpoint")
    p.add_argument("run_dir", nargs="?", default="")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="labeled CSV (default: test.csv in the run directory)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.TrainingDivergedError, ot_core.NumericalError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
