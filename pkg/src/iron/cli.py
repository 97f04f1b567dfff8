"""Command-line entry point: gen-data, train, predict, benchmark, export-landscape.

Configuration comes from an optional JSON file whose sections mirror the
library config types. Any field can be overridden with ``--section.field
value`` (values are parsed as JSON, falling back to plain strings). Seeds left
unset inherit the master seed (``--seed``, then the config's ``seed``, then
``IRON_SEED``, then 0).

Exit codes: 0 success, 2 configuration error, 3 file format error, 4 runtime
or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .baselines import AnnealConfig, GAConfig, PatternConfig, PSOConfig
from .errors import BoundaryError, ConfigError, FormatError, IronError
from .evaluation import (
    ALL_METHODS,
    BenchmarkConfig,
    EvalConfig,
    PerfectStub,
    format_summary,
    run_benchmark,
    write_summary_csv,
)
from .geometry import CameraModel
from .landscape import GridSpec, check_center, load_tensor, save_tensor
from .network import init_model, load_model, predict_optimum, save_model
from .similarity import KernelConfig, ObjectiveConfig
from .synth import SuiteConfig, build_dataset, scene_suite, scene_tensor
from .trainer import TrainConfig, evaluate_split, load_dataset, save_dataset, split_dataset, train, write_loss_csv

log = logging.getLogger("iron")

BENCH_SEED_OFFSET = 100_000


@dataclass(frozen=True)
class DatasetConfig:
    centers_per_scene: int = 50

    def __post_init__(self):
        if int(self.centers_per_scene) != self.centers_per_scene or self.centers_per_scene < 1:
            raise ConfigError(f"centers_per_scene must be an integer >= 1, got {self.centers_per_scene}")


@dataclass(frozen=True)
class BenchSuiteConfig(SuiteConfig):
    scenes: int = 5


# section name -> config type; ``seed`` fields set to None inherit the master seed
SECTIONS = {
    "camera": CameraModel,
    "grid": GridSpec,
    "kernel": KernelConfig,
    "objective": ObjectiveConfig,
    "suite": SuiteConfig,
    "dataset": DatasetConfig,
    "train": TrainConfig,
    "anneal": AnnealConfig,
    "ga": GAConfig,
    "ps": PatternConfig,
    "pso": PSOConfig,
    "eval": EvalConfig,
    "benchmark": BenchmarkConfig,
    "bench_suite": BenchSuiteConfig,
}
TOP_LEVEL = {"seed", "output_dir", "threads"}


@dataclass(frozen=True)
class RunConfig:
    sections: dict
    seed: int
    output_dir: Path
    threads: int

    def __getattr__(self, name):
        try:
            return self.sections[name]
        except KeyError:
            raise AttributeError(name) from None

    def to_dict(self) -> dict:
        """Everything that determines results; thread count and output
        location are left out so artifacts do not depend on them."""
        out = {name: asdict(cfg) for name, cfg in self.sections.items()}
        out.update(seed=self.seed)
        return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> dict:
    """``['--grid.nodes', '21', '--seed', '3']`` -> ``{'grid.nodes': 21, 'seed': 3}``."""
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            try:
                val = next(it)
            except StopIteration:
                raise ConfigError(f"override {tok} needs a value") from None
        out[key.replace("-", "_")] = _parse_value(val)
    return out


def _build_section(name, cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown field(s) {', '.join(f'{name}.{k}' for k in unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] invalid value: {exc}") from exc


def _as_int(name, value, minimum):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """Merge file, overrides and seed fallbacks; validate every section."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for key, value in overrides.items():
        section, dot, fld = key.partition(".")
        if not dot:
            if key not in TOP_LEVEL:
                raise ConfigError(f"unknown option --{key}")
            raw[key] = value
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in --{key}")
        raw.setdefault(section, {})[fld] = value
    unknown = sorted(set(raw) - set(SECTIONS) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config section(s) {unknown}")

    seed = raw.get("seed")
    if seed is None:
        seed = os.environ.get("IRON_SEED", 0)
        try:
            seed = int(seed)
        except ValueError:
            raise ConfigError(f"IRON_SEED must be an integer, got {seed!r}") from None
    seed = _as_int("seed", seed, 0)
    threads = _as_int("threads", raw.get("threads", 1), 1)

    sections = {}
    for name, cls in SECTIONS.items():
        values = dict(raw.get(name) or {})
        if not isinstance(values, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        if "seed" in {f.name for f in fields(cls)} and values.get("seed") is None:
            values["seed"] = seed + (BENCH_SEED_OFFSET if name == "bench_suite" else 0)
        sections[name] = _build_section(name, cls, values)
    return RunConfig(sections, seed, Path(raw.get("output_dir", ".")), threads)


def _progress(label):
    def report(index, total):
        print(f"{label} {index + 1}/{total}", file=sys.stderr, flush=True)
    return report


def _out_path(cfg: RunConfig, given, default_name) -> Path:
    return Path(given) if given else cfg.output_dir / default_name


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {p} does not exist")
    return p


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _out_path(cfg, args.out, "dataset.irnd")
    manifest_path = out.with_suffix(".manifest.json")
    specs = scene_suite(cfg.suite, cfg.grid)
    samples, manifest = build_dataset(specs, cfg.dataset.centers_per_scene, cfg.grid, cfg.camera, cfg.kernel,
                                      cfg.objective, cfg.threads, progress=_progress("scene"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(samples, out)
    doc = manifest.to_dict()
    doc["run_config"] = cfg.to_dict()
    _write_json(manifest_path, doc)
    stats = manifest.label_stats
    print(f"samples: {manifest.sample_count}")
    print(f"label mean: {stats['mean']}")
    print(f"label std: {stats['std']}")
    print(f"label min: {stats['min']}")
    print(f"label max: {stats['max']}")
    print(f"dataset: {out}")
    print(f"manifest: {manifest_path}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    data_path = _require_file(args.dataset, "dataset")
    x, y = load_dataset(data_path)
    tcfg = cfg.train
    (xt, yt), (xv, yv) = split_dataset(x, y, tcfg.val_fraction, tcfg.seed)
    if len(xt) < tcfg.batch_size:
        raise ConfigError(f"training split has {len(xt)} samples, fewer than batch_size {tcfg.batch_size}")
    model_path = _out_path(cfg, args.model_out, "model.irnw")
    loss_path = model_path.with_suffix(".loss.csv")
    model = init_model(tcfg.seed)

    def on_epoch(epoch, loss):
        print(f"epoch {epoch + 1}/{tcfg.epochs} loss {loss:.6g}", file=sys.stderr, flush=True)

    model, history = train(model, (xt, yt), tcfg, on_epoch)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_path)
    write_loss_csv(history, loss_path)
    train_loss, train_acc = evaluate_split(model, (xt, yt))
    print(f"final epoch loss: {history[-1]:.6g}")
    print(f"train loss: {train_loss:.6g}  train ParamAcc: {train_acc:.4f}")
    if len(xv):
        val_loss, val_acc = evaluate_split(model, (xv, yv))
        print(f"validation loss: {val_loss:.6g}  validation ParamAcc: {val_acc:.4f}")
    print(f"model: {model_path}")
    print(f"loss log: {loss_path}")
    return 0


def _parse_center(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"center must be three comma-separated integers, got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"center must be three comma-separated integers, got {text!r}")
    return parts


def cmd_predict(cfg: RunConfig, args) -> int:
    center = _parse_center(args.center)
    tensor = load_tensor(_require_file(args.tensor, "tensor"))
    try:
        check_center(center, tensor.grid.nodes)
    except BoundaryError as exc:
        raise ConfigError(f"--center: {exc}") from None
    if args.stub_perfect:
        model = PerfectStub().bind(tensor, center)
    elif args.model:
        model = load_model(_require_file(args.model, "model"))
    else:
        raise ConfigError("predict needs --model or --stub-perfect")
    params, normalized, count = predict_optimum(model, tensor, center)
    start = tensor.grid.node_params(center)
    print(f"initialization index: {list(center)}")
    print(f"initialization params (m): {start.tolist()}")
    print(f"predicted offset (normalized): {normalized.tolist()}")
    print(f"predicted offset (m): {(params - start).tolist()}")
    print(f"estimated optimum (m): {params.tolist()}")
    print(f"estimated optimum index: {list(tensor.grid.nearest_node(params))}")
    print(f"evaluations: {count}")
    return 0


def cmd_benchmark(cfg: RunConfig, args) -> int:
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip()) if args.methods \
        else cfg.benchmark.methods
    bench = _build_section("benchmark", BenchmarkConfig,
                           {**asdict(cfg.benchmark), "methods": methods})
    model = None
    if "iron" in bench.methods:
        if args.stub_perfect:
            model = PerfectStub()
        elif args.model:
            model = load_model(_require_file(args.model, "model"))
        else:
            raise ConfigError("method 'iron' needs --model or --stub-perfect")
    out = _out_path(cfg, args.out, "benchmark.json")
    csv_path = out.with_suffix(".csv")
    specs = scene_suite(cfg.bench_suite, cfg.grid)
    heuristics = {name: cfg.sections[name] for name in ("anneal", "ga", "ps", "pso")}
    report = run_benchmark(specs, bench, model, cfg.grid, cfg.camera, cfg.kernel, cfg.objective,
                           heuristics, cfg.eval, cfg.threads, progress=_progress("scene"))
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["run_config"] = cfg.to_dict()
    _write_json(out, doc)
    write_summary_csv(report, csv_path)
    print(format_summary(report))
    print(f"report: {out}")
    print(f"summary: {csv_path}")
    return 0


def cmd_export_landscape(cfg: RunConfig, args) -> int:
    seed = cfg.seed if args.scene_seed is None else args.scene_seed
    suite = _build_section("suite", SuiteConfig, {**asdict(cfg.suite), "scenes": 1, "seed": seed})
    (spec,) = scene_suite(suite, cfg.grid)
    out = _out_path(cfg, args.out, "landscape.irnt")
    _, tensor = scene_tensor(spec, cfg.grid, cfg.camera, cfg.kernel, cfg.objective, cfg.threads)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(tensor, out)
    print(f"scene seed: {seed}")
    print(f"true pose: {spec.true_pose.translation.tolist()}")
    print(f"tensor: {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "export-landscape": cmd_export_landscape,
}

# convenience flags -> dot paths
SHORTCUTS = {"scenes": "suite.scenes", "centers": "dataset.centers_per_scene", "epochs": "train.epochs"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iron", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug output to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="master seed (default: config, then IRON_SEED, then 0)")
        p.add_argument("--threads", type=int, help="worker threads for tensor builds and benchmark scenes")
        p.add_argument("--output-dir", help="directory for default output paths")
        return p

    p = common(sub.add_parser("gen-data", help="generate a training dataset"))
    p.add_argument("--scenes", type=int, help="number of scenes (suite.scenes)")
    p.add_argument("--centers", type=int, help="centers per scene (dataset.centers_per_scene)")
    p.add_argument("--out", help="dataset path (default OUTPUT_DIR/dataset.irnd)")

    p = common(sub.add_parser("train", help="train a model on a dataset"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, help="training epochs (train.epochs)")
    p.add_argument("--model-out", help="weights path (default OUTPUT_DIR/model.irnw)")

    p = common(sub.add_parser("predict", help="one-shot prediction from an initialization node"))
    p.add_argument("--tensor", required=True)
    p.add_argument("--center", required=True, help="0-based grid index i,j,k")
    p.add_argument("--model")
    p.add_argument("--stub-perfect", action="store_true", help="use the exact-label oracle instead of a model")

    p = common(sub.add_parser("benchmark", help="compare IRON with the heuristic baselines"))
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(ALL_METHODS)}")
    p.add_argument("--model")
    p.add_argument("--stub-perfect", action="store_true", help="use the exact-label oracle instead of a model")
    p.add_argument("--out", help="report path (default OUTPUT_DIR/benchmark.json)")

    p = common(sub.add_parser("export-landscape", help="write one scene's similarity tensor"))
    p.add_argument("--scene-seed", type=int, help="scene seed (default: master seed)")
    p.add_argument("--out", help="tensor path (default OUTPUT_DIR/landscape.irnt)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(extra)
        for flag, path in SHORTCUTS.items():
            if getattr(args, flag, None) is not None:
                overrides[path] = getattr(args, flag)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.threads is not None:
            overrides["threads"] = args.threads
        if args.output_dir is not None:
            overrides["output_dir"] = args.output_dir
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3
    except (IronError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
