"""Command-line entry points: generate-data, train, segment, forecast.

Each command reads one JSON experiment config. Values are resolved as
command-line flag > config file > built-in default; ``--set section.key=value``
overrides any key. Every command writes ``manifest_<command>.json`` (resolved config,
seed, code version) next to its outputs.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from . import forecasting as fc
from . import segmentation as seg
from .datasets import (
    ThreeModeSystem,
    TimeSeriesRecord,
    gen_bee_standin,
    gen_bouncing_ball,
    gen_three_mode,
    load_jsonl,
    preprocess_bees,
    write_jsonl,
)
from .learning import AnnealSchedule, NumericError, TrainConfig, load_params, train
from .model import ModelConfig, RedSDS
from .substrate import load_checkpoint

log = logging.getLogger("redsds")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

GENERATORS = ("bouncing_ball", "three_mode", "bees_standin")
DEFAULT_COUNTS = {"bouncing_ball": (100000, 1000, 100), "three_mode": (10000, 500, 180), "bees_standin": (8, 4, 400)}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class DataConfig:
    generator: str = "bouncing_ball"
    n_train: Optional[int] = None  # None: generator default
    n_test: Optional[int] = None
    length: Optional[int] = None
    seed: int = 0
    trend: float = 0.0
    train_path: Optional[str] = None  # default <output_dir>/train.jsonl
    test_path: Optional[str] = None


@dataclass
class ForecastConfig:
    horizon: int = 50
    num_paths: int = 100
    levels: list = field(default_factory=lambda: list(fc.DEFAULT_LEVELS))


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "run"
    task: str = "segment"  # "segment" | "forecast"
    normalization: Optional[str] = None  # None | "standardization" | "scaling"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tau_z: AnnealSchedule = field(default_factory=lambda: AnnealSchedule(anneal=False))
    tau_rho: AnnealSchedule = field(default_factory=lambda: AnnealSchedule(anneal=False))
    forecast: ForecastConfig = field(default_factory=ForecastConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["emission_hidden"] = list(self.model.emission_hidden)
        return d


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "tau_z": AnnealSchedule,
    "tau_rho": AnnealSchedule,
    "forecast": ForecastConfig,
}


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def build_config(raw: dict) -> ExperimentConfig:
    """Validate a nested dict against the documented key set; unknown keys are usage errors."""
    top = _field_names(ExperimentConfig)
    unknown = sorted(set(raw) - top)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise UsageError(f"config section {key!r} must be a mapping")
            cls = SECTIONS[key]
            bad = sorted(set(value) - _field_names(cls))
            if bad:
                raise UsageError(f"unknown keys in section {key!r}: {bad}")
            if key in ("tau_z", "tau_rho") and "anneal" not in value:
                value = {**value, "anneal": False}
            try:
                kwargs[key] = cls(**value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid section {key!r}: {exc}") from exc
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    if cfg.task not in ("segment", "forecast"):
        raise UsageError(f"task must be 'segment' or 'forecast', got {cfg.task!r}")
    if cfg.normalization not in (None, "standardization", "scaling"):
        raise UsageError(f"unknown normalization {cfg.normalization!r}")
    if cfg.data.generator not in GENERATORS:
        raise UsageError(f"unknown generator {cfg.data.generator!r}; choose from {list(GENERATORS)}")
    return cfg


def _set_path(d: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict = {}
    if args.config is not None:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{args.config}: top level must be an object")
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(raw, key, _parse_value(value))
    for flag, dotted in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            _set_path(raw, dotted, value)
    return build_config(raw)


FLAG_KEYS = {
    "seed": "seed",
    "out": "output_dir",
    "generator": "data.generator",
    "n_train": "data.n_train",
    "n_test": "data.n_test",
    "length": "data.length",
    "data_seed": "data.seed",
    "train_path": "data.train_path",
    "test_path": "data.test_path",
    "steps": "train.steps",
    "horizon": "forecast.horizon",
    "num_paths": "forecast.num_paths",
}


def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, extra: Optional[dict] = None) -> None:
    manifest = {"command": command, "seed": cfg.seed, "git": git_describe(), "config": cfg.to_dict()}
    if extra:
        manifest.update(extra)
    with open(out / f"manifest_{command.replace('-', '_')}.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands


def cmd_generate_data(cfg: ExperimentConfig) -> dict:
    d = cfg.data
    n_train, n_test, length = DEFAULT_COUNTS[d.generator]
    n_train = d.n_train if d.n_train is not None else n_train
    n_test = d.n_test if d.n_test is not None else n_test
    length = d.length if d.length is not None else length
    if d.generator == "bouncing_ball":
        train_set = gen_bouncing_ball(n_train, T=length, seed=d.seed)
        test_set = gen_bouncing_ball(n_test, T=length, seed=d.seed + 1)
    elif d.generator == "three_mode":
        system = ThreeModeSystem.draw(np.random.default_rng([d.seed, 0]))
        train_set = gen_three_mode(n_train, T=length, seed=d.seed, system=system, trend=d.trend)
        test_set = gen_three_mode(n_test, T=length, seed=d.seed + 1, system=system, trend=d.trend)
    else:
        train_set = preprocess_bees(gen_bee_standin(n_train, T=length, seed=d.seed))
        test_set = preprocess_bees(gen_bee_standin(n_test, T=length, seed=d.seed + 1))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_path = Path(d.train_path) if d.train_path else out / "train.jsonl"
    test_path = Path(d.test_path) if d.test_path else out / "test.jsonl"
    write_jsonl(train_set, train_path)
    write_jsonl(test_set, test_path)
    write_manifest(out, "generate-data", cfg, {"n_train": len(train_set), "n_test": len(test_set)})
    return {"train": str(train_path), "test": str(test_path)}


def _load(path: Path) -> list[TimeSeriesRecord]:
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    try:
        records = load_jsonl(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not records:
        raise DataError(f"{path}: no series")
    return records


def _data_path(cfg: ExperimentConfig, which: str) -> Path:
    explicit = getattr(cfg.data, f"{which}_path")
    return Path(explicit) if explicit else Path(cfg.output_dir) / f"{which}.jsonl"


def _normalized(records: list[TimeSeriesRecord], method: Optional[str]) -> list[TimeSeriesRecord]:
    if method is None:
        return records
    out = []
    for r in records:
        try:
            ns = fc.normalize(r.target, method, series_id=r.id)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        out.append(dataclasses.replace(r, target=ns.values, norm=ns.metadata()))
    return out


def _model(cfg: ExperimentConfig, records: list[TimeSeriesRecord]) -> RedSDS:
    obs_dim = records[0].target.shape[1]
    if obs_dim != cfg.model.obs_dim:
        raise DataError(f"data has {obs_dim} observed dims but model.obs_dim = {cfg.model.obs_dim}")
    return RedSDS(cfg.model, seed=cfg.seed)


def cmd_train(cfg: ExperimentConfig, resume: Optional[str] = None) -> Path:
    records = _normalized(_load(_data_path(cfg, "train")), cfg.normalization)
    model = _model(cfg, records)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    if resume is None:
        # a fresh run starts a fresh log
        (out / "metrics.tsv").unlink(missing_ok=True)
    train(
        model,
        records,
        tcfg,
        cfg.tau_z,
        cfg.tau_rho,
        out_dir=out,
        resume=resume,
        use_log_det=cfg.normalization is not None,
    )
    write_manifest(out, "train", cfg, {"resume": resume})
    return out / "checkpoint.bin"


def _trained_model(cfg: ExperimentConfig, checkpoint: str, records) -> RedSDS:
    model = _model(cfg, records)
    try:
        load_params(model, load_checkpoint(checkpoint))
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {checkpoint}") from exc
    except ValueError as exc:
        raise DataError(f"{checkpoint}: {exc}") from exc
    # evaluation always runs at the target temperature
    model.set_temperatures(cfg.tau_z.minimum, cfg.tau_rho.minimum)
    return model


@torch.no_grad()
def cmd_segment(cfg: ExperimentConfig, checkpoint: str) -> dict:
    records = _normalized(_load(_data_path(cfg, "test")), cfg.normalization)
    model = _trained_model(cfg, checkpoint, records)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    preds = seg.posterior_labels(model, records)
    seg.write_labels(preds, out / "labels.txt")
    rows = []
    for r, p in zip(records, preds):
        if r.labels is not None:
            s = seg.score(p, r.labels)
            rows.append((r.id, s["accuracy"], s["nmi"], s["ari"]))
    result = {}
    if rows:
        seg.write_metrics_table(rows, out / "segmentation_metrics.tsv")
        truth = np.concatenate([r.labels for r in records if r.labels is not None])
        pred = np.concatenate([p for r, p in zip(records, preds) if r.labels is not None])
        result = seg.score(pred, truth)
        with open(out / "segmentation_summary.json", "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    write_manifest(out, "segment", cfg, {"checkpoint": str(checkpoint)})
    return result


def cmd_forecast(cfg: ExperimentConfig, checkpoint: str) -> dict:
    """Hold out the last ``horizon`` steps of each test series and forecast them."""
    records = _load(_data_path(cfg, "test"))
    H = cfg.forecast.horizon
    if H < 0:
        raise UsageError("forecast.horizon must be >= 0")
    model = _trained_model(cfg, checkpoint, records)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    items, rows, naive_rows = [], [], []
    for i, r in enumerate(records):
        T = len(r.target) - H
        if T < 1:
            raise DataError(f"series {r.id}: length {len(r.target)} leaves no context for horizon {H}")
        context, truth = r.target[:T], r.target[T:]
        norm = None
        if cfg.normalization is not None:
            try:
                norm = fc.normalize(context, cfg.normalization, series_id=r.id)
            except ValueError as exc:
                raise DataError(str(exc)) from exc
            context = norm.values
        try:
            res = fc.forecast_unroll(
                model,
                context,
                H,
                num_paths=cfg.forecast.num_paths,
                seed=[cfg.seed, i],
                controls=r.controls,
                norm=norm,
            )
        except ValueError as exc:
            raise DataError(f"series {r.id}: {exc}") from exc
        items.append((r.id, res))
        if H > 0:
            rows.append((r.id, fc.series_crps(res.samples, truth, cfg.forecast.levels)))
            naive = fc.persistence_forecast(r.target[:T], H)
            naive_rows.append((r.id, fc.series_crps(naive, truth, cfg.forecast.levels)))
    fc.write_forecasts(items, out / "forecasts.jsonl", cfg.forecast.levels)
    fc.write_crps_table(rows, out / "crps.tsv")
    summary = {
        "crps": float(np.mean([v for _, v in rows])) if rows else None,
        "persistence_crps": float(np.mean([v for _, v in naive_rows])) if naive_rows else None,
    }
    with open(out / "forecast_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "forecast", cfg, {"checkpoint": str(checkpoint)})
    return summary


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="redsds", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.steps=500")
        sp.add_argument("--seed", type=int, help="experiment seed (model init, batches, sampling)")
        sp.add_argument("--out", help="output directory")

    g = sub.add_parser("generate-data", help="write train/test JSON-lines datasets")
    common(g)
    g.add_argument("--generator", help=f"one of {', '.join(GENERATORS)}")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--length", type=int, help="time steps per series (raw track length for bees)")
    g.add_argument("--data-seed", type=int)
    g.add_argument("--train-path")
    g.add_argument("--test-path")

    t = sub.add_parser("train", help="fit a model by maximising the ELBO")
    common(t)
    t.add_argument("--train-path")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("segment", help="label each step of the test series")
    common(s)
    s.add_argument("--test-path")
    s.add_argument("--checkpoint", required=True)

    f = sub.add_parser("forecast", help="probabilistic forecasts of held-out horizons")
    common(f)
    f.add_argument("--test-path")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--horizon", type=int)
    f.add_argument("--num-paths", type=int)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "generate-data":
            result: Any = cmd_generate_data(cfg)
        elif args.command == "train":
            result = str(cmd_train(cfg, resume=args.resume))
        elif args.command == "segment":
            result = cmd_segment(cfg, args.checkpoint)
        else:
            result = cmd_forecast(cfg, args.checkpoint)
    except UsageError as exc:
        print(f"redsds: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"redsds: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"redsds: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
