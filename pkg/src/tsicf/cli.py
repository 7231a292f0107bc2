"""Command-line entry point: ``tsicf {gen-data,train,forecast,eval,ablate}``.

Every command reads one INI config file.  ``--seed`` and ``--out`` override
``[run] seed`` and ``[run] out``.  Exit status is 0 on success, 2 when the
config or inputs are invalid, and 3 for runtime and numeric failures.

Example config::

    [run]
    seed = 0
    out = runs/desk

    [model]
    d_model = 64
    n_layers = 4

    [train]
    steps = 5000

    [mixture]
    synthetic = 1.0
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .checkpoint import load_checkpoint, write_atomic
from .contextgen import GROUPS, DatasetRegistry, MixtureSampler, TimeSeries, load_registry, load_series, write_jsonl
from .errors import CheckpointError, ConfigError, ContractError, DataError, NumericError, TsicfError
from .evaluation import (
    EvalTask,
    ModelForecaster,
    NaiveForecaster,
    ablate_num_examples,
    rolling_eval,
    rolling_tasks,
)
from .model import ModelConfig, forecast, forecast_layout, init_params
from .synthetic import FAMILIES, TASK_KINDS, disambiguation_suite, synthetic_registry
from .tokenize import ContextLayout
from .train import TrainConfig, load_training_state, make_training_context, train

log = logging.getLogger("tsicf")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

# training batches draw from default_rng([seed, STREAM_BATCH, step])
STREAM_BATCH = 1

BASE_PHASE, ICF_PHASE = "base", "icf"


# ---------------------------------------------------------------- config


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


@dataclass(frozen=True)
class GenConfig:
    families: tuple[str, ...] = FAMILIES
    n_series: int = 64
    length: int = 256
    n_tasks: int = 200
    task_examples: int = 8


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    synthetic_series: int = 64
    synthetic_length: int = 256


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str | None = None  # a checkpoint path or "naive"
    datasets: tuple[str, ...] | None = None  # None: every dataset in the registry
    history_len: int = 64
    horizon: int = 16
    stride: int | None = None
    test_fraction: float = 0.2
    n_examples: int = 0
    example_len: int = 80


@dataclass(frozen=True)
class AblateConfig:
    checkpoint: str | None = None
    ks: tuple[int, ...] = (0, 1, 4, 8)
    suite: str = "disambiguation"  # or "rolling" over the [eval] datasets
    n_tasks: int = 200


@dataclass(frozen=True)
class ForecastConfig:
    checkpoint: str | None = None
    history: str | None = None
    examples: str | None = None
    horizon: int = 16


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    mixture: dict[str, float] | None = None
    gen: GenConfig = field(default_factory=GenConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    base_dir: Path = Path(".")

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


def _converter(cls, name: str) -> Callable[[str], Any]:
    default = {f.name: f for f in fields(cls)}[name].default
    kind = {f.name: f for f in fields(cls)}[name].type
    if name in ("families", "datasets"):
        return lambda s: tuple(_split(s))
    if name == "ks":
        return lambda s: tuple(int(x) for x in _split(s))
    if isinstance(default, bool):
        return lambda s: s.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) or "int" in str(kind):
        return int
    if isinstance(default, float) or "float" in str(kind):
        return float
    return str


def _section(parser: configparser.ConfigParser, name: str, cls):
    if not parser.has_section(name):
        return cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in parser[name].items():
        where = f"{name}.{key}"
        if key not in known:
            raise ConfigError(f"{where}: unknown key")
        try:
            kwargs[key] = _converter(cls, key)(raw)
        except ValueError:
            raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    try:
        return cls(**kwargs)
    except ContractError as err:
        raise ConfigError(f"[{name}] {err}") from None


SECTIONS = ("run", "model", "train", "data", "mixture", "gen", "eval", "ablate", "forecast")


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> RunConfig:
    """Parse and validate a run config; flags override ``[run]`` values."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are field names such as T_max
    base_dir = Path(".")
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            parser.read(p)
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
        base_dir = p.parent
    for s in parser.sections():
        if s not in SECTIONS:
            raise ConfigError(f"unknown section [{s}]")

    run = parser["run"] if parser.has_section("run") else {}
    for key in run:
        if key not in ("seed", "out"):
            raise ConfigError(f"run.{key}: unknown key")
    try:
        cfg_seed = int(run.get("seed", "0"))
    except ValueError:
        raise ConfigError(f"run.seed: cannot parse {run['seed']!r}") from None
    seed = cfg_seed if seed is None else seed

    mixture = None
    if parser.has_section("mixture"):
        mixture = {}
        for key, raw in parser["mixture"].items():
            if key not in GROUPS:
                raise ConfigError(f"mixture.{key}: unknown group (expected one of {', '.join(GROUPS)})")
            try:
                mixture[key] = float(raw)
            except ValueError:
                raise ConfigError(f"mixture.{key}: cannot parse {raw!r}") from None
            if mixture[key] < 0:
                raise ConfigError(f"mixture.{key}: weight must be >= 0")

    train_cfg = _section(parser, "train", TrainConfig)
    if not parser.has_option("train", "seed"):
        train_cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})

    gen = _section(parser, "gen", GenConfig)
    for fam in gen.families:
        if fam not in FAMILIES:
            raise ConfigError(f"gen.families: unknown family {fam!r} (expected one of {', '.join(FAMILIES)})")
    if not gen.families:
        raise ConfigError("gen.families: empty")
    if gen.n_series < 1 or gen.length < 2 or gen.n_tasks < 0 or gen.task_examples < 0:
        raise ConfigError("[gen] n_series >= 1, length >= 2, n_tasks >= 0 and task_examples >= 0 required")

    ev = _section(parser, "eval", EvalConfig)
    if ev.datasets is not None and not ev.datasets:
        raise ConfigError("eval.datasets: empty task list")
    ab = _section(parser, "ablate", AblateConfig)
    if ab.suite not in ("disambiguation", "rolling"):
        raise ConfigError(f"ablate.suite: expected 'disambiguation' or 'rolling', got {ab.suite!r}")
    if not ab.ks:
        raise ConfigError("ablate.ks: empty")

    cfg = RunConfig(
        seed=seed,
        out=out if out is not None else run.get("out", "runs/default"),
        model=_section(parser, "model", ModelConfig),
        train=train_cfg,
        data=_section(parser, "data", DataConfig),
        mixture=mixture,
        gen=gen,
        eval=ev,
        ablate=ab,
        forecast=_section(parser, "forecast", ForecastConfig),
        base_dir=base_dir,
    )
    return cfg


def _registry(cfg: RunConfig) -> DatasetRegistry:
    if cfg.data.manifest is not None:
        path = cfg.path(cfg.data.manifest)
        if not path.is_file():
            raise ConfigError(f"data.manifest: {cfg.data.manifest} does not exist")
        return load_registry(path)
    return synthetic_registry(cfg.data.synthetic_series, cfg.data.synthetic_length, seed=cfg.seed)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(value: str | None, what: str, cfg: RunConfig) -> Path:
    if value is None:
        raise ConfigError(f"{what}: not set")
    p = cfg.path(value)
    if not p.is_file():
        raise ConfigError(f"{what}: {value} does not exist")
    return p


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    g = cfg.gen
    registry = synthetic_registry(g.n_series, g.length, seed=cfg.seed, families=g.families)
    manifest = []
    for ds in registry:
        family = ds.name.split("/", 1)[1]
        path = out / "synthetic" / f"{family}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_jsonl(ds.series, path)
        manifest.append(f"[dataset:{ds.name}]\npath = synthetic/{family}.jsonl\nformat = jsonl\ngroup = synthetic\n")
    write_atomic(out / "manifest.ini", "\n".join(manifest).encode())

    suite = disambiguation_suite(g.n_tasks, g.task_examples, seed=cfg.seed)
    for kind in TASK_KINDS:
        rows = []
        for i, task in enumerate(suite):
            if task.kind != kind:
                continue
            tag = f"{kind}/{i}/{task.true_family}"
            rows.append(TimeSeries(f"{tag}/history", task.history, "synthetic"))
            rows.append(TimeSeries(f"{tag}/truth", task.truth, "synthetic"))
            rows.append(TimeSeries(f"{tag}/alternative", task.alternative, "synthetic"))
            rows += [TimeSeries(f"{tag}/example-{j}", x, "synthetic") for j, x in enumerate(task.examples)]
        path = out / "tasks" / f"{kind}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_jsonl(rows, path)
    log.info("wrote %d family files and %d task suites to %s", len(registry), len(TASK_KINDS), out)
    return EXIT_OK


def _batch_drawer(cfg: RunConfig, sampler: MixtureSampler, registry: DatasetRegistry):
    def draw(step: int):
        rng = np.random.default_rng([cfg.seed, STREAM_BATCH, step])
        return [
            make_training_context(sampler.draw(rng).resolve(registry, cfg.model.T_max), cfg.model)
            for _ in range(cfg.train.batch_size)
        ]

    return draw


def cmd_train(cfg: RunConfig, args) -> int:
    phase = ICF_PHASE if args.init_from else BASE_PHASE
    init_path = _existing(args.init_from, "--init-from", cfg) if args.init_from else None
    registry = _registry(cfg)
    n = 1 if phase == BASE_PHASE else cfg.train.n_examples
    if n > cfg.model.n_max:
        raise ConfigError(f"train.n_examples: {n} exceeds model.n_max={cfg.model.n_max}")
    sampler = MixtureSampler(registry, n, cfg.model.T_max, cfg.mixture, seed=cfg.seed)

    out = _out_dir(cfg)
    ckpt = out / f"{phase}.ckpt"
    metrics = out / f"{phase}_metrics.csv"
    meta = {"phase": phase, "seed": str(cfg.seed)}
    opt = None
    if ckpt.exists():
        params, saved_cfg, opt, saved_meta = load_training_state(ckpt)
        if saved_cfg != cfg.model or saved_meta.get("phase") != phase or saved_meta.get("seed") != str(cfg.seed):
            raise ConfigError(f"{ckpt} belongs to a different run (model config, phase or seed differ)")
        log.info("resuming %s from step %d", ckpt, opt.step)
    elif init_path is not None:
        params, _ = load_checkpoint(init_path, cfg.model, seed=cfg.seed)
    else:
        params = init_params(cfg.model, seed=cfg.seed)

    def progress(step, loss):
        if step % 100 == 0:
            log.info("step %d loss %.5f", step, loss)

    train(
        params,
        cfg.model,
        cfg.train,
        _batch_drawer(cfg, sampler, registry),
        opt=opt,
        checkpoint_path=ckpt,
        metrics_path=metrics,
        stop_after=args.stop_after,
        base_model=phase == BASE_PHASE,
        meta=meta,
        progress=progress,
    )
    log.info("wrote %s and %s", ckpt, metrics)
    return EXIT_OK


def _series_file(path: Path) -> list[np.ndarray]:
    return [s.values for s in load_series(path)]


def layout_record(layout: ContextLayout, history_len: int, H: int, h: int) -> dict:
    """JSON-friendly description of a forecast's context layout."""
    return {
        "mode": layout.mode,
        "p": layout.p,
        "h": h,
        "horizon": H,
        "rounds": -(-H // h),
        "history_len": history_len,
        "n_examples": layout.n_examples,
        "n_tokens": layout.n_tokens,
        "spans": [list(s) for s in layout.spans],
        "separator_positions": list(layout.separator_positions),
        "eligible": layout.eligible.astype(int).tolist(),
        "example_id": layout.example_id.tolist(),
        "patch_index": layout.patch_index.tolist(),
        "readout_token": layout.last_eligible_of(layout.n_examples - 1),
    }


def cmd_forecast(cfg: RunConfig, args) -> int:
    fc = cfg.forecast
    ckpt = _existing(args.checkpoint or fc.checkpoint, "forecast.checkpoint", cfg)
    hist_path = _existing(args.history or fc.history, "forecast.history", cfg)
    ex_value = args.examples or fc.examples
    H = args.horizon if args.horizon is not None else fc.horizon
    if H < 1:
        raise ConfigError(f"forecast.horizon: must be >= 1, got {H}")
    histories = _series_file(hist_path)
    if len(histories) != 1:
        raise DataError(f"{hist_path}: expected exactly one history series, found {len(histories)}")
    history = histories[0]
    examples = _series_file(_existing(ex_value, "forecast.examples", cfg)) if ex_value else []

    params, model_cfg = load_checkpoint(ckpt)
    layout = forecast_layout(history, examples, model_cfg)  # capacity checked here, before any compute
    result = forecast(history, examples, H, params, model_cfg)

    out = _out_dir(cfg)
    lines = ["step,prediction,round"] + [f"{i + 1},{v!r},{r}" for i, (v, r) in enumerate(zip(result.predictions.tolist(), result.rounds.tolist()))]
    write_atomic(out / "forecast.csv", ("\n".join(lines) + "\n").encode())
    record = layout_record(layout, len(history), H, model_cfg.h)
    record["checkpoint"] = str(ckpt)
    write_atomic(out / "forecast.layout.json", (json.dumps(record, indent=1) + "\n").encode())
    return EXIT_OK


def _forecaster(value: str | None, what: str, cfg: RunConfig):
    if value == "naive":
        return NaiveForecaster(), None
    params, model_cfg = load_checkpoint(_existing(value, what, cfg))
    return ModelForecaster(params, model_cfg), model_cfg


def _eval_tasks(cfg: RunConfig, registry: DatasetRegistry) -> list[EvalTask]:
    ev = cfg.eval
    names = list(ev.datasets) if ev.datasets is not None else registry.names()
    if not names:
        raise ConfigError("eval.datasets: empty task list")
    for name in names:
        if name not in registry.names():
            raise ConfigError(f"eval.datasets: unknown dataset {name!r}")
    try:
        return [
            EvalTask(name, ev.history_len, ev.horizon, ev.stride, ev.test_fraction, ev.n_examples, ev.example_len, cfg.seed)
            for name in names
        ]
    except ContractError as err:
        raise ConfigError(f"[eval] {err}") from None


def cmd_eval(cfg: RunConfig, args) -> int:
    model, _ = _forecaster(args.checkpoint or cfg.eval.checkpoint, "eval.checkpoint", cfg)
    registry = _registry(cfg)
    tasks = _eval_tasks(cfg, registry)
    report = rolling_eval(model, tasks, registry, workers=args.workers)
    for w in report.warnings:
        log.warning(w)
    report.to_csv(_out_dir(cfg) / "eval.csv")
    log.info("geometric mean scaled MAE %.4f", report.gm)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    ab = cfg.ablate
    model, model_cfg = _forecaster(args.checkpoint or ab.checkpoint, "ablate.checkpoint", cfg)
    ks = list(ab.ks)
    n_max = model_cfg.n_max if model_cfg is not None else None
    if ks != sorted(ks) or ks[0] < 0:
        raise ConfigError(f"ablate.ks: must be ascending counts >= 0, got {ks}")
    if n_max is not None and ks[-1] > n_max - 1:
        raise ConfigError(f"ablate.ks: k={ks[-1]} exceeds capacity n_max - 1 = {n_max - 1}")
    if ab.suite == "disambiguation":
        tasks = disambiguation_suite(ab.n_tasks, ks[-1], seed=cfg.seed)
        if not tasks:
            raise ConfigError("ablate.n_tasks: empty task list")
    else:
        registry = _registry(cfg)
        tasks = [t for task in _eval_tasks(cfg, registry) for t in rolling_tasks(registry, task, ks[-1])]
        if not tasks:
            raise DataError("no rolling window in any [eval] dataset")
    report = ablate_num_examples(model, tasks, ks, n_max, workers=args.workers)
    out = _out_dir(cfg)
    report.to_csv(out / "ablation.csv")
    report.summary_csv(out / "ablation_summary.csv")
    for k, m in report.summary_rows():
        log.info("k=%d mae=%.5f", k, m)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config")
    common.add_argument("--seed", type=int, help="root seed (overrides [run] seed)")
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("--workers", type=int, default=1, help="parallel forecast workers for eval/ablate")

    parser = argparse.ArgumentParser(prog="tsicf", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic families and disambiguation suites")
    p = sub.add_parser("train", parents=[common], help="base pretraining, or continued in-context pretraining with --init-from")
    p.add_argument("--init-from", help="base checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop after this step (the run can be resumed)")
    p = sub.add_parser("forecast", parents=[common], help="forecast one history")
    p.add_argument("--checkpoint")
    p.add_argument("--history", help="CSV/JSONL file holding one series")
    p.add_argument("--examples", help="CSV/JSONL file of in-context examples")
    p.add_argument("--horizon", type=int)
    for name in ("eval", "ablate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", help='checkpoint path or "naive"')
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    for name in ("init_from", "stop_after", "checkpoint", "history", "examples", "horizon"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        if args.workers < 1:
            raise ConfigError(f"--workers: must be >= 1, got {args.workers}")
        cfg = load_config(args.config, args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except (ContractError, DataError, CheckpointError, FileNotFoundError) as err:
        log.error("%s", err)
        return EXIT_INVALID
    except (NumericError, TsicfError, OSError, ArithmeticError, RuntimeError, MemoryError) as err:
        log.error("%s", err)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
