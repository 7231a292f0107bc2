"""Forecast evaluation: naive baseline, scaled MAE with geometric-mean
aggregation, rolling windows over a trailing test split, and a sweep over
the number of in-context examples.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .checkpoint import write_atomic
from .contextgen import DatasetRegistry, enumerate_windows
from .errors import CapacityError, ContractError, DataError
from .model import ModelConfig, ModelParams, forecast

__all__ = [
    "naive_forecast",
    "mae",
    "scaled_mae_gm",
    "EvalTask",
    "ICLTask",
    "Forecaster",
    "NaiveForecaster",
    "ModelForecaster",
    "DatasetMetrics",
    "MetricReport",
    "rolling_origins",
    "rolling_eval",
    "rolling_tasks",
    "select_examples",
    "AblationReport",
    "ablate_num_examples",
]


def naive_forecast(history, H: int) -> np.ndarray:
    history = np.asarray(history, dtype=np.float64).reshape(-1)
    if history.size == 0:
        raise ContractError("history must not be empty")
    return np.full(H, history[-1])


def mae(pred, actual) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape or pred.size == 0:
        raise ContractError(f"mae needs equal non-empty shapes, got {pred.shape} and {actual.shape}")
    return float(np.mean(np.abs(pred - actual)))


def _scaled(pairs) -> tuple[np.ndarray, list[int]]:
    kept, excluded = [], []
    for i, (model, naive) in enumerate(pairs):
        if naive > 0:
            kept.append(model / naive)
        else:
            excluded.append(i)
    return np.array(kept, dtype=np.float64), excluded


def scaled_mae_gm(pairs: Sequence[tuple[float, float]], excluded: list | None = None) -> float:
    """Geometric mean of model MAE / naive MAE over datasets.

    Pairs whose naive MAE is 0 are skipped; their indices are appended to
    ``excluded`` when given.  Returns nan when nothing is left.
    """
    values, skipped = _scaled(pairs)
    if excluded is not None:
        excluded.extend(skipped)
    if values.size == 0:
        return float("nan")
    return float(np.exp(np.mean(np.log(values))))


def _map(fn, items, workers: int) -> list:
    # results come back in input order, so reports do not depend on workers
    if workers < 1:
        raise ContractError(f"workers must be >= 1, got {workers}")
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- forecasters


class Forecaster(Protocol):
    def __call__(self, history: np.ndarray, examples: Sequence[np.ndarray], H: int) -> np.ndarray: ...


class NaiveForecaster:
    name = "naive"

    def __call__(self, history, examples, H):
        return naive_forecast(history, H)


class ModelForecaster:
    name = "model"

    def __init__(self, params: ModelParams, cfg: ModelConfig):
        self.cfg = cfg
        self.weights = params.tensors()

    def __call__(self, history, examples, H):
        return forecast(history, list(examples), H, self.weights, self.cfg).predictions


# ---------------------------------------------------------------- rolling evaluation


@dataclass(frozen=True)
class EvalTask:
    dataset: str
    history_len: int
    horizon: int
    stride: int | None = None  # None: equal to the horizon
    test_fraction: float = 0.2
    n_examples: int = 0
    example_len: int = 80
    seed: int = 0

    def __post_init__(self):
        if self.history_len < 1 or self.horizon < 1:
            raise ContractError("history_len and horizon must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ContractError("test_fraction must lie in (0, 1)")
        if self.stride is not None and self.stride < 1:
            raise ContractError("stride must be >= 1")

    @property
    def step(self) -> int:
        return self.stride or self.horizon


def rolling_origins(M: int, task: EvalTask) -> np.ndarray:
    """Forecast origins (index of the first forecast point) inside the test split."""
    test_start = M - int(round(M * task.test_fraction))
    first = max(test_start, task.history_len)
    # origins stay on the test-split grid even when the history pushes the first one later
    first = test_start + math.ceil((first - test_start) / task.step) * task.step
    last = M - task.horizon
    if first > last:
        return np.zeros(0, dtype=np.int64)
    return np.arange(first, last + 1, task.step, dtype=np.int64)


def select_examples(registry: DatasetRegistry, task: EvalTask, k: int) -> list[np.ndarray]:
    """Deterministic in-context examples for a dataset.

    Candidates are windows of ``example_len`` points lying entirely before
    each series' test split (shorter training parts contribute themselves).
    ``k`` of them are drawn without replacement when possible using the task
    seed; the draw for a smaller ``k`` is a prefix of the draw for a larger one.
    """
    if k == 0:
        return []
    candidates = []
    for series in registry[task.dataset].series:
        M = len(series)
        train_end = M - int(round(M * task.test_fraction))
        if train_end < 1:
            continue
        head = series.values[:train_end]
        for start in enumerate_windows(head, task.example_len):
            candidates.append(head[start : start + task.example_len])
    if not candidates:
        raise DataError(f"dataset {task.dataset!r} has no data before its test split for examples")
    rng = np.random.default_rng([task.seed, 7919])
    order = rng.permutation(len(candidates))
    picks = [order[i % len(order)] for i in range(k)]
    return [candidates[i] for i in picks]


@dataclass
class DatasetMetrics:
    dataset: str
    model_mae: float
    naive_mae: float
    n_windows: int
    window_errors: np.ndarray = field(repr=False)
    naive_window_errors: np.ndarray = field(repr=False)

    @property
    def scaled_mae(self) -> float:
        return self.model_mae / self.naive_mae if self.naive_mae > 0 else float("nan")


@dataclass
class MetricReport:
    rows: list[DatasetMetrics]
    warnings: list[str] = field(default_factory=list)

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return [(r.model_mae, r.naive_mae) for r in self.rows]

    @property
    def excluded(self) -> list[str]:
        out: list[int] = []
        scaled_mae_gm(self.pairs, out)
        return [self.rows[i].dataset for i in out]

    @property
    def gm(self) -> float:
        return scaled_mae_gm(self.pairs)

    @property
    def gm_stderr(self) -> float:
        """Delta-method standard error of the geometric mean across datasets."""
        values, _ = _scaled(self.pairs)
        if values.size < 2:
            return 0.0
        se_log = float(np.std(np.log(values), ddof=1) / math.sqrt(values.size))
        return self.gm * se_log

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "model_mae", "naive_mae", "scaled_mae"])
        for r in self.rows:
            w.writerow([r.dataset, repr(r.model_mae), repr(r.naive_mae), repr(r.scaled_mae)])
        w.writerow(["GM", "", "", repr(self.gm)])
        w.writerow(["GM_STDERR", "", "", repr(self.gm_stderr)])
        text = buf.getvalue()
        if path is not None:
            write_atomic(Path(path), text.encode())
        return text


def rolling_eval(
    forecaster: Forecaster,
    tasks: EvalTask | Sequence[EvalTask],
    registry: DatasetRegistry,
    workers: int = 1,
) -> MetricReport:
    """Evaluate ``forecaster`` on rolling windows of each task's test split.

    MAE is averaged over all windows of all series of a dataset; the naive
    baseline is scored on exactly the same windows.
    """
    if isinstance(tasks, EvalTask):
        tasks = [tasks]
    if not tasks:
        raise ContractError("no evaluation tasks given")
    rows, warnings = [], []
    for task in tasks:
        examples = select_examples(registry, task, task.n_examples)
        windows = []
        for series in registry[task.dataset].series:
            y = series.values
            for t in rolling_origins(len(y), task):
                windows.append((y[t - task.history_len : t], y[t : t + task.horizon]))
        if not windows:
            warnings.append(f"dataset {task.dataset!r}: no valid rolling window, skipped")
            continue
        errs = _map(lambda w: mae(forecaster(w[0], examples, task.horizon), w[1]), windows, workers)
        nerrs = [mae(naive_forecast(hist, task.horizon), actual) for hist, actual in windows]
        rows.append(
            DatasetMetrics(task.dataset, float(np.mean(errs)), float(np.mean(nerrs)), len(errs), np.array(errs), np.array(nerrs))
        )
    report = MetricReport(rows, warnings)
    for name in report.excluded:
        report.warnings.append(f"dataset {name!r}: naive MAE is 0, excluded from the geometric mean")
    return report


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class ICLTask:
    """A forecasting problem with a pool of candidate in-context examples."""

    name: str
    history: np.ndarray
    truth: np.ndarray
    examples: tuple[np.ndarray, ...]


def rolling_tasks(registry: DatasetRegistry, task: EvalTask, k_max: int) -> list[ICLTask]:
    """Every rolling window of ``task`` as an :class:`ICLTask` with ``k_max`` examples."""
    examples = tuple(select_examples(registry, task, k_max))
    out = []
    for series in registry[task.dataset].series:
        y = series.values
        for t in rolling_origins(len(y), task):
            out.append(ICLTask(task.dataset, y[t - task.history_len : t], y[t : t + task.horizon], examples))
    return out


@dataclass
class AblationReport:
    ks: list[int]
    rows: list[tuple[int, str, float]]  # (k, task name, mae)

    def mean_mae(self) -> dict[int, float]:
        return {k: float(np.mean([m for kk, _, m in self.rows if kk == k])) for k in self.ks}

    def summary_rows(self) -> list[tuple[int, float]]:
        return list(self.mean_mae().items())

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "dataset", "mae"])
        for k, name, m in self.rows:
            w.writerow([k, name, repr(m)])
        text = buf.getvalue()
        if path is not None:
            write_atomic(Path(path), text.encode())
        return text

    def summary_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "mae"])
        for k, m in self.summary_rows():
            w.writerow([k, repr(m)])
        text = buf.getvalue()
        if path is not None:
            write_atomic(Path(path), text.encode())
        return text


def ablate_num_examples(
    forecaster: Forecaster,
    tasks: Sequence,
    ks: Sequence[int],
    n_max: int | None = None,
    name_of: Callable[[int, object], str] | None = None,
    workers: int = 1,
) -> AblationReport:
    """MAE of every task with exactly ``k`` in-context examples, for each ``k``.

    A task supplies ``history``, ``truth`` and an ordered ``examples`` pool;
    the first ``k`` examples are used, so smaller ``k`` see a prefix of the
    examples given to larger ``k``.
    """
    ks = list(ks)
    if not ks or ks != sorted(ks) or ks[0] < 0:
        raise ContractError(f"ks must be a non-empty ascending list of counts >= 0, got {ks}")
    if n_max is not None and ks[-1] > n_max - 1:
        raise CapacityError(f"k={ks[-1]} exceeds capacity n_max - 1 = {n_max - 1}")
    jobs = []
    for k in ks:
        for i, task in enumerate(tasks):
            if k > len(task.examples):
                raise CapacityError(f"task {i} holds {len(task.examples)} examples, k={k} requested")
            name = name_of(i, task) if name_of else getattr(task, "name", None) or getattr(task, "kind", f"task-{i}")
            jobs.append((k, name, task))

    def run(job):
        k, _, task = job
        return mae(forecaster(task.history, list(task.examples[:k]), len(task.truth)), task.truth)

    maes = _map(run, jobs, workers)
    return AblationReport(ks, [(k, name, m) for (k, name, _), m in zip(jobs, maes)])
