"""Synthetic series families and ambiguous-history forecasting tasks.

Time indices run ``t = 1..length``; periodic families measure their phase
from the first sample, so a triangle wave with zero phase starts at 0 and
rises.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .contextgen import SYNTHETIC, Dataset, DatasetRegistry, TimeSeries
from .errors import ContractError

__all__ = [
    "FAMILIES",
    "SyntheticSpec",
    "sample_params",
    "render",
    "generate",
    "synthetic_registry",
    "TASK_KINDS",
    "DisambiguationTask",
    "make_disambiguation_task",
    "disambiguation_suite",
]

FAMILIES = ("linear_trend", "triangle_wave", "sinusoid", "trend_seasonality", "piecewise", "arma")
PARAM_NAMES = ("intercept", "slope", "amplitude", "period", "phase", "noise", "phi", "theta", "n_pieces")


@dataclass(frozen=True)
class SyntheticSpec:
    """A family, parameter ranges to draw from, a length and a seed.

    ``fixed`` pins individual parameters; everything else is drawn from the
    ranges.  Slope, amplitude and period are log-uniform, the rest uniform.
    Noise is a Gaussian std expressed as a fraction of the amplitude.
    """

    family: str
    length: int
    seed: int = 0
    slope: tuple[float, float] = (0.005, 0.2)
    amplitude: tuple[float, float] = (0.5, 5.0)
    period: tuple[float, float] = (8.0, 64.0)
    noise: tuple[float, float] = (0.0, 0.1)
    fixed: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"family: unknown synthetic family {self.family!r}; expected one of {FAMILIES}")
        if self.length < 1:
            raise ContractError("length must be >= 1")
        if self.period[0] < 2 or float(self.fixed.get("period", 2)) < 2:
            raise ContractError("period must be >= 2")
        if self.noise[0] < 0 or float(self.fixed.get("noise", 0)) < 0:
            raise ContractError("noise std must be >= 0")
        for key in self.fixed:
            if key not in PARAM_NAMES:
                raise ContractError(f"fixed: unknown parameter {key!r}")


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_params(spec: SyntheticSpec, rng: np.random.Generator) -> dict[str, float]:
    amp = _log_uniform(rng, *spec.amplitude)
    params = {
        "amplitude": amp,
        "slope": _log_uniform(rng, *spec.slope) * amp * rng.choice((-1.0, 1.0)),
        "intercept": rng.uniform(-amp, amp),
        "period": _log_uniform(rng, *spec.period),
        "phase": rng.uniform(0.0, 1.0),
        "noise": rng.uniform(*spec.noise),
        "phi": rng.uniform(-0.9, 0.95),
        "theta": rng.uniform(-0.5, 0.5),
        "n_pieces": float(rng.integers(2, 6)),
    }
    params.update({k: float(v) for k, v in spec.fixed.items()})
    return params


def triangle(t: np.ndarray, amplitude: float, period: float, phase: float) -> np.ndarray:
    u = np.mod((t - 1) / period + phase, 1.0)
    return amplitude * np.where(u < 0.25, 4 * u, np.where(u < 0.75, 2 - 4 * u, 4 * u - 4))


def sinusoid(t: np.ndarray, amplitude: float, period: float, phase: float) -> np.ndarray:
    return amplitude * np.sin(2 * np.pi * ((t - 1) / period + phase))


def render(family: str, params: Mapping[str, float], length: int, rng: np.random.Generator) -> np.ndarray:
    """Deterministic signal plus noise; ``rng`` supplies shape and noise draws."""
    t = np.arange(1, length + 1, dtype=np.float64)
    a, s, c = params["amplitude"], params["slope"], params["intercept"]
    P, ph = params["period"], params["phase"]
    if family == "linear_trend":
        y = c + s * t
    elif family == "triangle_wave":
        y = c + triangle(t, a, P, ph)
    elif family == "sinusoid":
        y = c + sinusoid(t, a, P, ph)
    elif family == "trend_seasonality":
        y = c + s * t + sinusoid(t, a, P, ph)
    elif family == "piecewise":
        k = int(params["n_pieces"])
        knots = np.sort(rng.uniform(1, length, size=k - 1))
        slopes = rng.normal(0.0, abs(s) + 1e-3, size=k)
        y = c + np.cumsum(slopes[np.searchsorted(knots, t)])
    elif family == "arma":
        phi, theta = params["phi"], params["theta"]
        e = rng.standard_normal(length + 1)
        y = np.empty(length)
        prev = 0.0
        for i in range(length):
            prev = phi * prev + e[i + 1] + theta * e[i]
            y[i] = prev
        y = c + a * y / max(np.std(y), 1e-9)
    else:
        raise ContractError(f"family: unknown synthetic family {family!r}")
    if params["noise"] > 0:
        y = y + rng.normal(0.0, params["noise"] * a, size=length)
    return y


def generate(spec: SyntheticSpec, series_id: str | None = None) -> TimeSeries:
    rng = np.random.default_rng([spec.seed, FAMILIES.index(spec.family)])
    params = sample_params(spec, rng)
    values = render(spec.family, params, spec.length, rng)
    return TimeSeries(series_id or f"{spec.family}-{spec.seed}", values, SYNTHETIC)


def synthetic_registry(n_series: int = 64, length: int = 256, seed: int = 0, families=FAMILIES) -> DatasetRegistry:
    """One synthetic dataset per family, ``n_series`` series each."""
    datasets = []
    for f in families:
        series = [
            generate(SyntheticSpec(f, length, seed=seed * 1_000_003 + i), series_id=f"{f}-{i}")
            for i in range(n_series)
        ]
        datasets.append(Dataset(f"synthetic/{f}", tuple(series), SYNTHETIC))
    return DatasetRegistry(datasets)


# ---------------------------------------------------------------- disambiguation

TREND_VS_TRIANGLE = "trend-vs-triangle"
TREND_VS_SEASONALITY = "trend-vs-seasonality"
TASK_KINDS = (TREND_VS_TRIANGLE, TREND_VS_SEASONALITY)


@dataclass(frozen=True)
class DisambiguationTask:
    """A rising history that either keeps trending or turns over.

    ``examples`` are windows of the true family with the true parameters;
    ``alternative`` is the continuation the other hypothesis would produce.
    """

    kind: str
    true_family: str
    alt_family: str
    history: np.ndarray
    truth: np.ndarray
    alternative: np.ndarray
    examples: tuple[np.ndarray, ...]
    amplitude: float

    def without_examples(self) -> "DisambiguationTask":
        return DisambiguationTask(
            self.kind, self.true_family, self.alt_family, self.history, self.truth, self.alternative, (), self.amplitude
        )

    def with_k(self, k: int) -> "DisambiguationTask":
        if k > len(self.examples):
            raise ContractError(f"task holds {len(self.examples)} examples, {k} requested")
        return DisambiguationTask(
            self.kind, self.true_family, self.alt_family, self.history, self.truth, self.alternative,
            self.examples[:k], self.amplitude,
        )

    @property
    def separation(self) -> float:
        return float(np.mean(np.abs(self.truth - self.alternative)))


def make_disambiguation_task(
    kind: str,
    n_examples: int,
    seed: int,
    history_len: int = 24,
    horizon: int = 16,
    example_len: int = 80,
    noise: float = 0.0,
    truth: str | None = None,
) -> DisambiguationTask:
    """Build one task whose history rises for ``history_len`` points.

    Under the periodic hypothesis the history is exactly the trough-to-peak
    half period (period ``2 * history_len``), so its continuation turns down.
    Under the trend hypothesis the same rise continues linearly.  ``truth``
    picks the true hypothesis ("trend" or "periodic"); by default a fair coin.
    """
    if kind not in TASK_KINDS:
        raise ContractError(f"kind must be one of {TASK_KINDS}, got {kind!r}")
    if n_examples < 0:
        raise ContractError("n_examples must be >= 0")
    rng = np.random.default_rng([seed, TASK_KINDS.index(kind)])
    amp = float(rng.uniform(1.0, 3.0))
    level = float(rng.uniform(-2.0, 2.0))
    periodic = "triangle_wave" if kind == TREND_VS_TRIANGLE else "sinusoid"
    if truth is None:
        truth = "trend" if rng.random() < 0.5 else "periodic"
    if truth not in ("trend", "periodic"):
        raise ContractError(f"truth must be 'trend' or 'periodic', got {truth!r}")

    P = 2.0 * history_len
    L, H = history_len, horizon
    # phase that puts the last history point exactly on a peak
    phase = (0.25 - (L - 1) / P) % 1.0
    wave = triangle if periodic == "triangle_wave" else sinusoid
    t = np.arange(1, L + H + 1, dtype=np.float64)
    periodic_path = level + wave(t, amp, P, phase)
    # the trend that joins the history's first and last points
    slope = (periodic_path[L - 1] - periodic_path[0]) / (L - 1)
    trend_path = periodic_path[0] + slope * (t - 1)

    def noisy(y):
        return y + rng.normal(0.0, noise * amp, size=y.shape) if noise > 0 else y

    if truth == "trend":
        true_family, alt_family = "linear_trend", periodic
        path, alt = noisy(trend_path), periodic_path
    else:
        true_family, alt_family = periodic, "linear_trend"
        path, alt = noisy(periodic_path), trend_path

    te = np.arange(1, example_len + 1, dtype=np.float64)
    examples = []
    for _ in range(n_examples):
        if truth == "trend":
            y = level + rng.uniform(-2.0, 2.0) * amp + slope * te
        else:
            y = level + wave(te, amp, P, rng.uniform(0.0, 1.0))
        examples.append(noisy(y))

    return DisambiguationTask(
        kind=kind,
        true_family=true_family,
        alt_family=alt_family,
        history=path[:L].copy(),
        truth=path[L:].copy(),
        alternative=alt[L:].copy(),
        examples=tuple(examples),
        amplitude=amp,
    )


def disambiguation_suite(n_tasks: int, n_examples: int, seed: int = 0, **kw) -> list[DisambiguationTask]:
    """Alternating task kinds, ``n_tasks`` in total, each with its own seed."""
    return [
        make_disambiguation_task(TASK_KINDS[i % 2], n_examples, seed=seed * 100_003 + i, **kw)
        for i in range(n_tasks)
    ]
