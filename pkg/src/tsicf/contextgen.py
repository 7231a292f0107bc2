"""Training contexts from registries of series.

Windows of length ``T`` are taken with shift 1 from every series (a series
shorter than ``T`` contributes one short window that is padded later).  A
context groups ``n`` windows either from one series (series-level) or from
any series of one dataset (dataset-level).  The mixture sampler picks a
granularity group, a dataset inside it and a grouping kind, then draws one
context.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .checkpoint import write_atomic
from .errors import ContractError, DataError

__all__ = [
    "GROUPS",
    "REAL_GROUPS",
    "SERIES_LEVEL",
    "DATASET_LEVEL",
    "TimeSeries",
    "Dataset",
    "DatasetRegistry",
    "WindowRef",
    "ContextSpec",
    "enumerate_windows",
    "sample_contexts",
    "MixtureSampler",
    "mixture_sampler",
    "default_weights",
    "load_series",
    "load_registry",
    "write_jsonl",
]

REAL_GROUPS = ("hourly", "daily", "weekly", "monthly")
SYNTHETIC = "synthetic"
GROUPS = REAL_GROUPS + (SYNTHETIC,)
SERIES_LEVEL = "series"
DATASET_LEVEL = "dataset"
KINDS = (SERIES_LEVEL, DATASET_LEVEL)


@dataclass(frozen=True)
class TimeSeries:
    id: str
    values: np.ndarray
    granularity: str = "unknown"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise DataError(f"series {self.id!r} is empty")
        if not np.isfinite(values).all():
            raise DataError(f"series {self.id!r} has non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Dataset:
    name: str
    series: tuple[TimeSeries, ...]
    group: str
    eligible: bool = True

    def __post_init__(self):
        if self.group not in GROUPS:
            raise DataError(f"dataset {self.name!r}: unknown group {self.group!r}; expected one of {GROUPS}")
        object.__setattr__(self, "series", tuple(self.series))
        ids = [s.id for s in self.series]
        if len(set(ids)) != len(ids):
            raise DataError(f"dataset {self.name!r} has duplicate series ids")

    def window_counts(self, T: int) -> np.ndarray:
        return np.array([len(enumerate_windows(s, T)) for s in self.series], dtype=np.int64)


class DatasetRegistry:
    """Named datasets; immutable once built."""

    def __init__(self, datasets: Sequence[Dataset] = ()):
        self._datasets: dict[str, Dataset] = {}
        for d in datasets:
            if d.name in self._datasets:
                raise DataError(f"duplicate dataset name {d.name!r}")
            self._datasets[d.name] = d

    def __getitem__(self, name: str) -> Dataset:
        try:
            return self._datasets[name]
        except KeyError:
            raise DataError(f"unknown dataset {name!r}") from None

    def __iter__(self) -> Iterator[Dataset]:
        return iter(self._datasets.values())

    def __len__(self) -> int:
        return len(self._datasets)

    def names(self) -> list[str]:
        return list(self._datasets)

    def merged(self, other: "DatasetRegistry") -> "DatasetRegistry":
        return DatasetRegistry(list(self) + list(other))

    def by_group(self, eligible_only: bool = True) -> dict[str, list[Dataset]]:
        out: dict[str, list[Dataset]] = {}
        for d in self:
            if eligible_only and not d.eligible:
                continue
            out.setdefault(d.group, []).append(d)
        return out


@dataclass(frozen=True)
class WindowRef:
    dataset: str
    series: int  # index into Dataset.series
    start: int  # 0-based

    def resolve(self, registry: DatasetRegistry, T: int) -> np.ndarray:
        values = registry[self.dataset].series[self.series].values
        return values[self.start : self.start + T]


@dataclass(frozen=True)
class ContextSpec:
    refs: tuple[WindowRef, ...]
    kind: str
    group: str = ""

    def resolve(self, registry: DatasetRegistry, T: int) -> list[np.ndarray]:
        return [r.resolve(registry, T) for r in self.refs]


def enumerate_windows(series: TimeSeries | np.ndarray, T: int) -> np.ndarray:
    """0-based start offsets of all length-``T`` windows with shift 1.

    A series shorter than ``T`` yields the single start 0 (a short window).
    """
    if T < 1:
        raise ContractError("T must be >= 1")
    M = len(series)
    if M == 0:
        raise DataError("cannot window an empty series")
    if M < T:
        return np.zeros(1, dtype=np.int64)
    return np.arange(M - T + 1, dtype=np.int64)


class _WindowIndex:
    """Maps a flat window index of a dataset back to (series, start)."""

    def __init__(self, dataset: Dataset, T: int):
        self.dataset = dataset
        self.counts = dataset.window_counts(T)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])
        self.total = int(self.offsets[-1])

    def refs(self, flat: np.ndarray) -> list[WindowRef]:
        s = np.searchsorted(self.offsets, flat, side="right") - 1
        return [WindowRef(self.dataset.name, int(a), int(b)) for a, b in zip(s, flat - self.offsets[s])]

    def draw(self, rng: np.random.Generator, n: int, kind: str) -> tuple[WindowRef, ...]:
        if self.total == 0:
            raise DataError(f"dataset {self.dataset.name!r} yields no windows")
        if kind == DATASET_LEVEL:
            return tuple(self.refs(rng.integers(0, self.total, size=n)))
        if kind != SERIES_LEVEL:
            raise ContractError(f"unknown grouping kind {kind!r}")
        # pick the series through a uniformly drawn window, then n windows of it
        first = int(rng.integers(0, self.total))
        s = int(np.searchsorted(self.offsets, first, side="right") - 1)
        starts = rng.integers(0, self.counts[s], size=n)
        return tuple(WindowRef(self.dataset.name, s, int(b)) for b in starts)


def sample_contexts(
    registry: DatasetRegistry,
    dataset: str,
    n: int,
    T: int,
    count: int | None = None,
    kind: str = SERIES_LEVEL,
    seed: int = 0,
) -> list[ContextSpec]:
    """Draw ``count`` contexts (default ``20 * N``, N = windows in the dataset)."""
    if n < 1:
        raise ContractError("n must be >= 1")
    ds = registry[dataset]
    if not ds.series:
        raise DataError(f"dataset {dataset!r} is empty")
    index = _WindowIndex(ds, T)
    if count is None:
        count = 20 * index.total
    rng = np.random.default_rng(seed)
    return [ContextSpec(index.draw(rng, n, kind), kind, ds.group) for _ in range(count)]


def default_weights(registry: DatasetRegistry) -> dict[str, float]:
    """10% synthetic, the rest split equally over non-empty real groups."""
    present = registry.by_group()
    real = [g for g in REAL_GROUPS if g in present]
    if not real:
        return {SYNTHETIC: 1.0} if SYNTHETIC in present else {}
    if SYNTHETIC not in present:
        return {g: 1.0 / len(real) for g in real}
    return {SYNTHETIC: 0.1, **{g: 0.9 / len(real) for g in real}}


@dataclass
class MixtureSampler:
    """Weighted draws over granularity groups, datasets and grouping kinds."""

    registry: DatasetRegistry
    n: int
    T: int
    weights: Mapping[str, float] | None = None
    seed: int = 0
    _groups: list[str] = field(init=False)
    _probs: np.ndarray = field(init=False)
    _index: dict[str, list[_WindowIndex]] = field(init=False)

    def __post_init__(self):
        if self.n < 1:
            raise ContractError("n must be >= 1")
        present = self.registry.by_group()
        weights = dict(self.weights) if self.weights is not None else default_weights(self.registry)
        for g in weights:
            if g not in GROUPS:
                raise ContractError(f"unknown group {g!r} in mixture weights")
        usable = {g: w for g, w in weights.items() if w > 0 and g in present}
        if not usable:
            raise DataError("mixture has no non-empty pool with positive weight")
        total = sum(usable.values())
        self._groups = sorted(usable, key=GROUPS.index)
        self._probs = np.array([usable[g] / total for g in self._groups])
        self._index = {g: [_WindowIndex(d, self.T) for d in present[g]] for g in self._groups}

    @property
    def probabilities(self) -> dict[str, float]:
        return dict(zip(self._groups, self._probs.tolist()))

    def draw(self, rng: np.random.Generator) -> ContextSpec:
        group = self._groups[int(rng.choice(len(self._groups), p=self._probs))]
        pools = self._index[group]
        index = pools[int(rng.integers(0, len(pools)))]
        kind = KINDS[int(rng.integers(0, 2))]
        return ContextSpec(index.draw(rng, self.n, kind), kind, group)

    def __iter__(self) -> Iterator[ContextSpec]:
        rng = np.random.default_rng(self.seed)
        while True:
            yield self.draw(rng)


def mixture_sampler(registry: DatasetRegistry, n: int, T: int, weights=None, seed: int = 0) -> MixtureSampler:
    return MixtureSampler(registry, n, T, weights, seed)


# ---------------------------------------------------------------- I/O


def _parse_float(cell: str, where: str) -> float:
    try:
        x = float(cell)
    except ValueError:
        raise DataError(f"{where}: not a number: {cell!r}") from None
    if not math.isfinite(x):
        raise DataError(f"{where}: non-finite value {cell!r}")
    return x


def load_series(path, format: str | None = None, granularity: str = "unknown") -> list[TimeSeries]:
    """Read series from CSV (one column per series) or JSONL (one object per line).

    CSV columns may end early (trailing empty cells); a gap inside a column
    is an error.
    """
    path = Path(path)
    format = format or path.suffix.lstrip(".").lower()
    if format == "csv":
        return _load_csv(path, granularity)
    if format == "jsonl":
        return _load_jsonl(path, granularity)
    raise DataError(f"unsupported series format {format!r}")


def _load_csv(path: Path, granularity: str) -> list[TimeSeries]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate series ids in header")
    columns: list[list[float]] = [[] for _ in header]
    ended = [False] * len(header)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) > len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        for c, name in enumerate(header):
            cell = row[c].strip() if c < len(row) else ""
            if cell == "":
                ended[c] = True
                continue
            if ended[c]:
                raise DataError(f"{path}: row {r}, column {name!r}: value after a gap")
            columns[c].append(_parse_float(cell, f"{path}: row {r}, column {name!r}"))
    return [TimeSeries(name, np.array(col), granularity) for name, col in zip(header, columns)]


def _load_jsonl(path: Path, granularity: str) -> list[TimeSeries]:
    out, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sid = str(obj["id"])
                raw = obj["values"]
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise DataError(f"{path}: line {lineno}: {err}") from None
            if sid in seen:
                raise DataError(f"{path}: line {lineno}: duplicate id {sid!r}")
            seen.add(sid)
            if not isinstance(raw, list):
                raise DataError(f"{path}: line {lineno}: values must be a list")
            values = []
            for k, cell in enumerate(raw):
                if isinstance(cell, bool) or not isinstance(cell, (int, float)):
                    raise DataError(f"{path}: line {lineno}, value {k}: not a number: {cell!r}")
                values.append(_parse_float(str(cell), f"{path}: line {lineno}, value {k}"))
            out.append(TimeSeries(sid, np.array(values), obj.get("granularity", granularity)))
    return out


def write_jsonl(series: Sequence[TimeSeries], path) -> str:
    """Serialize series as JSONL; returns the text (also written to ``path``)."""
    lines = [
        json.dumps({"id": s.id, "granularity": s.granularity, "values": [float(x) for x in s.values]})
        for s in series
    ]
    text = "\n".join(lines) + "\n"
    if path is not None:
        write_atomic(Path(path), text.encode())
    return text


def load_registry(manifest) -> DatasetRegistry:
    """Read a registry manifest.

    INI-style, one section per dataset::

        [dataset:electricity]
        path = data/electricity.csv
        format = csv
        group = hourly
        eligible = true

    Relative paths resolve against the manifest's directory.
    """
    manifest = Path(manifest)
    parser = configparser.ConfigParser()
    try:
        read = parser.read(manifest)
    except configparser.Error as err:
        raise DataError(f"{manifest}: {err}") from None
    if not read:
        raise DataError(f"cannot read registry manifest {manifest}")
    datasets = []
    for section in parser.sections():
        if not section.startswith("dataset:"):
            raise DataError(f"{manifest}: unexpected section [{section}]")
        name = section[len("dataset:"):]
        sec = parser[section]
        for key in ("path", "group"):
            if key not in sec:
                raise DataError(f"{manifest}: [{section}] lacks {key!r}")
        path = Path(sec["path"])
        if not path.is_absolute():
            path = manifest.parent / path
        try:
            eligible = sec.getboolean("eligible", fallback=True)
        except ValueError:
            raise DataError(f"{manifest}: [{section}] eligible must be a boolean") from None
        series = load_series(path, sec.get("format"), granularity=sec["group"])
        datasets.append(Dataset(name, tuple(series), sec["group"], eligible))
    return DatasetRegistry(datasets)
