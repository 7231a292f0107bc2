"""Padding, patching and flat token layouts for contexts of example series.

A context is an ordered list of example windows; the last one is the target.
Every window is cut into non-overlapping patches of ``p`` points, and a shared
separator slot follows each example (in inference mode the target has none, so
the final token of the stream is the target's last patch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapacityError, ContractError

__all__ = [
    "ExampleWindow",
    "PatchGrid",
    "ContextLayout",
    "Context",
    "pad_example",
    "pad_history",
    "patchify",
    "layout_context",
]

TRAIN = "train"
INFER = "infer"


@dataclass(frozen=True)
class ExampleWindow:
    """A slice of a series and its padding mask (1 = padded, 0 = real)."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=np.int8)
        if values.ndim != 1 or values.shape != mask.shape:
            raise ContractError(f"values {values.shape} and mask {mask.shape} must be equal 1-d shapes")
        if not np.isin(mask, (0, 1)).all():
            raise ContractError("mask entries must be 0 or 1")
        real = np.flatnonzero(mask == 0)
        if real.size == 0:
            raise ContractError("window has no real values")
        if real[-1] - real[0] + 1 != real.size:
            raise ContractError("real values must form one contiguous block")
        values = np.where(mask == 1, 0.0, values)
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def real(cls, values) -> "ExampleWindow":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.zeros(values.shape, dtype=np.int8))

    @property
    def real_values(self) -> np.ndarray:
        return self.values[self.mask == 0]

    def with_values(self, values: np.ndarray) -> "ExampleWindow":
        return ExampleWindow(values, self.mask)


def pad_example(values, T: int, p: int) -> ExampleWindow:
    """Pad a raw series of length ``l <= T`` into a training example.

    Series shorter than one patch are left padded with ``p - l + 1`` points so
    that the first patch is followed by a second one holding real data; every
    example is then right padded to exactly ``T`` points.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    l = values.shape[0]
    if l == 0:
        raise ContractError("cannot pad an empty series")
    if l > T:
        raise CapacityError(f"series of length {l} exceeds capacity T={T}; window it first")
    if p >= T:
        raise ContractError(f"patch length p={p} must be smaller than T={T}")
    k = p - l + 1 if l < p else 0
    right = T - k - l
    out = np.concatenate([np.zeros(k), values, np.zeros(right)])
    mask = np.concatenate([np.ones(k), np.zeros(l), np.ones(right)]).astype(np.int8)
    return ExampleWindow(out, mask)


def pad_history(values, p: int) -> ExampleWindow:
    """Left pad a forecast history to a multiple of ``p`` (no right padding)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape[0] == 0:
        raise ContractError("history must not be empty")
    k = (-values.shape[0]) % p
    mask = np.concatenate([np.ones(k), np.zeros(values.shape[0])]).astype(np.int8)
    return ExampleWindow(np.concatenate([np.zeros(k), values]), mask)


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # (n_patches, p)
    patch_masks: np.ndarray  # (n_patches, p), 1 = padded
    right_incomplete: np.ndarray  # (n_patches,) bool, last mask entry of the patch
    eligible: np.ndarray  # (n_patches,) bool
    length: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    def unpatch(self) -> ExampleWindow:
        return ExampleWindow(
            self.patches.reshape(-1)[: self.length], self.patch_masks.reshape(-1)[: self.length]
        )


def patchify(w: ExampleWindow, p: int) -> PatchGrid:
    if p < 1:
        raise ContractError("patch length must be >= 1")
    n = math.ceil(len(w) / p)
    extra = n * p - len(w)
    values = np.concatenate([w.values, np.zeros(extra)]).reshape(n, p)
    masks = np.concatenate([w.mask, np.ones(extra, dtype=np.int8)]).reshape(n, p)
    right_incomplete = masks[:, -1] == 1
    eligible = ~right_incomplete & (masks == 0).any(axis=1)
    return PatchGrid(values, masks, right_incomplete, eligible, len(w))


@dataclass(frozen=True)
class Context:
    """In-context examples followed by the target (the last window)."""

    windows: tuple[ExampleWindow, ...]

    def __init__(self, windows: Sequence[ExampleWindow]):
        object.__setattr__(self, "windows", tuple(windows))

    @property
    def target(self) -> ExampleWindow:
        return self.windows[-1]

    def __len__(self) -> int:
        return len(self.windows)


@dataclass(frozen=True)
class ContextLayout:
    """Flat token stream of a context.

    Token arrays are indexed by stream position.  ``example_id`` is the index of
    the example a token belongs to (separators belong to the example they
    close); ``patch_index`` is the 0-based patch number, or -1 for separators.
    """

    mode: str
    p: int
    spans: tuple[tuple[int, int], ...]  # patch tokens of example i: [start, stop)
    separator_positions: tuple[int, ...]
    patches: np.ndarray  # (N, p), separators zero
    patch_masks: np.ndarray  # (N, p), separators zero
    is_separator: np.ndarray  # (N,) bool
    eligible: np.ndarray  # (N,) bool
    example_id: np.ndarray  # (N,) int
    patch_index: np.ndarray  # (N,) int

    @property
    def n_tokens(self) -> int:
        return self.is_separator.shape[0]

    @property
    def n_examples(self) -> int:
        return len(self.spans)

    @property
    def n_patch_tokens(self) -> int:
        return int((~self.is_separator).sum())

    def last_eligible_of(self, i: int) -> int:
        start, stop = self.spans[i]
        idx = np.flatnonzero(self.eligible[start:stop])
        if idx.size == 0:
            raise ContractError(f"example {i} has no attention-eligible patch")
        return start + int(idx[-1])


def layout_context(windows: Sequence[ExampleWindow], p: int, mode: str = INFER, n_max: int | None = None) -> ContextLayout:
    if mode not in (TRAIN, INFER):
        raise ContractError(f"mode must be {TRAIN!r} or {INFER!r}, got {mode!r}")
    n = len(windows)
    if n == 0:
        raise ContractError("context must contain at least one example")
    if n_max is not None and n > n_max:
        raise CapacityError(f"context has {n} examples, capacity is n_max={n_max}")

    patches, masks, is_sep, eligible, ex_id, pidx = [], [], [], [], [], []
    spans, seps = [], []
    pos = 0
    for i, w in enumerate(windows):
        grid = patchify(w, p)
        k = grid.n_patches
        spans.append((pos, pos + k))
        patches.append(grid.patches)
        masks.append(grid.patch_masks)
        is_sep.append(np.zeros(k, dtype=bool))
        eligible.append(grid.eligible)
        ex_id.append(np.full(k, i))
        pidx.append(np.arange(k))
        pos += k
        if mode == TRAIN or i < n - 1:
            seps.append(pos)
            patches.append(np.zeros((1, p)))
            masks.append(np.zeros((1, p), dtype=np.int8))
            is_sep.append(np.ones(1, dtype=bool))
            eligible.append(np.ones(1, dtype=bool))
            ex_id.append(np.full(1, i))
            pidx.append(np.full(1, -1))
            pos += 1

    return ContextLayout(
        mode=mode,
        p=p,
        spans=tuple(spans),
        separator_positions=tuple(seps),
        patches=np.concatenate(patches),
        patch_masks=np.concatenate(masks),
        is_separator=np.concatenate(is_sep),
        eligible=np.concatenate(eligible),
        example_id=np.concatenate(ex_id),
        patch_index=np.concatenate(pidx),
    )
