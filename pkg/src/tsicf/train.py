"""Masked per-context MSE, Adam with warmup/inverse-sqrt schedule, training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .checkpoint import read_checkpoint, save_checkpoint, write_atomic
from .errors import CheckpointError, ContractError, NumericError, ShapeError
from .model import SEPARATOR, ModelConfig, ModelParams, check_capacity, forward_tokens, init_param, stack_layouts, standardize
from .tensor import Tensor
from .tokenize import TRAIN, Context, ContextLayout, layout_context, pad_example

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "context_loss",
    "layout_loss",
    "loss_targets",
    "lr_schedule",
    "train_step",
    "make_training_context",
    "save_training_state",
    "load_training_state",
    "train",
]

log = logging.getLogger(__name__)

LOSS_MASK_POLICY = "padded_and_beyond_end"
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-9


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    steps: int = 5000
    peak_lr: float = 5e-4
    warmup: int = 500
    seed: int = 0
    clip_norm: float = 1.0
    loss_mask: str = LOSS_MASK_POLICY
    n_examples: int = 12  # examples per training context
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ContractError("peak_lr must be > 0")
        if self.warmup < 1:
            raise ContractError("warmup must be >= 1")
        if self.batch_size < 1 or self.steps < 0:
            raise ContractError("batch_size must be >= 1 and steps >= 0")
        if self.loss_mask != LOSS_MASK_POLICY:
            raise ContractError(f"unsupported loss_mask policy {self.loss_mask!r}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.items()},
            {k: np.zeros_like(a) for k, a in params.items()},
        )


# ---------------------------------------------------------------- loss


def loss_targets(layout: ContextLayout, windows: Sequence, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Targets and target masks (1 = excluded) for every token of ``layout``.

    Patch ``j`` (0-based) of example ``i`` is scored on the ``h`` points that
    follow it.  Points that are padded or past the end of the example are
    excluded; separator rows are fully excluded.
    """
    N = layout.n_tokens
    targets = np.zeros((N, h))
    mask = np.ones((N, h), dtype=np.int8)
    p = layout.p
    for i, (start, stop) in enumerate(layout.spans):
        w = windows[i]
        T_i = len(w)
        for j in range(stop - start):
            idx = np.arange(p * (j + 1), p * (j + 1) + h)
            inside = idx < T_i
            targets[start + j, inside] = w.values[idx[inside]]
            mask[start + j, inside] = w.mask[idx[inside]]
    return targets, mask


def context_loss(predictions, targets, masks):
    """Sum of masked squared errors divided by the number of patch rows.

    ``predictions`` may be an array or a :class:`Tensor`; in the latter case the
    result is a scalar Tensor that can be differentiated.
    """
    targets = np.asarray(targets, dtype=np.float64)
    masks = np.asarray(masks)
    pshape = predictions.shape
    if pshape != targets.shape or pshape != masks.shape or len(pshape) != 2:
        raise ShapeError(f"context_loss: predictions {pshape}, targets {targets.shape}, masks {masks.shape}")
    keep = (masks == 0).astype(np.float64) / pshape[0]
    if isinstance(predictions, Tensor):
        diff = tn.sub(predictions, targets)
        return tn.sum_(tn.mul(tn.mul(diff, diff), keep))
    diff = np.asarray(predictions, dtype=np.float64) - targets
    return float((diff * diff * keep).sum())


def layout_loss(layout: ContextLayout, windows: Sequence, predictions) -> float:
    """Loss of one context from its full (N, h) per-token predictions."""
    targets, masks = loss_targets(layout, windows, np.shape(predictions)[-1])
    rows = ~layout.is_separator
    return context_loss(np.asarray(predictions)[rows], targets[rows], masks[rows])


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    if step < 1:
        raise ContractError("step must be >= 1")
    return cfg.peak_lr * min(step / cfg.warmup, math.sqrt(cfg.warmup / step))


# ---------------------------------------------------------------- batches


def make_training_context(raw: Sequence[np.ndarray], cfg: ModelConfig) -> Context:
    """Pad raw example series to ``T_max`` and standardize each one."""
    return Context([standardize(pad_example(r, cfg.T_max, cfg.p))[0] for r in raw])


@dataclass
class _Batch:
    layouts: list[ContextLayout]
    targets: np.ndarray  # (B, N, h)
    keep: np.ndarray  # (B, N, h) per-context loss weights, already divided by patch count


def _build_batch(batch: Sequence[Context], cfg: ModelConfig) -> _Batch:
    layouts, tg, km = [], [], []
    for ctx in batch:
        check_capacity(ctx.windows, cfg)
        layout = layout_context(ctx.windows, cfg.p, TRAIN, cfg.n_max)
        t, m = loss_targets(layout, ctx.windows, cfg.h)
        keep = (m == 0) & ~layout.is_separator[:, None]
        layouts.append(layout)
        tg.append(t)
        km.append(keep / layout.n_patch_tokens)
    N = max(l.n_tokens for l in layouts)
    B = len(batch)
    targets = np.zeros((B, N, cfg.h))
    keep = np.zeros((B, N, cfg.h))
    for b in range(B):
        n = layouts[b].n_tokens
        targets[b, :n] = tg[b]
        keep[b, :n] = km[b]
    return _Batch(layouts, targets, keep)


def _loss_and_grads(batch: Sequence[Context], params: ModelParams, cfg: ModelConfig):
    prepared = _build_batch(batch, cfg)
    tb = stack_layouts(prepared.layouts)
    weights = params.tensors(requires_grad=True)
    with tn.Tape() as tape:
        pred = forward_tokens(tb.patches, tb.patch_masks, tb.is_separator, tb.allowed, weights, cfg)
        diff = tn.sub(pred, prepared.targets)
        loss = tn.sum_(tn.mul(tn.mul(diff, diff), prepared.keep / len(batch)))
    per_context = (((pred.data - prepared.targets) ** 2) * prepared.keep).sum(axis=(1, 2))
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in weights.items()}
    return float(loss.data), per_context, grads


def train_step(
    batch: Sequence[Context],
    params: ModelParams,
    opt: OptimizerState,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
) -> tuple[ModelParams, OptimizerState, float]:
    """One Adam step on the mean per-context loss; updates ``params`` in place."""
    if not batch:
        raise ContractError("batch must not be empty")
    step = opt.step + 1
    loss, per_context, grads = _loss_and_grads(batch, params, model_cfg)
    if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
        bad = [int(i) for i in np.flatnonzero(~np.isfinite(per_context))]
        raise NumericError(f"non-finite loss at step {step}; offending contexts {bad or 'unknown'}")

    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > cfg.clip_norm:
        factor = cfg.clip_norm / norm
        grads = {k: g * factor for k, g in grads.items()}

    lr = lr_schedule(step, cfg)
    c1 = 1.0 - BETA1**step
    c2 = 1.0 - BETA2**step
    for name, g in grads.items():
        m = opt.m[name]
        v = opt.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    opt.step = step
    return params, opt, loss


# ---------------------------------------------------------------- state on disk


def save_training_state(path, params: ModelParams, cfg: ModelConfig, opt: OptimizerState, meta: dict | None = None, drop_separator: bool = False):
    """Checkpoint with optimizer moments; ``drop_separator`` writes a base model."""
    arrays = {k: v for k, v in params.items() if not (drop_separator and k == SEPARATOR)}
    extra = {}
    for k in arrays:
        extra[f"opt.m.{k}"] = opt.m[k]
        extra[f"opt.v.{k}"] = opt.v[k]
    info = {"step": str(opt.step), **{k: str(v) for k, v in (meta or {}).items()}}
    return save_checkpoint(ModelParams(arrays), cfg, path, extra=extra, meta=info)


def load_training_state(path) -> tuple[ModelParams, ModelConfig, OptimizerState, dict[str, str]]:
    tensors, cfg, meta = read_checkpoint(path)
    params = ModelParams()
    m, v = {}, {}
    for name, shape in cfg.param_shapes().items():
        if name == SEPARATOR and name not in tensors:
            # base-model state: separator was never trained
            params[name] = init_param(name, shape, np.random.default_rng(0))
            m[name] = np.zeros(shape)
            v[name] = np.zeros(shape)
            continue
        for store, prefix in ((m, "opt.m."), (v, "opt.v.")):
            if prefix + name not in tensors or name not in tensors:
                raise CheckpointError(f"training state {path} lacks {prefix + name}")
            store[name] = tensors[prefix + name].copy()
        if tensors[name].shape != shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {tensors[name].shape} != config shape {shape}")
        params[name] = tensors[name].copy()
    try:
        step = int(meta["step"])
    except (KeyError, ValueError):
        raise CheckpointError(f"training state {path} has no valid meta.step") from None
    return params, cfg, OptimizerState(m, v, step), meta


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    params: ModelParams
    opt: OptimizerState
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, loss)


def _read_metrics(path: Path, upto: int) -> list[tuple[int, float, float]]:
    if not path.exists():
        return []
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            step = int(row["step"])
            if step <= upto:
                rows.append((step, float(row["lr"]), float(row["loss"])))
    return rows


def _write_metrics(path: Path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr", "loss"])
    for step, lr, loss in rows:
        w.writerow([step, repr(lr), repr(loss)])
    write_atomic(path, buf.getvalue().encode())


def train(
    params: ModelParams,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    draw_batch: Callable[[int], list[Context]],
    opt: OptimizerState | None = None,
    checkpoint_path=None,
    metrics_path=None,
    stop_after: int | None = None,
    base_model: bool = False,
    meta: dict | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run steps ``opt.step + 1 .. cfg.steps``.

    ``draw_batch(step)`` must be a pure function of the step so that a run
    resumed from a checkpoint sees exactly the batches of an uninterrupted one.
    ``stop_after`` ends the run early after that step (simulates interruption).
    """
    opt = opt or OptimizerState.zeros_like(params)
    metrics_path = Path(metrics_path) if metrics_path else None
    rows = _read_metrics(metrics_path, opt.step) if metrics_path else []
    result = TrainResult(params, opt, rows)
    last = cfg.steps if stop_after is None else min(cfg.steps, stop_after)

    def checkpoint():
        if checkpoint_path is not None:
            save_training_state(checkpoint_path, params, model_cfg, opt, meta, drop_separator=base_model)
        if metrics_path is not None:
            _write_metrics(metrics_path, result.history)

    while opt.step < last:
        step = opt.step + 1
        batch = draw_batch(step)
        try:
            _, _, loss = train_step(batch, params, opt, cfg, model_cfg)
        except NumericError:
            log.error("aborting at step %d; last good checkpoint kept", step)
            raise
        result.history.append((step, lr_schedule(step, cfg), loss))
        if progress is not None:
            progress(step, loss)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint()
    checkpoint()
    return result
