"""Decoder-only patch transformer that conditions on in-context example series.

Each patch is embedded by a shared residual MLP, a single learnable separator
vector fills the slot after every example, and a stack of pre-norm causal
self-attention blocks (no positional encodings) maps tokens to outputs that a
second residual MLP turns into the next ``h`` points.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as tn
from .errors import CapacityError, ContractError
from .tensor import Tensor
from .tokenize import INFER, Context, ContextLayout, ExampleWindow, layout_context, pad_example, pad_history

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Forecast",
    "init_params",
    "embed_tokens",
    "build_attention_mask",
    "forward",
    "forward_history",
    "forward_batch",
    "stack_layouts",
    "standardize",
    "forecast",
    "forecast_layout",
    "check_capacity",
    "STD_FLOOR",
]

STD_FLOOR = 1e-6
SEPARATOR = "separator"
ACTIVATIONS = {"relu": tn.relu, "gelu": tn.gelu}


@dataclass(frozen=True)
class ModelConfig:
    p: int = 8
    h: int = 16
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 64
    T_max: int = 80
    n_max: int = 16
    activation: str = "relu"

    def __post_init__(self):
        if self.p < 1 or self.h < 1:
            raise ContractError("p and h must be >= 1")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.T_max <= self.p:
            raise ContractError("T_max must exceed p")
        if self.n_max < 1:
            raise ContractError("n_max must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, p, h, f = self.d_model, self.p, self.h, self.d_ff
        shapes: dict[str, tuple[int, ...]] = {
            "input.hidden.w": (p, d),
            "input.hidden.b": (d,),
            "input.out.w": (d, d),
            "input.out.b": (d,),
            "input.skip.w": (p, d),
            "input.skip.b": (d,),
        }
        for i in range(self.n_layers):
            pre = f"layers.{i}."
            shapes.update(
                {
                    pre + "ln1.gain": (d,),
                    pre + "ln1.bias": (d,),
                    pre + "attn.q.w": (d, d),
                    pre + "attn.q.b": (d,),
                    pre + "attn.k.w": (d, d),
                    pre + "attn.k.b": (d,),
                    pre + "attn.v.w": (d, d),
                    pre + "attn.v.b": (d,),
                    pre + "attn.o.w": (d, d),
                    pre + "attn.o.b": (d,),
                    pre + "ln2.gain": (d,),
                    pre + "ln2.bias": (d,),
                    pre + "ffn.w1": (d, f),
                    pre + "ffn.b1": (f,),
                    pre + "ffn.w2": (f, d),
                    pre + "ffn.b2": (d,),
                }
            )
        shapes.update(
            {
                "final_ln.gain": (d,),
                "final_ln.bias": (d,),
                "output.hidden.w": (d, d),
                "output.hidden.b": (d,),
                "output.out.w": (d, h),
                "output.out.b": (h,),
                "output.skip.w": (d, h),
                "output.skip.b": (h,),
                SEPARATOR: (d,),
            }
        )
        return shapes


@dataclass
class ModelParams:
    """Named float64 weight arrays; insertion order is the canonical order."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def n_weights(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        # Tensors share memory with the arrays, so in-place updates are visible
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_param(name: str, shape, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith((".b", ".bias", ".b1", ".b2")):
        return np.zeros(shape)
    return _trunc_normal(rng, shape, std)


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams({name: init_param(name, shape, rng, std) for name, shape in cfg.param_shapes().items()})


@dataclass(frozen=True)
class Forecast:
    predictions: np.ndarray  # (H,)
    rounds: np.ndarray  # (H,) autoregressive round that produced each point, from 0

    def __len__(self) -> int:
        return self.predictions.shape[0]


# ---------------------------------------------------------------- network pieces


def _residual_block(x, w: Mapping[str, Tensor], prefix: str, act) -> Tensor:
    hidden = act(x @ w[prefix + "hidden.w"] + w[prefix + "hidden.b"])
    out = hidden @ w[prefix + "out.w"] + w[prefix + "out.b"]
    return out + (x @ w[prefix + "skip.w"] + w[prefix + "skip.b"])


def _as_weights(params) -> Mapping[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.tensors()
    return params


def embed_tokens(patches: np.ndarray, patch_masks: np.ndarray, is_separator: np.ndarray, params, cfg: ModelConfig) -> Tensor:
    """Embed patches (padded points zeroed) and put the separator in its slots.

    Accepts a single layout's arrays (N, p) or a batch (B, N, p).
    """
    w = _as_weights(params)
    if patches.shape[-1] != cfg.p or patches.shape != patch_masks.shape or patches.shape[:-1] != is_separator.shape:
        raise ContractError(
            f"token arrays disagree: patches {patches.shape}, masks {patch_masks.shape}, "
            f"separators {is_separator.shape}, p={cfg.p}"
        )
    x = Tensor(np.where(patch_masks == 1, 0.0, patches))
    emb = _residual_block(x, w, "input.", ACTIVATIONS[cfg.activation])
    if not is_separator.any():
        return emb
    if SEPARATOR not in w:
        raise ContractError("context contains separators but params have no separator embedding")
    return tn.where(is_separator[..., None], w[SEPARATOR], emb)


def build_attention_mask(layout: ContextLayout) -> np.ndarray:
    """allowed[q, k]: causal, and key k must be attention-eligible."""
    n = layout.n_tokens
    return np.tril(np.ones((n, n), dtype=bool)) & layout.eligible[None, :]


def _attention(x: Tensor, w, pre: str, allowed: np.ndarray, cfg: ModelConfig) -> Tensor:
    B, N, d = x.shape
    H = cfg.n_heads
    dh = d // H

    def heads(name):
        y = x @ w[pre + name + ".w"] + w[pre + name + ".b"]
        return tn.transpose(tn.reshape(y, (B, N, H, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = tn.scale(q @ tn.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    attn = tn.softmax_lastdim(scores, allowed[:, None, :, :])
    ctx = tn.reshape(tn.transpose(attn @ v, (0, 2, 1, 3)), (B, N, d))
    return ctx @ w[pre + "o.w"] + w[pre + "o.b"]


def _transformer(x: Tensor, w, allowed: np.ndarray, cfg: ModelConfig) -> Tensor:
    act = ACTIVATIONS[cfg.activation]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h1 = tn.layer_norm(x, w[pre + "ln1.gain"], w[pre + "ln1.bias"])
        x = x + _attention(h1, w, pre + "attn.", allowed, cfg)
        h2 = tn.layer_norm(x, w[pre + "ln2.gain"], w[pre + "ln2.bias"])
        ff = act(h2 @ w[pre + "ffn.w1"] + w[pre + "ffn.b1"]) @ w[pre + "ffn.w2"] + w[pre + "ffn.b2"]
        x = x + ff
    return tn.layer_norm(x, w["final_ln.gain"], w["final_ln.bias"])


def forward_tokens(patches, patch_masks, is_separator, allowed, params, cfg: ModelConfig) -> Tensor:
    """Batched core: (B, N, p) token arrays and (B, N, N) mask -> (B, N, h)."""
    w = _as_weights(params)
    x = embed_tokens(patches, patch_masks, is_separator, w, cfg)
    out = _transformer(x, w, allowed, cfg)
    return _residual_block(out, w, "output.", ACTIVATIONS[cfg.activation])


@dataclass(frozen=True)
class TokenBatch:
    patches: np.ndarray  # (B, N, p)
    patch_masks: np.ndarray  # (B, N, p)
    is_separator: np.ndarray  # (B, N)
    allowed: np.ndarray  # (B, N, N)
    n_tokens: tuple[int, ...]


def stack_layouts(layouts: Sequence[ContextLayout]) -> TokenBatch:
    """Stack layouts into one batch; shorter streams get trailing dummy tokens.

    Dummy tokens are fully padded and never attention-eligible, so they are
    invisible to every real token.
    """
    N = max(l.n_tokens for l in layouts)
    p = layouts[0].p
    B = len(layouts)
    patches = np.zeros((B, N, p))
    masks = np.ones((B, N, p), dtype=np.int8)
    is_sep = np.zeros((B, N), dtype=bool)
    allowed = np.zeros((B, N, N), dtype=bool)
    for b, l in enumerate(layouts):
        n = l.n_tokens
        patches[b, :n] = l.patches
        masks[b, :n] = l.patch_masks
        is_sep[b, :n] = l.is_separator
        allowed[b, :n, :n] = build_attention_mask(l)
    return TokenBatch(patches, masks, is_sep, allowed, tuple(l.n_tokens for l in layouts))


def forward_batch(layouts: Sequence[ContextLayout], params, cfg: ModelConfig) -> Tensor:
    tb = stack_layouts(layouts)
    return forward_tokens(tb.patches, tb.patch_masks, tb.is_separator, tb.allowed, params, cfg)


def check_capacity(windows: Sequence[ExampleWindow], cfg: ModelConfig) -> None:
    if len(windows) > cfg.n_max:
        raise CapacityError(f"context has {len(windows)} examples, capacity is n_max={cfg.n_max}")
    for i, w in enumerate(windows):
        if len(w) > cfg.T_max:
            raise CapacityError(f"example {i} has length {len(w)}, capacity is T_max={cfg.T_max}")


def forward(context: Context, params, cfg: ModelConfig, mode: str = INFER) -> tuple[ContextLayout, np.ndarray]:
    """Per-token next-``h`` predictions for one context, shape (N, h)."""
    check_capacity(context.windows, cfg)
    layout = layout_context(context.windows, cfg.p, mode, cfg.n_max)
    out = forward_batch([layout], params, cfg)
    return layout, out.data[0]


def forward_history(history: np.ndarray, params, cfg: ModelConfig) -> np.ndarray:
    """Reference path for a lone history: no layout, no separators.

    The history is left padded to whole patches and every patch attends
    causally to all earlier patches.
    """
    history = np.asarray(history, dtype=np.float64)
    k = (-history.shape[0]) % cfg.p
    values = np.concatenate([np.zeros(k), history])
    mask = np.concatenate([np.ones(k), np.zeros(history.shape[0])]).astype(np.int8)
    n = values.shape[0] // cfg.p
    patches = values.reshape(1, n, cfg.p)
    masks = mask.reshape(1, n, cfg.p)
    allowed = np.tril(np.ones((1, n, n), dtype=bool))
    out = forward_tokens(patches, masks, np.zeros((1, n), dtype=bool), allowed, params, cfg)
    return out.data[0]


# ---------------------------------------------------------------- forecasting


def standardize(window: ExampleWindow) -> tuple[ExampleWindow, float, float]:
    """Shift/scale a window by the mean and std of its own real points."""
    real = window.real_values
    loc = float(real.mean())
    sc = max(float(real.std()), STD_FLOOR)
    return window.with_values((window.values - loc) / sc), loc, sc


def _as_example(x, cfg: ModelConfig) -> ExampleWindow:
    if isinstance(x, ExampleWindow):
        return x
    return pad_example(x, cfg.T_max, cfg.p)


def _inference_context(history: np.ndarray, examples: list[ExampleWindow], cfg: ModelConfig) -> tuple[Context, float, float]:
    keep = (cfg.T_max // cfg.p) * cfg.p
    target, loc, sc = standardize(pad_history(history[-keep:], cfg.p))
    return Context([standardize(w)[0] for w in examples] + [target]), loc, sc


def _forecast_block(history: np.ndarray, examples: list[ExampleWindow], params, cfg: ModelConfig) -> np.ndarray:
    context, loc, sc = _inference_context(history, examples, cfg)
    layout, preds = forward(context, params, cfg, INFER)
    row = layout.last_eligible_of(layout.n_examples - 1)
    return preds[row] * sc + loc


def forecast_layout(history, icl_examples: Sequence, cfg: ModelConfig) -> ContextLayout:
    """Token layout of the first decoding round of :func:`forecast`."""
    history = np.asarray(history, dtype=np.float64).reshape(-1)
    examples = [_as_example(x, cfg) for x in icl_examples]
    check_capacity(examples + [ExampleWindow.real(history[-cfg.T_max:])], cfg)
    context, _, _ = _inference_context(history, examples, cfg)
    return layout_context(context.windows, cfg.p, INFER, cfg.n_max)


def forecast(history, icl_examples: Sequence, H: int, params, cfg: ModelConfig) -> Forecast:
    """Forecast ``H`` points after ``history`` given optional in-context examples.

    Horizons longer than ``h`` are decoded autoregressively: each round's
    prediction is appended to the history as real data.  Only the most recent
    ``T_max`` (rounded down to whole patches) history points are used.
    """
    history = np.asarray(history, dtype=np.float64).reshape(-1)
    if history.shape[0] == 0:
        raise ContractError("history must not be empty")
    if H < 1:
        raise ContractError(f"horizon must be >= 1, got {H}")
    if not np.isfinite(history).all():
        raise ContractError("history contains non-finite values")
    examples = [_as_example(x, cfg) for x in icl_examples]
    check_capacity(examples + [ExampleWindow.real(history[-cfg.T_max:])], cfg)
    if isinstance(params, ModelParams):
        params = params.tensors()

    preds, rounds = [], []
    r = 0
    while sum(len(b) for b in preds) < H:
        block = _forecast_block(history, examples, params, cfg)
        preds.append(block)
        rounds.append(np.full(len(block), r))
        history = np.concatenate([history, block])
        r += 1
    return Forecast(np.concatenate(preds)[:H], np.concatenate(rounds)[:H])
