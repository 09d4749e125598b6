"""Neural-network layers built on :mod:`arfc.numkit.tensor`.

Layers are plain functions over a :class:`LayerParams` mapping; models own the
mapping and hand scoped views to the layer functions.
"""

from __future__ import annotations

import math
from collections.abc import Mapping

import numpy as np

from .rng import Rng
from .tensor import Tensor, _make, add, as_tensor, concat, linear, matmul, mul

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class LayerParams(Mapping):
    """Dot-path -> Tensor map with sorted iteration."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __iter__(self):
        return iter(sorted(self._t))

    def __len__(self) -> int:
        return len(self._t)

    def __contains__(self, name) -> bool:
        return name in self._t

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter path {name!r}")
        t = Tensor(value, requires_grad=requires_grad)
        self._t[name] = t
        return t

    def scope(self, prefix: str) -> "LayerParams":
        """View of the parameters under ``prefix.`` with the prefix stripped."""
        head = prefix + "."
        return LayerParams({k[len(head):]: v for k, v in self._t.items() if k.startswith(head)})

    def merged(self, other: "LayerParams", prefix: str) -> None:
        for name, t in other._t.items():
            full = f"{prefix}.{name}"
            if full in self._t:
                raise KeyError(f"duplicate parameter path {full!r}")
            self._t[full] = t

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.data.size for t in self._t.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: self._t[k].data.copy() for k in self}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._t) ^ set(state)
        if missing:
            raise KeyError(f"parameter set mismatch: {sorted(missing)[:5]}")
        for k, arr in state.items():
            t = self._t[k]
            arr = np.asarray(arr, dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()


# ---------------------------------------------------------------- initialisers


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * limit


def init_linear(params: LayerParams, name: str, n_in: int, n_out: int, rng: Rng) -> None:
    params.add(f"{name}.w", xavier_uniform(rng, n_in, n_out))
    params.add(f"{name}.b", np.zeros(n_out))


def init_layer_norm(params: LayerParams, name: str, width: int) -> None:
    params.add(f"{name}.g", np.ones(width))
    params.add(f"{name}.b", np.zeros(width))


def init_block(params: LayerParams, prefix: str, width: int, ffn_mult: int, rng: Rng) -> None:
    """Pre-norm transformer block parameters under ``prefix``."""
    init_layer_norm(params, f"{prefix}.ln1", width)
    for i, proj in enumerate(("q", "k", "v", "o")):
        init_linear(params, f"{prefix}.attn.{proj}", width, width, rng.fold(i))
    init_layer_norm(params, f"{prefix}.ln2", width)
    init_linear(params, f"{prefix}.ffn.fc1", width, ffn_mult * width, rng.fold(4))
    init_linear(params, f"{prefix}.ffn.fc2", ffn_mult * width, width, rng.fold(5))


def block_param_count(width: int, ffn_mult: int) -> int:
    hidden = ffn_mult * width
    return 2 * width + 4 * (width * width + width) + 2 * width + (width * hidden + hidden) + (hidden * width + width)


# ---------------------------------------------------------------- activations


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable, bool) marks allowed entries."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError("layer_norm gain/bias must match the last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, n).sum(axis=0) if gain.requires_grad else None
        gb = g.reshape(-1, n).sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return _make(out, (x,), backward, "gelu")


def dropout(x: Tensor, rate, rng: Rng | None, train: bool) -> Tensor:
    """Inverted dropout. ``rate`` may be an array broadcastable against ``x``."""
    x = as_tensor(x)
    rate_arr = np.asarray(rate, dtype=float)
    if np.any(rate_arr >= 1.0) or np.any(rate_arr < 0.0):
        raise ValueError("dropout rate must lie in [0, 1)")
    if not train or not np.any(rate_arr > 0.0):
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an Rng")
    keep = rng.uniform(x.shape) >= rate_arr
    scale = keep / (1.0 - rate_arr)
    return mul(x, scale)


# ---------------------------------------------------------------- attention


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, w = x.shape
    dk = w // heads

    def backward(g):
        return (np.swapaxes(g, -2, -3).reshape(x.shape),)

    data = np.swapaxes(x.data.reshape(*lead, s, heads, dk), -2, -3)
    return _make(data, (x,), backward, "split_heads")


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dk = x.shape

    def backward(g):
        return (np.swapaxes(g.reshape(*lead, s, h, dk), -2, -3),)

    data = np.swapaxes(x.data, -2, -3).reshape(*lead, s, h * dk)
    return _make(data, (x,), backward, "merge_heads")


def causal_mask(s: int) -> np.ndarray:
    return np.tril(np.ones((s, s), dtype=bool))


def _project_heads(x: Tensor, params: LayerParams, heads: int) -> tuple[Tensor, Tensor, Tensor]:
    q = _split_heads(linear(x, params["q.w"], params["q.b"]), heads)
    k = _split_heads(linear(x, params["k.w"], params["k.b"]), heads)
    v = _split_heads(linear(x, params["v.w"], params["v.b"]), heads)
    return q, k, v


def _attend(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: LayerParams,
    mask: np.ndarray | None,
    rng: Rng | None,
    attn_dropout: float,
    train: bool,
) -> Tensor:
    scores = matmul(mul(q, 1.0 / math.sqrt(q.shape[-1])), _swap_last(k))
    attn = dropout(softmax_lastdim(scores, mask), attn_dropout, rng, train)
    return linear(_merge_heads(matmul(attn, v)), params["o.w"], params["o.b"])


def mhsa(
    x: Tensor,
    params: LayerParams,
    heads: int,
    causal: bool = False,
    rng: Rng | None = None,
    attn_dropout: float = 0.0,
    train: bool = False,
) -> Tensor:
    """Multi-head scaled dot-product self-attention over the second-to-last axis."""
    return mhsa_cached(x, params, heads, causal, rng, attn_dropout, train)[0]


def mhsa_cached(
    x: Tensor,
    params: LayerParams,
    heads: int,
    causal: bool = False,
    rng: Rng | None = None,
    attn_dropout: float = 0.0,
    train: bool = False,
    past: tuple[Tensor, Tensor] | None = None,
) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Self-attention for new positions ``x`` given keys/values of earlier positions.

    With ``causal`` the new positions come after everything in ``past`` and
    attend only to themselves and earlier positions. Returns the output and
    the keys/values over all positions seen so far.
    """
    width = x.shape[-1]
    if width % heads:
        raise ValueError(f"width {width} not divisible by {heads} heads")
    q, k, v = _project_heads(x, params, heads)
    n_past = 0
    if past is not None:
        n_past = past[0].shape[-2]
        k = concat([past[0], k], axis=-2)
        v = concat([past[1], v], axis=-2)
    mask = None
    s = x.shape[-2]
    if causal and s > 1:
        mask = np.tril(np.ones((s, n_past + s), dtype=bool), k=n_past)
    return _attend(q, k, v, params, mask, rng, attn_dropout, train), (k, v)


def _swap_last(x: Tensor) -> Tensor:
    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(x.data, -1, -2), (x,), backward, "swap_last")


def ffn(x: Tensor, params: LayerParams) -> Tensor:
    h = gelu(linear(x, params["fc1.w"], params["fc1.b"]))
    return linear(h, params["fc2.w"], params["fc2.b"])


def transformer_block(
    x: Tensor,
    params: LayerParams,
    heads: int,
    causal: bool,
    rng: Rng | None = None,
    attn_dropout: float = 0.0,
    train: bool = False,
) -> Tensor:
    """Pre-norm block: ``x + MHSA(LN(x))`` then ``+ FFN(LN(.))``."""
    return transformer_block_cached(x, params, heads, causal, rng, attn_dropout, train)[0]


def transformer_block_cached(
    x: Tensor,
    params: LayerParams,
    heads: int,
    causal: bool,
    rng: Rng | None = None,
    attn_dropout: float = 0.0,
    train: bool = False,
    past: tuple[Tensor, Tensor] | None = None,
) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """:func:`transformer_block` over new positions, reusing earlier keys/values."""
    h = layer_norm(x, params["ln1.g"], params["ln1.b"])
    attn, kv = mhsa_cached(h, params.scope("attn"), heads, causal, rng, attn_dropout, train, past)
    x = add(x, attn)
    h = layer_norm(x, params["ln2.g"], params["ln2.b"])
    return add(x, ffn(h, params.scope("ffn"))), kv


__all__ = [
    "LayerParams",
    "block_param_count",
    "causal_mask",
    "concat",
    "dropout",
    "ffn",
    "gelu",
    "init_block",
    "init_layer_norm",
    "init_linear",
    "layer_norm",
    "mhsa",
    "mhsa_cached",
    "softmax_lastdim",
    "transformer_block",
    "transformer_block_cached",
    "xavier_uniform",
]
