"""Feature <-> token layout and prefix truncation of compressed codes."""

from __future__ import annotations

import math

import numpy as np

# guards floor(T * (1 - r)) against representation error for on-grid ratios
_GRID_EPS = 1e-9


def tokenize(f, T: int) -> np.ndarray:
    """Split the last axis of ``f`` (length D) into ``T`` contiguous tokens of size D/T.

    Returns an array of shape ``(..., T, D // T)``.
    """
    f = np.asarray(f)
    D = f.shape[-1]
    if T < 1 or D % T:
        raise ValueError(f"feature length {D} is not divisible by token count {T}")
    return f.reshape(*f.shape[:-1], T, D // T)


def detokenize(tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    return tokens.reshape(*tokens.shape[:-2], tokens.shape[-2] * tokens.shape[-1])


def ratio_to_token_count(r: float, T: int) -> int:
    """Tokens retained at compression ratio ``r``: floor(T(1-r)) clamped to [1, T]."""
    if not 0.0 <= r < 1.0:
        raise ValueError(f"compression ratio must lie in [0, 1), got {r}")
    n = math.floor(T * (1.0 - r) + _GRID_EPS)
    return min(max(n, 1), T)


def snap_ratio(r: float, T: int) -> float:
    """Grid ratio that actually gets retained for ``r``."""
    return (T - ratio_to_token_count(r, T)) / T


def ratio_grid(T: int) -> list[float]:
    """All trainable ratios ``j/T`` for j = 0..T-1."""
    return [j / T for j in range(T)]


def truncate(f_cmp, r: float, T: int):
    """Prefix of the compressed feature kept at ratio ``r``.

    Works on numpy arrays and on :class:`arfc.numkit.Tensor` (gradient flows
    through the slice). The last axis is the D-length code.
    """
    D = f_cmp.shape[-1]
    if D % T:
        raise ValueError(f"code length {D} is not divisible by token count {T}")
    if not 0.0 <= r < 1.0:
        raise ValueError(f"compression ratio must lie in [0, 1), got {r}")
    if math.floor(T * (1.0 - r) + _GRID_EPS) < 1:
        raise ValueError(f"ratio {r} leaves no whole token out of {T}")
    n = ratio_to_token_count(r, T)
    return f_cmp[..., : n * (D // T)]
