"""Entity relation graphs: batch cosine-similarity matrices and their mismatch penalty."""

from __future__ import annotations

import numpy as np

from .numkit import Tensor, as_tensor, div, matmul, sqrt, sub, tsum
from .numkit.tensor import swapaxes


def build_graph(batch) -> Tensor:
    """B x B cosine-similarity matrix of the rows of ``batch`` (differentiable)."""
    x = as_tensor(batch)
    if x.ndim != 2:
        raise ValueError("build_graph expects a (B, n) batch")
    if x.shape[0] < 2:
        raise ValueError("a relation graph needs at least two entities")
    norms = sqrt(tsum(x * x, axis=1, keepdims=True))
    if np.any(norms.data == 0.0):
        raise ValueError("zero-norm vector in relation graph batch")
    xn = div(x, norms)
    return matmul(xn, swapaxes(xn, 0, 1))


def ergc_loss(g_ori, g_cmp) -> Tensor:
    """Squared Frobenius distance between two relation graphs."""
    g_ori, g_cmp = as_tensor(g_ori), as_tensor(g_cmp)
    if g_ori.shape != g_cmp.shape:
        raise ValueError(f"graph size mismatch: {g_ori.shape} vs {g_cmp.shape}")
    diff = sub(g_ori, g_cmp)
    return tsum(diff * diff)


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    """Plain-numpy cosine matrix used by the evaluation code."""
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("zero-norm vector")
    xn = x / n
    return xn @ xn.T


def relation_score(original, compressed) -> dict[str, float]:
    """How well ``compressed`` keeps the pairwise cosine structure of ``original``.

    ``relation_err`` is the mean absolute difference over off-diagonal entries;
    ``sim_ori`` / ``sim_cmp`` are each graph's mean off-diagonal similarity.
    """
    original = np.asarray(original, dtype=float)
    compressed = np.asarray(compressed, dtype=float)
    if original.shape[0] != compressed.shape[0]:
        raise ValueError("batches are not aligned")
    e_ori = cosine_matrix(original)
    e_cmp = cosine_matrix(compressed)
    off = ~np.eye(len(original), dtype=bool)
    return {
        "relation_err": float(np.abs(e_ori - e_cmp)[off].mean()),
        "sim_ori": float(e_ori[off].mean()),
        "sim_cmp": float(e_cmp[off].mean()),
    }
