from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .nn import LayerParams


class MissingGradError(KeyError):
    pass


class AdamW:
    """Adam with decoupled weight decay.

    Moment buffers and bias-correction step counts are kept per parameter
    path, so parameters that are only updated on some steps (routed decoder
    clusters) see the same trajectory they would if trained alone.
    """

    def __init__(
        self,
        params: LayerParams,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, names: Iterable[str] | None = None) -> None:
        names = sorted(self.params if names is None else names)
        b1, b2 = self.betas
        for name in names:
            p = self.params[name]
            if p.grad is None:
                raise MissingGradError(name)
            t = self.t.get(name, 0) + 1
            self.t[name] = t
            m = self.m.get(name)
            v = self.v.get(name)
            g = p.grad
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p.data = p.data * (1 - self.lr * self.weight_decay) - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        """Flat array map for checkpointing (``m.<path>``, ``v.<path>``, ``t.<path>``)."""
        out: dict[str, np.ndarray] = {}
        for name in sorted(self.t):
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
            out[f"t.{name}"] = np.array([self.t[name]], dtype=float)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.m, self.v, self.t = {}, {}, {}
        for key, arr in state.items():
            kind, name = key.split(".", 1)
            if kind == "m":
                self.m[name] = np.array(arr, dtype=float)
            elif kind == "v":
                self.v[name] = np.array(arr, dtype=float)
            elif kind == "t":
                self.t[name] = int(np.asarray(arr).ravel()[0])


def sgd_adamw_step(
    params: LayerParams,
    grads: dict[str, np.ndarray],
    lr: float = 1e-3,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    step: int = 1,
    state: dict[str, dict[str, np.ndarray]] | None = None,
    eps: float = 1e-8,
) -> None:
    """Functional AdamW update of every parameter in ``params``.

    ``state`` holds ``{"m": ..., "v": ...}`` buffers across calls; ``step``
    is the 1-based bias-correction step.
    """
    if state is None:
        state = {"m": {}, "v": {}}
    b1, b2 = betas
    for name in params:
        if name not in grads:
            raise MissingGradError(name)
        g = grads[name]
        p = params[name]
        m = b1 * state["m"].get(name, 0.0) + (1 - b1) * g
        v = b2 * state["v"].get(name, 0.0) + (1 - b2) * g * g
        state["m"][name], state["v"][name] = m, v
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        p.data = p.data * (1 - lr * weight_decay) - lr * mhat / (np.sqrt(vhat) + eps)


def clip_grad_norm(params: LayerParams, names: Iterable[str], max_norm: float) -> float:
    """Scale gradients of ``names`` in place so their global L2 norm is <= ``max_norm``."""
    names = list(names)
    total = float(np.sqrt(sum(float(np.sum(params[n].grad ** 2)) for n in names if params[n].grad is not None)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for n in names:
            if params[n].grad is not None:
                params[n].grad = params[n].grad * scale
    return total
