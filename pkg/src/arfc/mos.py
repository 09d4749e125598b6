"""Mixture of Solutions: attention over K dropout views of the compressed feature."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .arc import ArcModel, LossParts, arc_generate, staged_loss
from .decoderpool import DecoderPool, evenly_spaced_rates
from .numkit import (
    LayerParams,
    Rng,
    Tensor,
    as_tensor,
    block_param_count,
    concat,
    dropout,
    init_block,
    no_grad,
    transformer_block,
)


@dataclass(frozen=True)
class MosConfig:
    K: int = 5
    L: int = 2
    heads: int = 4
    ffn_mult: int = 4
    use_pos: bool = True

    def __post_init__(self):
        if self.K < 1 or self.L < 1:
            raise ValueError("K and L must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


class MosModel:
    def __init__(self, config: MosConfig, D: int, rng: Rng):
        if D % config.heads:
            raise ValueError(f"D={D} not divisible by {config.heads} heads")
        self.config = config
        self.D = D
        self.params = LayerParams()
        self.params.add("token", 0.02 * rng.fold(0).normal(D))
        if config.use_pos:
            self.params.add("pos_emb", 0.02 * rng.fold(1).normal((2 * config.K + 1, D)))
        for i in range(config.L):
            init_block(self.params, f"blocks.{i}", D, config.ffn_mult, rng.fold(100 + i))
        self._blocks = [self.params.scope(f"blocks.{i}") for i in range(config.L)]


def mos_param_count(c: MosConfig, D: int) -> int:
    n = D + (2 * c.K + 1) * D * c.use_pos
    return n + c.L * block_param_count(D, c.ffn_mult)


def make_solutions(f_cmp, K: int, rng: Rng | None, train: bool = True, rates=None) -> Tensor:
    """Stack K dropout views of ``f_cmp`` (B, D) into a (B, K, D) solution matrix."""
    f_cmp = as_tensor(f_cmp)
    if K < 1:
        raise ValueError("K must be at least 1")
    single = f_cmp.ndim == 1
    if single:
        f_cmp = f_cmp.reshape(1, -1)
    B, D = f_cmp.shape
    rates = evenly_spaced_rates(K) if rates is None else np.asarray(rates, dtype=float)
    if rates.shape != (K,):
        raise ValueError("need one dropout rate per solution")
    tiled = f_cmp.reshape(B, 1, D) * Tensor(np.ones((1, K, 1)))
    S = dropout(tiled, rates.reshape(K, 1), rng, train)
    return S[0] if single else S


def mos_refine(model: MosModel, S) -> Tensor:
    """Refined feature: the compression token's state after the last block.

    Block input is ``[S ; previous block's solution slots ; token]`` (length
    2K+1) with full self-attention; the solution slots and the token slot of
    the output are carried into the next block.
    """
    S = as_tensor(S)
    single = S.ndim == 2
    if single:
        S = S.reshape(1, *S.shape)
    B, K, D = S.shape
    c = model.config
    if K != c.K or D != model.D:
        raise ValueError(f"solution matrix {S.shape[1:]} does not match K={c.K}, D={model.D}")
    p = model.params
    token = p["token"].reshape(1, 1, D) * Tensor(np.ones((B, 1, 1)))
    prev = S
    for bp in model._blocks:
        x = concat([S, prev, token], axis=1)
        if c.use_pos:
            x = x + p["pos_emb"]
        y = transformer_block(x, bp, c.heads, causal=False)
        prev = y[:, K : 2 * K, :]
        token = y[:, 2 * K :, :]
    out = token.reshape(B, D)
    return out[0] if single else out


def compute_fcmp(arc: ArcModel, batch) -> np.ndarray:
    """Full-length ARC code with no graph recorded."""
    with no_grad():
        return arc_generate(arc, batch, arc.config.T, train=False).data


def mos_forward_loss(
    arc: ArcModel,
    mos: MosModel,
    batch,
    ratios,
    pool: DecoderPool,
    lam: float,
    rng: Rng | None,
    f_cmp: np.ndarray | None = None,
    train: bool = True,
    backward: bool = True,
) -> LossParts:
    """Stage-2 objective: refine the frozen ARC code with MoS, then the staged loss."""
    if any(arc.params[n].requires_grad for n in arc.params):
        raise AssertionError("ARC parameters must be frozen during MoS training")
    f_ori = np.asarray(batch, dtype=float)
    if f_cmp is None:
        f_cmp = compute_fcmp(arc, f_ori)
    S = make_solutions(f_cmp, mos.config.K, rng.fold(0) if rng is not None else None, train)
    f_star = mos_refine(mos, S)
    parts = staged_loss(f_ori, f_star, ratios, pool, lam, rng.fold(1) if rng is not None else None, train)
    if backward:
        parts.total.backward()
    return parts


def freeze(params: LayerParams, frozen: bool = True) -> None:
    for n in params:
        params[n].requires_grad = not frozen
