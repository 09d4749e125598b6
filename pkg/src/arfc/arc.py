"""Arbitrary ratio compressor: a causal transformer generating compressed tokens one by one."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .decoderpool import DecoderPool, reconstruct, reconstruction_losses
from .ergc import build_graph, ergc_loss
from .numkit import (
    LayerParams,
    Rng,
    Tensor,
    block_param_count,
    concat,
    init_block,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    transformer_block,
    transformer_block_cached,
)
from .tokenizer import ratio_to_token_count, tokenize


@dataclass(frozen=True)
class ArcConfig:
    D: int = 64
    T: int = 8
    width: int = 32
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    attn_dropout: float = 0.0
    # "autoregressive" or "parallel" (all tokens at once from register slots; ablation only)
    generation: str = "autoregressive"
    # std of the learned position table at init
    pos_init: float = 0.02
    final_norm: bool = True

    def __post_init__(self):
        if self.D % self.T:
            raise ValueError(f"D={self.D} not divisible by T={self.T}")
        if self.width % self.heads:
            raise ValueError(f"width={self.width} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.generation not in ("autoregressive", "parallel"):
            raise ValueError(f"unknown generation mode {self.generation!r}")

    @property
    def d(self) -> int:
        return self.D // self.T

    def to_dict(self) -> dict:
        return asdict(self)


class ArcModel:
    def __init__(self, config: ArcConfig, rng: Rng):
        self.config = config
        c = config
        self.params = LayerParams()
        init_linear(self.params, "in_proj", c.d, c.width, rng.fold(0))
        init_linear(self.params, "out_proj", c.width, c.d, rng.fold(1))
        self.params.add("pos_emb", c.pos_init * rng.fold(2).normal((2 * c.T, c.width)))
        if c.final_norm:
            init_layer_norm(self.params, "ln_f", c.width)
        if c.generation == "parallel":
            self.params.add("registers", 0.02 * rng.fold(3).normal((c.T, c.width)))
        for i in range(c.layers):
            init_block(self.params, f"blocks.{i}", c.width, c.ffn_mult, rng.fold(100 + i))
        self._blocks = [self.params.scope(f"blocks.{i}") for i in range(c.layers)]

    def param_names(self) -> list[str]:
        return list(self.params)


def arc_param_count(c: ArcConfig) -> int:
    n = (c.d * c.width + c.width) + (c.width * c.d + c.d) + 2 * c.T * c.width
    if c.generation == "parallel":
        n += c.T * c.width
    n += 2 * c.width * c.final_norm
    return n + c.layers * block_param_count(c.width, c.ffn_mult)


def _run_blocks(model: ArcModel, h: Tensor, causal: bool, rng: Rng | None, train: bool) -> Tensor:
    c = model.config
    for i, bp in enumerate(model._blocks):
        brng = rng.fold(i) if rng is not None else None
        h = transformer_block(h, bp, c.heads, causal, brng, c.attn_dropout, train)
    return h


def _emit(model: ArcModel, h: Tensor) -> Tensor:
    p = model.params
    if model.config.final_norm:
        h = layer_norm(h, p["ln_f.g"], p["ln_f.b"])
    return linear(h, p["out_proj.w"], p["out_proj.b"])


def arc_generate(
    model: ArcModel, f, n_tokens: int, train: bool = False, rng: Rng | None = None
) -> Tensor:
    """Generate the first ``n_tokens`` compressed tokens for feature(s) ``f``.

    ``f`` is (D,) or (B, D). Returns a Tensor of shape (..., n_tokens * d).
    Each generated token is the output projection of the last position of the
    causal transformer and is fed back as the next input; the graph spans all
    steps so gradients flow through the whole chain.
    """
    c = model.config
    if not 1 <= n_tokens <= c.T:
        raise ValueError(f"n_tokens must lie in [1, {c.T}], got {n_tokens}")
    f = np.asarray(f, dtype=float)
    single = f.ndim == 1
    if single:
        f = f[None, :]
    if f.shape[-1] != c.D:
        raise ValueError(f"feature length {f.shape[-1]} != D={c.D}")
    if not (train and c.attn_dropout > 0):
        rng = None
    p = model.params
    h_in = linear(Tensor(tokenize(f, c.T)), p["in_proj.w"], p["in_proj.b"])  # (B, T, W)

    if c.generation == "parallel":
        B = f.shape[0]
        regs = p["registers"][:n_tokens]
        seq = concat([h_in, regs.reshape(1, n_tokens, c.width) + Tensor(np.zeros((B, 1, 1)))], axis=1)
        h = seq + p["pos_emb"][: c.T + n_tokens]
        h = _run_blocks(model, h, False, rng, train)
        out = _emit(model, h[:, c.T :, :])
        out = out.reshape(B, n_tokens * c.d)
        return out[0] if single else out

    # Position i's state never depends on later positions, so each step only
    # runs the newest position against cached keys/values of earlier ones.
    x = h_in + p["pos_emb"][: c.T]
    past: list = [None] * c.layers
    generated = []
    for step in range(n_tokens):
        srng = rng.fold(step) if rng is not None else None
        for i, bp in enumerate(model._blocks):
            brng = srng.fold(i) if srng is not None else None
            x, past[i] = transformer_block_cached(x, bp, c.heads, True, brng, c.attn_dropout, train, past[i])
        z = _emit(model, x[:, -1, :])  # (B, d)
        generated.append(z)
        if step + 1 < n_tokens:
            pos = c.T + step
            nxt = linear(z, p["in_proj.w"], p["in_proj.b"]) + p["pos_emb"][pos]
            x = nxt.reshape(z.shape[0], 1, c.width)
    out = generated[0] if n_tokens == 1 else concat(generated, axis=-1)
    return out[0] if single else out


@dataclass
class LossParts:
    """Loss components summed over the sampled ratios (and over the batch)."""

    total: Tensor
    rec: float
    aux: float
    ergc: float
    M: int
    lam: float
    ratios: list[float]

    @property
    def value(self) -> float:
        return float(self.total.data)


def staged_loss(
    f_ori: np.ndarray,
    code_full: Tensor,
    ratios,
    pool: DecoderPool,
    lam: float,
    rng: Rng | None,
    train: bool,
) -> LossParts:
    """Sum over ratios of ``L_rec + L_aux / M + lam * L_ERGC`` for one compressed batch."""
    if len(ratios) == 0:
        raise ValueError("empty ratio set")
    if f_ori.shape[0] < 2:
        raise ValueError("batch size must be at least 2 for the relation constraint")
    g_ori = build_graph(f_ori).data
    T = pool.T
    total = None
    rec = aux = erg = 0.0
    for i, r in enumerate(ratios):
        j = ratio_to_token_count(r, T)
        if code_full.shape[-1] < j * pool.d:
            raise ValueError("code is shorter than the prefix requested by the ratio")
        code = code_full[..., : j * pool.d]
        cluster = pool.cluster(j)
        f_rec, f_aux = reconstruct(cluster, code, rng.fold(i) if rng is not None else None, train)
        l_rec, l_aux = reconstruction_losses(f_ori, f_rec, f_aux)
        l_erg = ergc_loss(g_ori, build_graph(code))
        term = l_rec + l_aux * (1.0 / pool.M) + l_erg * lam
        total = term if total is None else total + term
        rec += float(l_rec.data)
        aux += float(l_aux.data)
        erg += float(l_erg.data)
    return LossParts(total, rec, aux, erg, pool.M, lam, [float(r) for r in ratios])


def arc_forward_loss(
    model: ArcModel,
    batch,
    ratios,
    pool: DecoderPool,
    lam: float,
    rng: Rng | None,
    train: bool = True,
    backward: bool = True,
) -> LossParts:
    """Stage-1 objective over ``ratios``; populates ``.grad`` when ``backward``."""
    f_ori = np.asarray(batch, dtype=float)
    if len(ratios) == 0:
        raise ValueError("empty ratio set")
    n = max(ratio_to_token_count(r, model.config.T) for r in ratios)
    code = arc_generate(model, f_ori, n, train=train, rng=rng.fold(0) if rng is not None else None)
    parts = staged_loss(f_ori, code, ratios, pool, lam, rng.fold(1) if rng is not None else None, train)
    if backward:
        parts.total.backward()
    return parts
