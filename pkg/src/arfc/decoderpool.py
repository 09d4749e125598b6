"""Per-ratio decoder clusters: one main and M auxiliary single-layer decoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import LayerParams, Rng, Tensor, as_tensor, dropout, init_linear, linear, sub, tsum
from .tokenizer import ratio_to_token_count


def evenly_spaced_rates(count: int, low: float = 0.1, high: float = 0.9) -> np.ndarray:
    """Fixed dropout rates shared by auxiliary decoders and MoS solutions."""
    if count < 1:
        raise ValueError("need at least one rate")
    return np.linspace(low, high, count)


@dataclass
class DecoderCluster:
    tokens: int  # j, tokens retained
    in_dim: int
    out_dim: int
    aux_rates: np.ndarray
    params: LayerParams  # scoped view: main.w, main.b, aux{m}.w, aux{m}.b

    @property
    def M(self) -> int:
        return len(self.aux_rates)

    def param_names(self, prefix: str) -> list[str]:
        return [f"{prefix}.{name}" for name in self.params]


class DecoderPool:
    """One :class:`DecoderCluster` per retained-token count j in 1..T."""

    def __init__(self, D: int, T: int, M: int, rng: Rng):
        if D % T:
            raise ValueError("D must be divisible by T")
        if M < 1:
            raise ValueError("need at least one auxiliary decoder")
        self.D, self.T, self.M = D, T, M
        self.d = D // T
        self.aux_rates = evenly_spaced_rates(M)
        self.params = LayerParams()
        for j in range(1, T + 1):
            crng = rng.fold(j)
            init_linear(self.params, f"c{j}.main", j * self.d, D, crng.fold(0))
            for m in range(M):
                init_linear(self.params, f"c{j}.aux{m}", j * self.d, D, crng.fold(m + 1))
        self._clusters = {j: self._make_cluster(j) for j in range(1, T + 1)}

    def _make_cluster(self, j: int) -> DecoderCluster:
        return DecoderCluster(j, j * self.d, self.D, self.aux_rates, self.params.scope(f"c{j}"))

    def cluster(self, j: int) -> DecoderCluster:
        try:
            return self._clusters[j]
        except KeyError:
            raise KeyError(f"no decoder cluster for {j} tokens") from None

    def cluster_param_names(self, j: int) -> list[str]:
        return [n for n in self.params if n.startswith(f"c{j}.")]

    def refresh(self) -> None:
        """Rebuild cluster views after parameters were replaced wholesale."""
        self._clusters = {j: self._make_cluster(j) for j in range(1, self.T + 1)}


def cluster_param_count(j: int, d: int, D: int, M: int) -> int:
    return (M + 1) * (j * d * D + D)


def pool_param_count(D: int, T: int, M: int) -> int:
    d = D // T
    return sum(cluster_param_count(j, d, D, M) for j in range(1, T + 1))


def route(pool: DecoderPool, r: float) -> DecoderCluster:
    return pool.cluster(ratio_to_token_count(r, pool.T))


def reconstruct(
    cluster: DecoderCluster, code, rng: Rng | None, train: bool
) -> tuple[Tensor, list[Tensor]]:
    """Main reconstruction plus one reconstruction per dropout view of ``code``."""
    code = as_tensor(code)
    if code.shape[-1] != cluster.in_dim:
        raise ValueError(f"code length {code.shape[-1]} != cluster input {cluster.in_dim}")
    p = cluster.params
    f_rec = linear(code, p["main.w"], p["main.b"])
    aux = []
    for m, rate in enumerate(cluster.aux_rates):
        view = dropout(code, rate, rng.fold(m) if rng is not None else None, train)
        aux.append(linear(view, p[f"aux{m}.w"], p[f"aux{m}.b"]))
    return f_rec, aux


def reconstruction_losses(f_ori, f_rec, f_aux_list) -> tuple[Tensor, Tensor]:
    """Squared Euclidean errors, summed over the batch: (L_rec, L_aux)."""
    f_ori = as_tensor(f_ori)

    def sq(x):
        diff = sub(f_ori, x)
        return tsum(diff * diff)

    l_rec = sq(f_rec)
    l_aux = None
    for x in f_aux_list:
        l_aux = sq(x) if l_aux is None else l_aux + sq(x)
    if l_aux is None:
        l_aux = Tensor(0.0)
    return l_rec, l_aux
