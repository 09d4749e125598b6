"""Two-stage training loop, checkpoints (ARFC format) and eval-mode compression.

Stage 1 trains the compressor together with its decoder pool under the ratio
schedule. Stage 2 freezes the compressor and trains the solution-mixing model
with a second, independent pool under uniform ratio sampling.

ARFC layout (little-endian)::

    b"ARFC" | u32 version | u32 n | n bytes of canonical JSON header
    u32 blob count | blobs...
    blob = u32 name length | UTF-8 name | u32 ndim | ndim x u32 shape | f32 data
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .arc import ArcConfig, ArcModel, arc_forward_loss, arc_generate
from .decoderpool import DecoderPool
from .featureio import FeatureDataset, FormatError, TruncatedFileError, BadMagicError, VersionMismatchError, batches
from .mos import MosConfig, MosModel, compute_fcmp, freeze, make_solutions, mos_forward_loss, mos_refine
from .numkit import AdamW, LayerParams, NumericalError, Rng, clip_grad_norm, no_grad
from .schedule import MODES, BetaSchedule, sample_batch_ratios
from .tokenizer import ratio_to_token_count, truncate

MAGIC = b"ARFC"
VERSION = 1
_U32 = struct.Struct("<I")


class TrainingError(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient."""

    def __init__(self, message: str, record: "TrainLogRecord | None" = None):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    arc: ArcConfig = field(default_factory=ArcConfig)
    mos: MosConfig = field(default_factory=MosConfig)
    M: int = 5
    lam: float = 0.5
    batch_size: int = 64
    arc_steps: int = 2000
    mos_steps: int = 1000
    ratios_per_step: int = 4
    schedule: str = "progressive"
    seed: int = 0
    lr: float = 6e-3
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    # "cosine" anneals lr to 0 over each stage; "constant" keeps it fixed
    lr_schedule: str = "cosine"
    # keep the two records of a pair in the same batch so cross-modal relations enter the graph loss
    paired_batches: bool = True
    # wall-clock column in the log; off makes logs byte-reproducible
    log_wall_time: bool = True
    log_path: str | None = None
    ckpt_path: str | None = None
    ckpt_every: int = 0

    def __post_init__(self):
        if isinstance(self.arc, dict):
            self.arc = ArcConfig(**self.arc)
        if isinstance(self.mos, dict):
            self.mos = MosConfig(**self.mos)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.arc_steps < 0 or self.mos_steps < 0:
            raise ValueError("step budgets must be non-negative")
        if self.schedule not in MODES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 1 <= self.ratios_per_step <= self.arc.T:
            raise ValueError(f"ratios_per_step must lie in [1, T={self.arc.T}]")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLogRecord:
    stage: str
    step: int
    ratios: list[float]
    l_rec: float
    l_aux: float
    l_ergc: float
    total: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def schedule_for(config: TrainConfig) -> BetaSchedule:
    T = config.arc.T
    if config.schedule == "uniform":
        return BetaSchedule.uniform(config.arc_steps, T)
    if config.schedule == "full_grid":
        return BetaSchedule.full_grid(config.arc_steps, T)
    return BetaSchedule(total_steps=config.arc_steps, T=T)


@dataclass
class Checkpoint:
    config: TrainConfig
    arc: ArcModel
    arc_pool: DecoderPool
    mos: MosModel
    mos_pool: DecoderPool
    arc_opt: dict = field(default_factory=dict)
    mos_opt: dict = field(default_factory=dict)
    arc_step: int = 0
    mos_step: int = 0

    @classmethod
    def initial(cls, config: TrainConfig) -> "Checkpoint":
        root = Rng(config.seed)
        a = config.arc
        ck = cls(
            config,
            ArcModel(a, root.fold(1)),
            DecoderPool(a.D, a.T, config.M, root.fold(2)),
            MosModel(config.mos, a.D, root.fold(3)),
            DecoderPool(a.D, a.T, config.M, root.fold(4)),
        )
        ck.round_to_storage()
        return ck

    def groups(self) -> dict[str, LayerParams]:
        return {"arc": self.arc.params, "arc_pool": self.arc_pool.params, "mos": self.mos.params, "mos_pool": self.mos_pool.params}

    def round_to_storage(self) -> None:
        """Round every tensor to float32 so memory and file agree exactly."""
        for params in self.groups().values():
            for n in params:
                params[n].data = params[n].data.astype(np.float32).astype(np.float64)
        for opt in (self.arc_opt, self.mos_opt):
            for k in opt:
                opt[k] = np.asarray(opt[k], dtype=np.float32).astype(np.float64)

    def rng_state(self) -> dict:
        # every stream is derived from (seed, stage, step), so these fully pin it
        return {"seed": self.config.seed, "arc_step": self.arc_step, "mos_step": self.mos_step}

    def header(self) -> dict:
        return {"config": self.config.to_dict(), "arc_step": self.arc_step, "mos_step": self.mos_step, "rng": self.rng_state()}

    def blobs(self) -> dict[str, np.ndarray]:
        out = {}
        for g, params in self.groups().items():
            for n in params:
                out[f"{g}.{n}"] = params[n].data
        for g, opt in (("opt.arc", self.arc_opt), ("opt.mos", self.mos_opt)):
            for k in sorted(opt):
                out[f"{g}.{k}"] = opt[k]
        return out

    def param_count(self, group: str | None = None) -> int:
        gs = self.groups()
        return sum(gs[g].count() for g in ([group] if group else gs))

    def copy(self) -> "Checkpoint":
        return loads_checkpoint(dumps_checkpoint(self))


def param_digest(params: LayerParams) -> str:
    h = hashlib.sha256()
    for n in params:
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- serialization


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps_checkpoint(ck: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION)]
    head = _canonical_json(ck.header())
    parts += [_U32.pack(len(head)), head]
    blobs = ck.blobs()
    parts.append(_U32.pack(len(blobs)))
    for name in sorted(blobs):
        arr = np.asarray(blobs[name])
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(s) for s in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError("ARFC file is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def loads_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not an ARFC checkpoint (bad magic)")
    rd = _Reader(buf)
    rd.take(4)
    version = rd.u32()
    if version != VERSION:
        raise VersionMismatchError(f"ARFC version {version} is not supported (expected {VERSION})")
    try:
        header = json.loads(rd.take(rd.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt checkpoint header: {e}") from None
    blobs: dict[str, np.ndarray] = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode("utf-8")
        shape = tuple(rd.u32() for _ in range(rd.u32()))
        n = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(rd.take(4 * n), dtype="<f4").reshape(shape).astype(np.float64)
    if rd.pos != len(buf):
        raise FormatError("trailing bytes after ARFC blobs")

    ck = Checkpoint.initial(TrainConfig.from_dict(header["config"]))
    ck.arc_step, ck.mos_step = int(header["arc_step"]), int(header["mos_step"])
    for g, params in ck.groups().items():
        head = g + "."
        params.load_state({k[len(head):]: v for k, v in blobs.items() if k.startswith(head)})
    ck.arc_pool.refresh()
    ck.mos_pool.refresh()
    ck.arc_opt = {k[len("opt.arc."):]: v for k, v in blobs.items() if k.startswith("opt.arc.")}
    ck.mos_opt = {k[len("opt.mos."):]: v for k, v in blobs.items() if k.startswith("opt.mos.")}
    return ck


def save_checkpoint(ck: Checkpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(ck))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())


# ---------------------------------------------------------------- training


class JsonlLog:
    """Collects records in memory and optionally appends them to a JSON-lines file."""

    def __init__(self, path: str | os.PathLike | None = None, append: bool = False):
        self.records: list[TrainLogRecord] = []
        self._fh = open(path, "a" if append else "w") if path else None

    def __call__(self, rec: TrainLogRecord) -> None:
        self.records.append(rec)
        if self._fh:
            self._fh.write(rec.to_json() + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _check_dataset(config: TrainConfig, ds: FeatureDataset) -> None:
    if ds.N == 0:
        raise ValueError("empty dataset")
    if ds.D != config.arc.D:
        raise ValueError(f"dataset dim {ds.D} != configured D={config.arc.D}")
    if config.batch_size > ds.N:
        raise ValueError(f"batch size {config.batch_size} exceeds dataset size {ds.N}")


def lr_at(config: TrainConfig, step: int, steps: int) -> float:
    if config.lr_schedule == "constant" or steps <= 0:
        return config.lr
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * step / steps))


def _run_stage(
    stage: str,
    steps: int,
    params: LayerParams,
    trunk_names: list[str],
    pool: DecoderPool,
    prefix: str,
    opt: AdamW,
    config: TrainConfig,
    loss_fn: Callable,
    sched: BetaSchedule,
    ds: FeatureDataset,
    log: Callable[[TrainLogRecord], None] | None,
    on_step: Callable[[int], None] | None,
) -> None:
    root = Rng(config.seed).fold(10 if stage == "arc" else 20)
    it = batches(ds, config.batch_size, config.seed, paired=config.paired_batches)
    count = min(config.ratios_per_step, config.arc.T)
    for step in range(steps):
        t0 = time.perf_counter()
        idx = next(it)
        ratios = sample_batch_ratios(sched, step, count, root.fold(0, step))
        params.zero_grad()
        try:
            parts = loss_fn(idx, ratios, root.fold(1, step))
            value = parts.value
        except NumericalError as e:
            raise TrainingError(f"{stage} step {step}: non-finite value in forward/backward ({e})") from None
        routed = sorted({ratio_to_token_count(r, config.arc.T) for r in ratios})
        names = list(trunk_names)
        for j in routed:
            names += [f"{prefix}.{n}" for n in pool.cluster_param_names(j)]
        gnorm = clip_grad_norm(params, names, config.clip_norm)
        wall = (time.perf_counter() - t0) * 1000 if config.log_wall_time else 0.0
        rec = TrainLogRecord(stage, step, parts.ratios, parts.rec, parts.aux, parts.ergc, value, wall)
        if not (math.isfinite(value) and math.isfinite(gnorm)):
            if log:
                log(rec)
            raise TrainingError(f"{stage} step {step}: non-finite loss {value} (grad norm {gnorm})", rec)
        opt.lr = lr_at(config, step, steps)
        opt.step(names)
        if log:
            log(rec)
        if on_step:
            on_step(step + 1)


def train_arc(
    config: TrainConfig,
    dataset: FeatureDataset,
    log: Callable[[TrainLogRecord], None] | None = None,
    init: Checkpoint | None = None,
) -> Checkpoint:
    """Stage 1: compressor plus its decoder pool. Returns a float32-rounded checkpoint."""
    _check_dataset(config, dataset)
    ck = init.copy() if init is not None else Checkpoint.initial(config)
    params = LayerParams()
    params.merged(ck.arc.params, "arc")
    params.merged(ck.arc_pool.params, "pool")
    for n in params:
        params[n].requires_grad = True
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    X = dataset.features.astype(np.float64)

    def loss_fn(idx, ratios, rng):
        return arc_forward_loss(ck.arc, X[idx], ratios, ck.arc_pool, config.lam, rng, train=True)

    def on_step(done):
        if config.ckpt_path and config.ckpt_every and done % config.ckpt_every == 0 and done < config.arc_steps:
            _snapshot(ck, opt, "arc", done)

    trunk = [f"arc.{n}" for n in ck.arc.params]
    _run_stage("arc", config.arc_steps, params, trunk, ck.arc_pool, "pool", opt, config, loss_fn, schedule_for(config), dataset, log, on_step)
    ck.arc_opt = opt.state()
    ck.arc_step = config.arc_steps
    ck.round_to_storage()
    if config.ckpt_path:
        save_checkpoint(ck, config.ckpt_path)
    return ck


def train_mos(
    arc_checkpoint: Checkpoint,
    config: TrainConfig | None,
    dataset: FeatureDataset,
    log: Callable[[TrainLogRecord], None] | None = None,
) -> Checkpoint:
    """Stage 2: solution mixer plus its own pool on top of the frozen compressor."""
    ck = arc_checkpoint.copy()
    if config is not None:
        if config.arc != ck.config.arc or config.M != ck.config.M or config.mos != ck.config.mos:
            raise ValueError("stage-2 config disagrees with the stage-1 checkpoint architecture")
        ck.config = config
    config = ck.config
    _check_dataset(config, dataset)
    freeze(ck.arc.params)
    params = LayerParams()
    params.merged(ck.mos.params, "mos")
    params.merged(ck.mos_pool.params, "pool")
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    X = dataset.features.astype(np.float64)
    # the compressor is frozen, so its codes are computed once
    F = compute_fcmp(ck.arc, X)

    def loss_fn(idx, ratios, rng):
        return mos_forward_loss(ck.arc, ck.mos, X[idx], ratios, ck.mos_pool, config.lam, rng, f_cmp=F[idx])

    def on_step(done):
        if config.ckpt_path and config.ckpt_every and done % config.ckpt_every == 0 and done < config.mos_steps:
            _snapshot(ck, opt, "mos", done)

    trunk = [f"mos.{n}" for n in ck.mos.params]
    sched = BetaSchedule.uniform(config.mos_steps, config.arc.T)
    try:
        _run_stage("mos", config.mos_steps, params, trunk, ck.mos_pool, "pool", opt, config, loss_fn, sched, dataset, log, on_step)
    finally:
        freeze(ck.arc.params, frozen=False)
    ck.mos_opt = opt.state()
    ck.mos_step = config.mos_steps
    ck.round_to_storage()
    if config.ckpt_path:
        save_checkpoint(ck, config.ckpt_path)
    return ck


def _snapshot(ck: Checkpoint, opt: AdamW, stage: str, done: int) -> None:
    snap = ck.copy()
    if stage == "arc":
        snap.arc_opt, snap.arc_step = opt.state(), done
    else:
        snap.mos_opt, snap.mos_step = opt.state(), done
    snap.round_to_storage()
    base, ext = os.path.splitext(ck.config.ckpt_path)
    save_checkpoint(snap, f"{base}.{stage}{done}{ext or '.arfc'}")


def train_both(config: TrainConfig, dataset: FeatureDataset, log=None) -> Checkpoint:
    return train_mos(train_arc(config, dataset, log), None, dataset, log)


# ---------------------------------------------------------------- inference


def compress(ck: Checkpoint, features, r: float, use_mos: bool = False) -> np.ndarray:
    """Eval-mode codes truncated to ratio ``r``; decoders are never touched."""
    c = ck.config.arc
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != c.D:
        raise ValueError(f"feature length {f.shape[-1]} != D={c.D}")
    n = ratio_to_token_count(r, c.T)
    with no_grad():
        if not use_mos:
            return arc_generate(ck.arc, f, n, train=False).data
        full = arc_generate(ck.arc, f, c.T, train=False)
        S = make_solutions(full, ck.config.mos.K, None, train=False)
        refined = mos_refine(ck.mos, S).data
    return truncate(refined, r, c.T)
