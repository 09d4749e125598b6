"""Command-line entry point: ``arfc {gen-data,train,compress,evaluate,inspect}``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure. Human-readable
progress goes to stderr; stdout carries only machine-readable output.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import evalkit, featureio, trainer
from .arc import arc_param_count
from .decoderpool import pool_param_count
from .ergc import cosine_matrix
from .featureio import FeatureDataset, FormatError, SynthConfig
from .mos import mos_param_count
from .numkit import NumericalError
from .tokenizer import ratio_to_token_count, snap_ratio

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _info(*args) -> None:
    print(*args, file=sys.stderr)


def _echo_config(cfg: dict, seed) -> None:
    _info("config:", json.dumps(cfg, sort_keys=True))
    _info("seed:", seed)


def _parse_ratios(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad ratio list {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_gen_data(a) -> int:
    cfg = SynthConfig(
        classes=a.classes, pairs_per_class=a.pairs_per_class, dim=a.dim, latent_dim=a.latent_dim or a.dim,
        noise=a.noise, spread=a.spread, decay=a.decay, modality_gap=a.modality_gap, seed=a.seed,
    )
    _echo_config(cfg.to_dict(), a.seed)
    ds = featureio.generate_synthetic(cfg)
    featureio.save(ds, a.out)
    _info(f"wrote {a.out}: N={ds.N} D={ds.D} classes={ds.num_classes}")
    return EXIT_OK


def _load_config(a) -> trainer.TrainConfig:
    d: dict = {}
    if a.config:
        with open(a.config) as fh:
            d = json.load(fh)
    overrides = {
        "seed": a.seed, "schedule": a.schedule, "arc_steps": a.arc_steps, "mos_steps": a.mos_steps,
        "lam": a.lam, "batch_size": a.batch_size, "lr": a.lr,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    if a.no_wall_time:
        d["log_wall_time"] = False
    return trainer.TrainConfig.from_dict(d)


def cmd_train(a) -> int:
    ds = featureio.load(a.data)
    log = trainer.JsonlLog(a.log or a.out + ".log.jsonl")
    try:
        if a.stage == "mos":
            if not a.ckpt:
                raise UsageError("--stage mos needs --ckpt pointing at a stage-1 checkpoint")
            ck = trainer.load_checkpoint(a.ckpt)
            cfg = ck.config
            merged = cfg.to_dict()
            if a.config:
                with open(a.config) as fh:
                    merged.update(json.load(fh))
            stage2 = {"seed": a.seed, "mos_steps": a.mos_steps, "lam": a.lam, "batch_size": a.batch_size, "lr": a.lr}
            merged.update({k: v for k, v in stage2.items() if v is not None})
            if a.no_wall_time:
                merged["log_wall_time"] = False
            cfg = trainer.TrainConfig.from_dict(merged)
            _echo_config(cfg.to_dict(), cfg.seed)
            ck = trainer.train_mos(ck, cfg, ds, log)
        else:
            cfg = _load_config(a)
            _echo_config(cfg.to_dict(), cfg.seed)
            ck = trainer.train_arc(cfg, ds, log)
            if a.stage == "both":
                ck = trainer.train_mos(ck, None, ds, log)
    except (trainer.TrainingError, NumericalError) as e:
        _info(f"numerical failure: {e}")
        return EXIT_NUMERIC
    finally:
        log.close()
    trainer.save_checkpoint(ck, a.out)
    last = log.records[-1] if log.records else None
    _info(f"wrote {a.out}" + (f" (final {last.stage} loss {last.total:.4f})" if last else ""))
    return EXIT_OK


def cmd_compress(a) -> int:
    ck = trainer.load_checkpoint(a.ckpt)
    ds = featureio.load(a.inp)
    T = ck.config.arc.T
    if not 0.0 <= a.ratio < 1.0:
        raise UsageError(f"--ratio must lie in [0, 1), got {a.ratio}")
    _echo_config(ck.config.to_dict(), ck.config.seed)
    eff = snap_ratio(a.ratio, T)
    _info(f"ratio {a.ratio} -> effective {eff} ({ratio_to_token_count(a.ratio, T)} of {T} tokens)")
    codes = trainer.compress(ck, ds.features, a.ratio, a.use_mos)
    featureio.save(ds.with_features(codes), a.out)
    _info(f"wrote {a.out}: N={ds.N} dim={codes.shape[1]}")
    return EXIT_OK


def cmd_evaluate(a) -> int:
    ds = featureio.load(a.data)
    fit = featureio.load(a.fit) if a.fit else None
    if a.raw:
        _echo_config({"raw": True, "data": a.data}, None)
        rows = evalkit.evaluate_raw(ds, fit)
    else:
        if not a.ckpt:
            raise UsageError("evaluate needs --ckpt unless --raw is given")
        ck = trainer.load_checkpoint(a.ckpt)
        _echo_config(ck.config.to_dict(), ck.config.seed)
        ratios = _parse_ratios(a.ratios)
        for r in ratios:
            if not 0.0 <= r < 1.0:
                raise UsageError(f"ratio {r} outside [0, 1)")
            _info(f"ratio {r} -> effective {snap_ratio(r, ck.config.arc.T)}")
        rows = evalkit.evaluate_pipeline(ck, ds, ratios, a.use_mos, fit)
    if a.report:
        base = a.report[:-5] if a.report.endswith(".json") else a.report
        evalkit.write_report(rows, base + ".json", base + ".csv")
        _info(f"wrote {base}.json and {base}.csv")
    else:
        json.dump(rows, sys.stdout, sort_keys=True)
        sys.stdout.write("\n")
    for row in rows:
        _info("  ".join(f"{k}={row[k]:.4g}" if isinstance(row[k], float) else f"{k}={row[k]}" for k in evalkit.REPORT_COLUMNS))
    return EXIT_OK


def checkpoint_counts(ck: trainer.Checkpoint) -> dict[str, dict[str, int]]:
    c = ck.config
    return {
        "arc": {"stored": ck.param_count("arc"), "formula": arc_param_count(c.arc)},
        "arc_pool": {"stored": ck.param_count("arc_pool"), "formula": pool_param_count(c.arc.D, c.arc.T, c.M)},
        "mos": {"stored": ck.param_count("mos"), "formula": mos_param_count(c.mos, c.arc.D)},
        "mos_pool": {"stored": ck.param_count("mos_pool"), "formula": pool_param_count(c.arc.D, c.arc.T, c.M)},
    }


def cmd_inspect(a) -> int:
    if not (a.ckpt or a.data):
        raise UsageError("inspect needs --ckpt or --data")
    if a.graph is not None and not a.data:
        raise UsageError("--graph needs --data")
    if a.ckpt:
        ck = trainer.load_checkpoint(a.ckpt)
        _echo_config(ck.config.to_dict(), ck.config.seed)
        counts = checkpoint_counts(ck)
        out = {"steps": {"arc": ck.arc_step, "mos": ck.mos_step}, "params": counts,
               "total_params": sum(v["stored"] for v in counts.values())}
        json.dump(out, sys.stdout, sort_keys=True)
        sys.stdout.write("\n")
    if a.data:
        ds = featureio.load(a.data)
        _echo_config({"data": a.data, "batch_size": a.batch_size}, a.seed)
        if a.graph is None:
            json.dump({"N": ds.N, "D": ds.D, "C": ds.num_classes}, sys.stdout)
            sys.stdout.write("\n")
        else:
            graph_csv(ds, a.graph, a.batch_size, a.seed, sys.stdout)
    return EXIT_OK


def graph_csv(ds: FeatureDataset, index: int, batch_size: int, seed: int, out) -> np.ndarray:
    """Relation graph of the ``index``-th training batch, written as CSV."""
    if index < 0:
        raise UsageError("--graph index must be non-negative")
    it = featureio.batches(ds, batch_size, seed, paired=True)
    for _ in range(index):
        next(it)
    E = cosine_matrix(ds.features[next(it)].astype(np.float64))
    np.savetxt(out, E, delimiter=",", fmt="%.8f")
    return E


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="arfc", description="Arbitrary-ratio feature compression toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic paired dataset (ARFD)")
    d = SynthConfig()
    g.add_argument("--classes", type=int, default=d.classes)
    g.add_argument("--pairs-per-class", type=int, default=d.pairs_per_class)
    g.add_argument("--dim", type=int, default=d.dim)
    g.add_argument("--latent-dim", type=int, default=None)
    g.add_argument("--noise", type=float, default=d.noise)
    g.add_argument("--spread", type=float, default=d.spread)
    g.add_argument("--decay", type=float, default=d.decay)
    g.add_argument("--modality-gap", type=float, default=d.modality_gap)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stage(s)")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON file of TrainConfig fields")
    t.add_argument("--stage", choices=["arc", "mos", "both"], default="both")
    t.add_argument("--schedule", choices=["progressive", "uniform", "full-grid"], default=None)
    t.add_argument("--ckpt", help="stage-1 checkpoint (required for --stage mos)")
    t.add_argument("--seed", type=int)
    t.add_argument("--arc-steps", type=int)
    t.add_argument("--mos-steps", type=int)
    t.add_argument("--lam", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--log", help="JSON-lines log path (default: <out>.log.jsonl)")
    t.add_argument("--no-wall-time", action="store_true", help="zero the wall_ms column for byte-stable logs")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="write truncated codes (ARFD)")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--ratio", type=float, required=True)
    c.add_argument("--use-mos", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compress)

    e = sub.add_parser("evaluate", help="retrieval / classification / reconstruction report")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--fit", help="training split for the PCA basis and class centroids (default: --data)")
    e.add_argument("--ratios", default="0,0.5,0.75,0.875")
    e.add_argument("--use-mos", action="store_true")
    e.add_argument("--raw", action="store_true", help="evaluate uncompressed features")
    e.add_argument("--report", help="output path stem; writes .json and .csv")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect", help="parameter counts, dataset summary, relation graphs")
    i.add_argument("--ckpt")
    i.add_argument("--data")
    i.add_argument("--graph", type=int, metavar="BATCH_INDEX")
    i.add_argument("--batch-size", type=int, default=16)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if getattr(a, "schedule", None) == "full-grid":
            a.schedule = "full_grid"
        return a.func(a)
    except UsageError as e:
        _info(f"usage error: {e}")
        return EXIT_USAGE
    except (trainer.TrainingError, NumericalError) as e:
        _info(f"numerical failure: {e}")
        return EXIT_NUMERIC
    except (FormatError, OSError, ValueError, KeyError) as e:
        _info(f"data error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
