"""Toy-scale ablations over one hyperparameter axis, plus per-class dynamic ratios."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import evalkit
from .arc import arc_generate
from .featureio import TEXT, VISUAL, FeatureDataset
from .numkit import no_grad
from .tokenizer import ratio_to_token_count
from .trainer import Checkpoint, TrainConfig, compress, train_arc, train_mos

AXES = ("M", "T", "K", "lam", "schedule", "generation")


@dataclass
class AblationSpec:
    axis: str
    values: list
    base: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple = (0, 1, 2)
    ratios: tuple = (0.0, 0.25, 0.5, 0.75)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown axis {self.axis!r}; expected one of {AXES}")
        if len(self.values) < 2:
            raise ValueError("an ablation needs at least two grid values")
        if len(self.seeds) < 3:
            raise ValueError("an ablation needs at least three seeds per cell")


def cell_config(spec: AblationSpec, value, seed: int) -> TrainConfig:
    b = spec.base
    if spec.axis == "M":
        return replace(b, M=int(value), seed=seed)
    if spec.axis == "T":
        T = int(value)
        return replace(b, arc=replace(b.arc, T=T), ratios_per_step=min(b.ratios_per_step, T), seed=seed)
    if spec.axis == "K":
        return replace(b, mos=replace(b.mos, K=int(value)), seed=seed)
    if spec.axis == "lam":
        return replace(b, lam=float(value), seed=seed)
    if spec.axis == "schedule":
        return replace(b, schedule=str(value), seed=seed)
    return replace(b, arc=replace(b.arc, generation=str(value)), seed=seed)


def prefix_consistent(ck: Checkpoint, X: np.ndarray) -> bool:
    """True when every shorter generation is a bitwise prefix of the full one."""
    c = ck.config.arc
    with no_grad():
        full = arc_generate(ck.arc, X, c.T).data
        return all(
            np.array_equal(arc_generate(ck.arc, X, n).data, full[:, : n * c.d]) for n in range(1, c.T)
        )


def cell_metrics(ck: Checkpoint, fit: FeatureDataset, test: FeatureDataset, ratios) -> dict[str, float]:
    out: dict[str, float] = {}
    for use_mos, tag in ((False, "arc"), (True, "mos")):
        if use_mos and ck.mos_step == 0:
            continue
        for row in _collapse(evalkit.evaluate_pipeline(ck, test, ratios, use_mos, fit)):
            r = row["ratio"]
            for metric in ("mse", "r1", "centroid_acc", "relation_err", "pca_mse"):
                out[f"{tag}.{metric}@{r:g}"] = row[metric]
    out["prefix_consistent"] = float(prefix_consistent(ck, test.features.astype(np.float64)))
    return out


def _collapse(rows: list[dict]) -> list[dict]:
    """Average the two retrieval directions of each ratio into one row."""
    by_ratio: dict[float, list[dict]] = {}
    for row in rows:
        by_ratio.setdefault(row["ratio"], []).append(row)
    out = []
    for r, group in by_ratio.items():
        merged = dict(group[0])
        merged["r1"] = float(np.mean([g["r1"] for g in group]))
        out.append(merged)
    return out


def run_ablation(
    spec: AblationSpec,
    train: FeatureDataset,
    test: FeatureDataset,
    csv_path: str | os.PathLike | None = None,
    fit_fn: Callable[[TrainConfig, FeatureDataset], Checkpoint] | None = None,
) -> list[dict]:
    """Train every (value, seed) cell and return long-format rows.

    Each row is ``{axis, value, seed, metric, result}``; ``summarize`` turns
    them into mean and sample standard deviation per (value, metric).
    """
    fit_fn = fit_fn or (lambda cfg, ds: train_mos(train_arc(cfg, ds), None, ds))
    rows = []
    for value in spec.values:
        for seed in spec.seeds:
            ck = fit_fn(cell_config(spec, value, seed), train)
            for metric, result in sorted(cell_metrics(ck, train, test, spec.ratios).items()):
                rows.append({"axis": spec.axis, "value": value, "seed": seed, "metric": metric, "result": result})
    if csv_path:
        write_rows(rows, csv_path)
    return rows


def summarize(rows: list[dict]) -> dict[tuple, tuple[float, float]]:
    cells: dict[tuple, list[float]] = {}
    for row in rows:
        cells.setdefault((row["value"], row["metric"]), []).append(row["result"])
    return {
        k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0) for k, v in cells.items()
    }


def write_rows(rows: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis_value", "seed", "metric", "value"])
        for row in rows:
            w.writerow([row["value"], row["seed"], row["metric"], row["result"]])


# ---------------------------------------------------------------- dynamic ratio


def rank_classes(per_class: dict[int, float]) -> list[int]:
    """Classes from lowest to highest accuracy; ties by class id."""
    return [c for c, _ in sorted(per_class.items(), key=lambda kv: (kv[1], kv[0]))]


def _group_accuracy(ck, fit, test, ratio_of_class: dict[int, float], use_mos: bool) -> float:
    fit_txt = fit.modality == TEXT
    vis = np.flatnonzero(test.modality == VISUAL)
    correct = 0
    for r in sorted(set(ratio_of_class.values())):
        fit_codes = compress(ck, fit.features[fit_txt], r, use_mos)
        classes, cents = evalkit.class_centroids(fit_codes, fit.labels[fit_txt])
        members = vis[np.isin(test.labels[vis], [c for c, rc in ratio_of_class.items() if rc == r])]
        if len(members) == 0:
            continue
        codes = compress(ck, test.features[members], r, use_mos)
        pred = classes[np.argmax(evalkit._unit(codes) @ evalkit._unit(cents).T, axis=1)]
        correct += int(np.sum(pred == test.labels[members]))
    return 100.0 * correct / len(vis)


def dynamic_ratio_experiment(
    ck: Checkpoint,
    fit: FeatureDataset,
    test: FeatureDataset,
    r_fixed: float = 0.75,
    r_hard: float = 0.5,
    r_normal: float | None = None,
    r_easy: float = 0.875,
    hard_fraction: float = 0.15,
    easy_fraction: float = 0.30,
    use_mos: bool = False,
) -> dict:
    """Centroid accuracy at one fixed ratio versus per-class-group ratios.

    Classes are ranked by their accuracy at ``r_fixed``; the bottom
    ``hard_fraction`` get ``r_hard``, the top ``easy_fraction`` get ``r_easy``
    and the rest ``r_normal`` (default ``r_fixed``).
    """
    r_normal = r_fixed if r_normal is None else r_normal
    fit_txt = fit.modality == TEXT
    vis = test.modality == VISUAL
    per_class = evalkit.per_class_accuracy(
        compress(ck, fit.features[fit_txt], r_fixed, use_mos), fit.labels[fit_txt],
        compress(ck, test.features[vis], r_fixed, use_mos), test.labels[vis],
    )
    order = rank_classes(per_class)
    C = len(order)
    n_hard = max(1, int(math.floor(hard_fraction * C + 0.5)))
    n_easy = max(1, int(math.floor(easy_fraction * C + 0.5)))
    hard, easy = order[:n_hard], order[C - n_easy :]
    assign = {c: r_normal for c in order}
    assign.update({c: r_easy for c in easy})
    assign.update({c: r_hard for c in hard})
    fixed = _group_accuracy(ck, fit, test, {c: r_fixed for c in order}, use_mos)
    dynamic = _group_accuracy(ck, fit, test, assign, use_mos)
    d = ck.config.arc.d
    counts = {c: int(np.sum(test.labels[vis] == c)) for c in order}
    def mean_dim(a):
        return sum(counts[c] * ratio_to_token_count(a[c], ck.config.arc.T) * d for c in order) / max(1, sum(counts.values()))

    return {
        "fixed": fixed,
        "dynamic": dynamic,
        "per_class": per_class,
        "hard_classes": hard,
        "easy_classes": easy,
        "assignment": assign,
        "mean_dim_fixed": mean_dim({c: r_fixed for c in order}),
        "mean_dim_dynamic": mean_dim(assign),
        "rows": [("fixed", fixed), ("dynamic", dynamic)],
    }
