"""Retrieval, centroid classification, relation preservation and a PCA baseline."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ergc import relation_score
from .featureio import TEXT, VISUAL, FeatureDataset
from .tokenizer import ratio_to_token_count

REPORT_COLUMNS = ["ratio", "direction", "r1", "r5", "r10", "mse", "centroid_acc", "relation_err", "pca_mse"]


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


@dataclass
class RetrievalReport:
    direction: str
    recalls: dict = field(default_factory=dict)  # k -> percentage
    queries: int = 0

    def __getitem__(self, k: int) -> float:
        return self.recalls[k]

    @property
    def r1(self) -> float:
        return self.recalls.get(1, float("nan"))

    @property
    def r5(self) -> float:
        return self.recalls.get(5, float("nan"))

    @property
    def r10(self) -> float:
        return self.recalls.get(10, float("nan"))


def paired_ranks(queries, gallery, query_pairs, gallery_pairs) -> np.ndarray:
    """0-based rank of each query's paired gallery item under cosine similarity.

    Items are ordered by descending similarity, ties by ascending gallery index.
    """
    q, g = np.asarray(queries), np.asarray(gallery)
    if q.shape[-1] != g.shape[-1]:
        raise ValueError(f"code lengths differ: {q.shape[-1]} vs {g.shape[-1]}")
    gallery_pairs = np.asarray(gallery_pairs)
    lookup = {int(p): i for i, p in enumerate(gallery_pairs)}
    try:
        target = np.array([lookup[int(p)] for p in np.asarray(query_pairs)], dtype=int)
    except KeyError as e:
        raise ValueError(f"query pair {e.args[0]} has no gallery item") from None
    sims = _unit(q) @ _unit(g).T
    t = sims[np.arange(len(q)), target][:, None]
    idx = np.arange(len(g))[None, :]
    return np.sum(sims > t, axis=1) + np.sum((sims == t) & (idx < target[:, None]), axis=1)


def recall_at_k(queries, gallery, query_pairs, gallery_pairs, ks=(1, 5, 10), direction: str = "") -> RetrievalReport:
    ranks = paired_ranks(queries, gallery, query_pairs, gallery_pairs)
    n = len(ranks)
    recalls = {int(k): 100.0 * float(np.sum(ranks < k)) / n if n else float("nan") for k in ks}
    return RetrievalReport(direction, recalls, n)


def cross_modal_recall(codes: np.ndarray, ds: FeatureDataset, ks=(1, 5, 10)) -> dict[str, RetrievalReport]:
    """Text-to-image and image-to-text recall over the records of ``ds``."""
    vis, txt = ds.modality == VISUAL, ds.modality == TEXT
    return {
        "t2i": recall_at_k(codes[txt], codes[vis], ds.pair_ids[txt], ds.pair_ids[vis], ks, "t2i"),
        "i2t": recall_at_k(codes[vis], codes[txt], ds.pair_ids[vis], ds.pair_ids[txt], ks, "i2t"),
    }


def class_centroids(codes, labels) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    classes = np.unique(labels)
    codes = np.asarray(codes, dtype=np.float64)
    return classes, np.stack([codes[labels == c].mean(axis=0) for c in classes])


def nearest_centroid_accuracy(train_codes, train_labels, test_codes, test_labels) -> float:
    """Percentage of test codes whose most cosine-similar class centroid is their own."""
    classes, cents = class_centroids(train_codes, train_labels)
    test_labels = np.asarray(test_labels)
    unseen = np.setdiff1d(test_labels, classes)
    if unseen.size:
        raise ValueError(f"test labels never seen in train: {unseen.tolist()}")
    if len(test_labels) == 0:
        return float("nan")
    pred = classes[np.argmax(_unit(test_codes) @ _unit(cents).T, axis=1)]
    return 100.0 * int(np.sum(pred == test_labels)) / len(test_labels)


def per_class_accuracy(train_codes, train_labels, test_codes, test_labels) -> dict[int, float]:
    classes, cents = class_centroids(train_codes, train_labels)
    test_labels = np.asarray(test_labels)
    pred = classes[np.argmax(_unit(test_codes) @ _unit(cents).T, axis=1)]
    return {int(c): 100.0 * int(np.sum(pred[test_labels == c] == c)) / int(np.sum(test_labels == c)) for c in np.unique(test_labels)}


# ---------------------------------------------------------------- PCA oracle


@dataclass
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # (k, D), rows orthonormal, descending variance
    eigenvalues: np.ndarray  # all D covariance eigenvalues, descending

    @property
    def k(self) -> int:
        return len(self.components)


def pca_fit(X, k: int | None = None) -> PcaBasis:
    """Exact eigendecomposition of the (biased) covariance of ``X``.

    Each component's largest-magnitude entry is made positive.
    """
    X = np.asarray(X, dtype=np.float64)
    D = X.shape[1]
    k = D if k is None else k
    if not 0 <= k <= D:
        raise ValueError(f"k={k} must lie in [0, D={D}]")
    mu = X.mean(axis=0)
    C = (X - mu).T @ (X - mu) / len(X)
    w, V = np.linalg.eigh(C)
    order = np.argsort(w)[::-1]
    w, V = np.clip(w[order], 0.0, None), V[:, order]
    lead = V[np.argmax(np.abs(V), axis=0), np.arange(D)]
    V = V * np.where(lead < 0, -1.0, 1.0)
    return PcaBasis(mu, V[:, :k].T.copy(), w)


def pca_compress(basis: PcaBasis, X, k: int) -> np.ndarray:
    if k > basis.k:
        raise ValueError(f"k={k} exceeds the {basis.k} fitted components")
    return (np.asarray(X, dtype=np.float64) - basis.mean) @ basis.components[:k].T


def pca_reconstruct(basis: PcaBasis, codes) -> np.ndarray:
    codes = np.asarray(codes)
    return codes @ basis.components[: codes.shape[-1]] + basis.mean


def pca_mse(basis: PcaBasis, X, k: int) -> float:
    """Mean squared reconstruction error per element at ``k`` components."""
    X = np.asarray(X, dtype=np.float64)
    return float(np.mean((pca_reconstruct(basis, pca_compress(basis, X, k)) - X) ** 2))


# ---------------------------------------------------------------- pipeline


def decode(ck, codes: np.ndarray, use_mos: bool) -> np.ndarray:
    """Main-decoder reconstruction of truncated codes with the stage's own pool."""
    pool = ck.mos_pool if use_mos else ck.arc_pool
    j = codes.shape[-1] // pool.d
    p = pool.cluster(j).params
    return codes @ p["main.w"].data + p["main.b"].data


def reconstruction_mse(ck, ds: FeatureDataset, r: float, use_mos: bool) -> float:
    from .trainer import compress

    codes = compress(ck, ds.features, r, use_mos)
    return float(np.mean((decode(ck, codes, use_mos) - ds.features.astype(np.float64)) ** 2))


def _rows_for(ratio, codes, recon, ds: FeatureDataset, fit: FeatureDataset, fit_codes, basis) -> list[dict]:
    X = ds.features.astype(np.float64)
    mse = float(np.mean((recon - X) ** 2)) if recon is not None else 0.0
    txt = fit.modality == TEXT
    vis = ds.modality == VISUAL
    acc = nearest_centroid_accuracy(fit_codes[txt], fit.labels[txt], codes[vis], ds.labels[vis])
    rel = relation_score(X, codes)["relation_err"]
    k = codes.shape[-1]
    p_mse = pca_mse(basis, X, k)
    rows = []
    for direction, rep in cross_modal_recall(codes, ds).items():
        rows.append(dict(ratio=float(ratio), direction=direction, r1=rep.r1, r5=rep.r5, r10=rep.r10,
                         mse=mse, centroid_acc=acc, relation_err=rel, pca_mse=p_mse))
    return rows


def evaluate_pipeline(ck, ds: FeatureDataset, ratios, use_mos: bool, fit: FeatureDataset | None = None) -> list[dict]:
    """One row per (ratio, direction).

    ``fit`` supplies the PCA basis and the text-side class centroids (the
    training split); it defaults to ``ds`` itself.
    """
    from .trainer import compress

    if ds.D != ck.config.arc.D:
        raise ValueError(f"dataset dim {ds.D} != checkpoint D={ck.config.arc.D}")
    fit = ds if fit is None else fit
    basis = pca_fit(fit.features)
    rows = []
    for r in ratios:
        codes = compress(ck, ds.features, r, use_mos)
        fit_codes = compress(ck, fit.features, r, use_mos)
        rows += _rows_for(r, codes, decode(ck, codes, use_mos), ds, fit, fit_codes, basis)
    return rows


def evaluate_raw(ds: FeatureDataset, fit: FeatureDataset | None = None) -> list[dict]:
    """Uncompressed features, reported as ratio 0 with zero reconstruction error."""
    fit = ds if fit is None else fit
    X = ds.features.astype(np.float64)
    return _rows_for(0.0, X, None, ds, fit, fit.features.astype(np.float64), pca_fit(fit.features))


def write_report(rows: list[dict], json_path: str | os.PathLike | None = None, csv_path: str | os.PathLike | None = None) -> None:
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(rows, fh, indent=1, sort_keys=True)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow({k: row[k] for k in REPORT_COLUMNS})


def retained_dim(r: float, T: int, D: int) -> int:
    return ratio_to_token_count(r, T) * (D // T)
