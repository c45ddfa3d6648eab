"""Place-classification evaluation and PCA feature visualisation."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import encoder as enc
from .dataset import DatasetIndex, Record
from .features import ContractError, read_ppm
from .similarity import SimilarityConfig, avg_pool, contextual_similarity


@dataclass(frozen=True)
class ScoredPair:
    score: float
    label: bool


@dataclass
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def roc_auc(scores, labels=None) -> RocCurve:
    """ROC curve over all distinct thresholds, AUC by the trapezoid rule.

    Accepts either a list of :class:`ScoredPair` or parallel score/label
    arrays.  Tied scores share one threshold, so the trapezoid counts them
    half, which makes the AUC equal to the Mann-Whitney statistic.
    """
    if labels is None:
        pairs = list(scores)
        scores = np.array([p.score for p in pairs], dtype=np.float64)
        labels = np.array([p.label for p in pairs], dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not np.all(np.isfinite(scores)):
        raise ContractError("scores must be finite")
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("need at least one positive and one negative pair")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(l)[last_of_group]
    fp = np.cumsum(~l)[last_of_group]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    # integrate in counts so the result is exact up to one final division
    auc = float(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])) + fp[0] * tp[0])
    auc /= 2.0 * n_pos * n_neg
    return RocCurve(thresholds, tpr, fpr, auc)


def pairwise_auc(scores, labels) -> float:
    """O(P*N) Mann-Whitney count; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = scores[labels], scores[~labels]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return float(wins / (len(pos) * len(neg)))


# --- performance matrix ----------------------------------------------------

@dataclass
class PerformanceMatrix:
    seasons: list[str]
    auc: np.ndarray
    rocs: dict

    @property
    def seasonal_auc(self) -> float:
        return float(np.mean(np.diag(self.auc)))

    @property
    def cross_season_auc(self) -> float:
        off = ~np.eye(len(self.seasons), dtype=bool)
        return float(np.mean(self.auc[off]))


FeatureFn = Callable[[np.ndarray], np.ndarray]


def encoder_features(params, cfg: enc.EncoderConfig) -> FeatureFn:
    return lambda img: enc.encode(params, cfg, img)


def raw_rgb_features(factor: int) -> FeatureFn:
    """Baseline descriptor: the image itself, average-pooled by ``factor``."""
    return lambda img: avg_pool(img, factor)


def score_matrix(features: list[np.ndarray], sim: SimilarityConfig, threads: int = 1) -> np.ndarray:
    """CX(query i, reference j) for every ordered pair."""
    n = len(features)

    def row(i):
        return [contextual_similarity(features[i], features[j], sim).cx for j in range(n)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(n)))
    else:
        rows = [row(i) for i in range(n)]
    return np.array(rows)


def matrix_from_scores(records: list[Record], scores: np.ndarray, seasons: list[str]) -> PerformanceMatrix:
    locs = np.array([r.location for r in records])
    season_of = np.array([r.season for r in records])
    same_loc = locs[:, None] == locs[None, :]
    grid = np.zeros((len(seasons), len(seasons)))
    rocs = {}
    for i, si in enumerate(seasons):
        q = season_of == si
        for j, sj in enumerate(seasons):
            mask = q[:, None] & (season_of == sj)[None, :]
            np.fill_diagonal(mask, False)
            curve = roc_auc(scores[mask], same_loc[mask])
            grid[i, j] = curve.auc
            rocs[(si, sj)] = curve
    return PerformanceMatrix(list(seasons), grid, rocs)


def evaluate_matrix(index: DatasetIndex, features: FeatureFn,
                    sim: SimilarityConfig = SimilarityConfig(), split: str = "val",
                    threads: int = 1) -> PerformanceMatrix:
    """Season x season AUC grid for same-place classification by CX.

    Cell ``(i, j)`` scores every image of season ``i`` against every image of
    season ``j`` from the split's locations; self-pairs are excluded.
    """
    records = index.select(split)
    if len(index.locations(split)) < 2:
        raise ContractError(f"{split} split needs >= 2 locations")
    feats = [features(read_ppm(index.path(r))) for r in records]
    scores = score_matrix(feats, sim, threads)
    return matrix_from_scores(records, scores, index.seasons)


def pooled_cross_season_roc(records: list[Record], scores: np.ndarray) -> RocCurve:
    locs = np.array([r.location for r in records])
    season_of = np.array([r.season for r in records])
    mask = season_of[:, None] != season_of[None, :]
    return roc_auc(scores[mask], (locs[:, None] == locs[None, :])[mask])


def write_matrix_csv(path, matrix: PerformanceMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query\\reference", *matrix.seasons])
        for s, row in zip(matrix.seasons, matrix.auc):
            writer.writerow([s, *(f"{v:.6f}" for v in row)])


def write_summary_csv(path, matrix: PerformanceMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seasonal_auc", "cross_season_auc"])
        writer.writerow([f"{matrix.seasonal_auc:.6f}", f"{matrix.cross_season_auc:.6f}"])


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "tpr", "fpr"])
        for t, tp, fp in zip(curve.thresholds, curve.tpr, curve.fpr):
            writer.writerow([repr(float(t)), repr(float(tp)), repr(float(fp))])


# --- PCA visualisation -----------------------------------------------------

def pca_basis(samples: np.ndarray, components: int = 3):
    """Mean and top principal axes (columns), largest-|loading| made positive."""
    mean = samples.mean(axis=0)
    centred = samples - mean
    cov = centred.T @ centred / max(len(samples) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]  # eigh sorts ascending
    k = min(components, len(evals))
    evals, evecs = evals[:k], evecs[:, :k].copy()
    for c in range(k):
        pivot = np.argmax(np.abs(evecs[:, c]))
        if evecs[pivot, c] < 0:
            evecs[:, c] = -evecs[:, c]
    return mean, evecs, evals


def _project_to_rgb(fmap: np.ndarray, mean, axes, evals) -> np.ndarray:
    h, w, n = fmap.shape
    flat = fmap.reshape(-1, n)
    tol = max(float(evals.max(initial=0.0)), 1.0) * 1e-12
    rgb = np.full((h * w, 3), 0.5)
    for c in range(min(3, axes.shape[1])):
        if evals[c] <= tol:
            continue
        proj = (flat - mean) @ axes[:, c]
        lo, hi = proj.min(), proj.max()
        if hi - lo > 0:
            rgb[:, c] = (proj - lo) / (hi - lo)
    return rgb.reshape(h, w, 3)


def pca_visualize(fmap: np.ndarray) -> np.ndarray:
    """Map a feature map's first three principal components to RGB.

    Each channel is min-max scaled to [0, 1]; components missing because the
    covariance has rank < 3 are filled with 0.5.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    h, w, n = fmap.shape
    if n < 3 or h * w < 3:
        raise ContractError("PCA visualisation needs dim >= 3 and >= 3 cells")
    mean, axes, evals = pca_basis(fmap.reshape(-1, n))
    return _project_to_rgb(fmap, mean, axes, evals)


def pca_visualize_shared(maps: list[np.ndarray]) -> list[np.ndarray]:
    """Visualise several maps in one common PCA basis (side-by-side comparisons)."""
    n = maps[0].shape[2]
    if n < 3:
        raise ContractError("PCA visualisation needs dim >= 3")
    stacked = np.concatenate([m.reshape(-1, n) for m in maps])
    mean, axes, evals = pca_basis(stacked)
    flat_all = _project_to_rgb(stacked[:, None, :], mean, axes, evals)[:, 0]
    out, start = [], 0
    for m in maps:
        cells_ = m.shape[0] * m.shape[1]
        out.append(flat_all[start:start + cells_].reshape(m.shape[0], m.shape[1], 3))
        start += cells_
    return out
