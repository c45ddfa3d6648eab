"""Contextual similarity (CX) between two dense feature maps.

For every source cell the distances to all target cells are normalised by
the closest one, turned into a softmax over targets, and the largest
softmax weight says how uniquely that cell found a partner.  CX is the
mean of those maxima, so it lies in ``(0, 1]`` and is *not* symmetric.

Rows are processed in blocks so the full ``N1 x N2`` matrix only exists
when it is small (``SimilarityConfig.max_matrix_entries``).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import ContractError, as_feature_map, cells

# rows whose squared distance falls below this fraction of |a|^2 + |b|^2 are
# recomputed directly; the Gram expansion loses all precision there
_CANCELLATION_GUARD = 1e-4


@dataclass(frozen=True)
class SimilarityConfig:
    epsilon: float = 1e-5
    bandwidth: float = 0.5
    downsample: int = 1
    l2_normalize: bool = False
    max_matrix_entries: int = 1 << 24
    threads: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.bandwidth > 0:
            raise ContractError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.downsample < 1:
            raise ContractError(f"downsample must be >= 1, got {self.downsample}")
        if self.max_matrix_entries < 1 or self.threads < 1:
            raise ContractError("max_matrix_entries and threads must be >= 1")


@dataclass
class SimilarityReport:
    cx: float
    per_source_max: np.ndarray
    per_source_argmax: np.ndarray


@dataclass
class SimilarityGradient:
    d_cx_d_f1: np.ndarray
    d_cx_d_f2: np.ndarray


# --- distance kernel -------------------------------------------------------

def naive_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference kernel: one explicit difference per pair."""
    out = np.empty((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = np.sqrt(np.sum((a[i] - b[j]) ** 2))
    return out


def _distance_block(a: np.ndarray, b: np.ndarray, b_sq: np.ndarray) -> np.ndarray:
    a_sq = np.einsum("ij,ij->i", a, a)
    scale = a_sq[:, None] + b_sq[None, :]
    sq = scale - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    rows, cols = np.nonzero(sq <= _CANCELLATION_GUARD * scale)
    if len(rows):
        diff = a[rows] - b[cols]
        sq[rows, cols] = np.einsum("ij,ij->i", diff, diff)
    return np.sqrt(sq)


def _block_rows(n_rows: int, n_cols: int, max_entries: int) -> int:
    return max(1, min(n_rows, max_entries // max(n_cols, 1)))


def cell_distances(a: np.ndarray, b: np.ndarray, max_entries: int = 1 << 24) -> np.ndarray:
    """Euclidean distances between descriptor rows of ``a`` and ``b``."""
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"descriptor dims differ: {a.shape[1]} vs {b.shape[1]}")
    b_sq = np.einsum("ij,ij->i", b, b)
    step = _block_rows(len(a), len(b), max_entries)
    out = np.empty((len(a), len(b)))
    for start in range(0, len(a), step):
        out[start:start + step] = _distance_block(a[start:start + step], b, b_sq)
    return out


def pairwise_distances(f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """``(H1*W1, H2*W2)`` matrix of descriptor distances between two maps."""
    f1, f2 = as_feature_map(f1), as_feature_map(f2)
    if f1.shape[2] != f2.shape[2]:
        raise ContractError(f"feature dims differ: {f1.shape[2]} vs {f2.shape[2]}")
    return cell_distances(cells(f1), cells(f2))


# --- per-row pieces --------------------------------------------------------

def normalize_distances(d_row, cfg: SimilarityConfig = SimilarityConfig()) -> np.ndarray:
    d = np.asarray(d_row, dtype=np.float64)
    return d / (d.min(axis=-1, keepdims=True) + cfg.epsilon)


def similarity_row(d_norm_row, cfg: SimilarityConfig = SimilarityConfig()) -> np.ndarray:
    d = np.asarray(d_norm_row, dtype=np.float64)
    logits = (1.0 - d) / cfg.bandwidth
    logits = logits - logits.max(axis=-1, keepdims=True)
    s = np.exp(logits)
    return s / s.sum(axis=-1, keepdims=True)


# --- full metric -----------------------------------------------------------

def _prepare(f1, f2, cfg: SimilarityConfig):
    f1, f2 = as_feature_map(f1), as_feature_map(f2)
    if f1.shape[2] != f2.shape[2]:
        raise ContractError(f"feature dims differ: {f1.shape[2]} vs {f2.shape[2]}")
    if cfg.downsample > 1:
        f1, f2 = avg_pool(f1, cfg.downsample), avg_pool(f2, cfg.downsample)
    a, b = cells(f1), cells(f2)
    if cfg.l2_normalize:
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return f1, f2, a, b


def avg_pool(fmap: np.ndarray, stride: int) -> np.ndarray:
    """Average-pool a map by an integer stride (trailing partial cells dropped)."""
    h, w, n = fmap.shape
    hh, ww = h // stride, w // stride
    if hh < 1 or ww < 1:
        raise ContractError(f"downsample {stride} too large for {h}x{w} map")
    trimmed = fmap[:hh * stride, :ww * stride]
    return trimmed.reshape(hh, stride, ww, stride, n).mean(axis=(1, 3))


def _row_blocks(n1: int, n2: int, cfg: SimilarityConfig) -> list[slice]:
    step = _block_rows(n1, n2, cfg.max_matrix_entries)
    return [slice(s, min(s + step, n1)) for s in range(0, n1, step)]


def _map_blocks(fn, blocks, threads: int):
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, blocks))
    return [fn(blk) for blk in blocks]


def _forward_block(a, b, b_sq, cfg):
    d = _distance_block(a, b, b_sq)
    s = similarity_row(normalize_distances(d, cfg), cfg)
    best = np.argmax(s, axis=1)  # argmax returns the lowest index on ties
    return s[np.arange(len(s)), best], best


def contextual_similarity(f1, f2, cfg: SimilarityConfig = SimilarityConfig()) -> SimilarityReport:
    """How uniquely every cell of ``f1`` finds a partner in ``f2``."""
    _, _, a, b = _prepare(f1, f2, cfg)
    b_sq = np.einsum("ij,ij->i", b, b)
    blocks = _row_blocks(len(a), len(b), cfg)
    parts = _map_blocks(lambda blk: _forward_block(a[blk], b, b_sq, cfg), blocks, cfg.threads)
    per_max = np.concatenate([p[0] for p in parts])
    per_arg = np.concatenate([p[1] for p in parts])
    return SimilarityReport(float(np.mean(per_max)), per_max, per_arg)


def _backward_block(a, b, b_sq, cfg, n_sources):
    rows = np.arange(len(a))
    d = _distance_block(a, b, b_sq)
    nearest = np.argmin(d, axis=1)
    z = d[rows, nearest] + cfg.epsilon
    s = similarity_row(d / z[:, None], cfg)
    best = np.argmax(s, axis=1)
    s_best = s[rows, best]

    # d s_k / d logit_j = s_k (delta_kj - s_j), scaled by d cx / d s_k = 1/N1
    g_logit = -s * s_best[:, None]
    g_logit[rows, best] += s_best
    g_logit /= n_sources
    g_dnorm = -g_logit / cfg.bandwidth
    g_d = g_dnorm / z[:, None]
    # the min in the normaliser routes to the nearest target only
    g_d[rows, nearest] -= np.einsum("ij,ij->i", g_dnorm, d) / z**2

    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(d > 0.0, g_d / d, 0.0)
    g_a = weight.sum(axis=1)[:, None] * a - weight @ b
    g_b = weight.sum(axis=0)[:, None] * b - weight.T @ a
    return s_best, best, g_a, g_b


def contextual_similarity_backward(f1, f2, cfg: SimilarityConfig = SimilarityConfig()):
    """CX together with its gradient with respect to both input maps.

    Subgradients of the min and max go to the lowest-index attaining
    element; the derivative of a zero distance is taken to be 0.
    """
    f1_in, f2_in = as_feature_map(f1), as_feature_map(f2)
    p1, p2, a, b = _prepare(f1_in, f2_in, cfg)
    if cfg.l2_normalize:
        raise ContractError("backward is not available with l2_normalize")
    b_sq = np.einsum("ij,ij->i", b, b)
    blocks = _row_blocks(len(a), len(b), cfg)
    parts = _map_blocks(
        lambda blk: _backward_block(a[blk], b, b_sq, cfg, len(a)), blocks, cfg.threads)

    per_max = np.concatenate([p[0] for p in parts])
    per_arg = np.concatenate([p[1] for p in parts])
    g_a = np.concatenate([p[2] for p in parts])
    g_b = parts[0][3].copy()
    for p in parts[1:]:
        g_b += p[3]

    g1 = g_a.reshape(p1.shape)
    g2 = g_b.reshape(p2.shape)
    if cfg.downsample > 1:
        g1 = _avg_pool_backward(g1, f1_in.shape, cfg.downsample)
        g2 = _avg_pool_backward(g2, f2_in.shape, cfg.downsample)
    report = SimilarityReport(float(np.mean(per_max)), per_max, per_arg)
    return report, SimilarityGradient(g1, g2)


def _avg_pool_backward(grad: np.ndarray, shape, stride: int) -> np.ndarray:
    hh, ww, n = grad.shape
    out = np.zeros(shape)
    spread = np.repeat(np.repeat(grad, stride, axis=0), stride, axis=1) / stride**2
    out[:hh * stride, :ww * stride] = spread
    return out
