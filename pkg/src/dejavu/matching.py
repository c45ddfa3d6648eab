"""Sparse keypoint matching on top of dense feature maps.

Shi-Tomasi corners pick the locations, descriptors are bilinearly sampled
from the (downsampled) feature map, pairs are kept by mutual nearest
neighbour plus the ratio test, and RANSAC over a homography removes the
geometric outliers.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .features import ContractError

LUMA = np.array([0.299, 0.587, 0.114])


class NoConsensusError(RuntimeError):
    """RANSAC found no model supported by at least four matches."""


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    response: float


@dataclass(frozen=True)
class Match:
    source: int
    target: int
    distance: float


@dataclass
class HomographyModel:
    matrix: np.ndarray
    inliers: np.ndarray
    threshold: float
    errors: np.ndarray = field(repr=False, default=None)


# --- Shi-Tomasi ------------------------------------------------------------

def to_gray(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ LUMA


def sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel derivatives with edge-replicated borders."""
    p = np.pad(gray, 1, mode="edge")
    h, w = gray.shape

    def at(dy, dx):
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    gx = (at(-1, 1) + 2 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2 * at(0, -1) + at(1, -1))
    gy = (at(1, -1) + 2 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2 * at(-1, 0) + at(-1, 1))
    return gx, gy


def window_sum(a: np.ndarray) -> np.ndarray:
    """Uniform 3x3 sum; outside the image counts as zero."""
    p = np.pad(a, 1)
    h, w = a.shape
    return sum(p[i:i + h, j:j + w] for i in range(3) for j in range(3))


def min_eigenvalue_map(img: np.ndarray) -> np.ndarray:
    """Smaller eigenvalue of the 3x3-window structure tensor at every pixel."""
    gx, gy = sobel(to_gray(img))
    a, b, c = window_sum(gx * gx), window_sum(gx * gy), window_sum(gy * gy)
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)


def shi_tomasi(img: np.ndarray, max_corners: int = 200, quality: float = 0.01,
               min_distance: float = 3.0) -> list[Keypoint]:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ContractError("Shi-Tomasi needs an image of at least 3x3")
    resp = min_eigenvalue_map(img)
    top = resp.max()
    if top <= 0:
        return []
    padded = np.pad(resp, 1, constant_values=-np.inf)
    h, w = resp.shape
    neighbourhood = np.max([padded[i:i + h, j:j + w] for i in range(3) for j in range(3)], axis=0)
    ys, xs = np.nonzero((resp >= quality * top) & (resp > 0) & (resp >= neighbourhood))
    order = np.lexsort((xs, ys, -resp[ys, xs]))
    kept: list[Keypoint] = []
    min_sq = min_distance ** 2
    for k in order:
        x, y = float(xs[k]), float(ys[k])
        if all((x - q.x) ** 2 + (y - q.y) ** 2 >= min_sq for q in kept):
            kept.append(Keypoint(x, y, float(resp[ys[k], xs[k]])))
            if len(kept) >= max_corners:
                break
    return kept


# --- descriptors -----------------------------------------------------------

def sample_descriptor(fmap: np.ndarray, x: float, y: float, image_size: tuple[int, int]) -> np.ndarray:
    """Bilinearly sample ``fmap`` at image pixel ``(x, y)``.

    Pixel and cell centres are aligned: cell ``(i, j)`` of a map downsampled
    by ``d`` is centred on pixel ``((j + 0.5) d - 0.5, (i + 0.5) d - 0.5)``.
    """
    img_h, img_w = image_size
    if not (0 <= x <= img_w - 1 and 0 <= y <= img_h - 1):
        raise ContractError(f"point ({x}, {y}) outside {img_w}x{img_h} image")
    mh, mw = fmap.shape[:2]
    u = min(max((x + 0.5) * mw / img_w - 0.5, 0.0), mw - 1)
    v = min(max((y + 0.5) * mh / img_h - 0.5, 0.0), mh - 1)
    j0, i0 = min(int(u), mw - 1), min(int(v), mh - 1)
    j1, i1 = min(j0 + 1, mw - 1), min(i0 + 1, mh - 1)
    fu, fv = u - j0, v - i0
    top = (1 - fu) * fmap[i0, j0] + fu * fmap[i0, j1]
    bottom = (1 - fu) * fmap[i1, j0] + fu * fmap[i1, j1]
    return (1 - fv) * top + fv * bottom


def describe(fmap: np.ndarray, keypoints: list[Keypoint], image_size) -> np.ndarray:
    if not keypoints:
        return np.zeros((0, fmap.shape[2]))
    return np.array([sample_descriptor(fmap, k.x, k.y, image_size) for k in keypoints])


# --- matching --------------------------------------------------------------

def descriptor_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    diff = src[:, None, :] - dst[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def match_descriptors(src, dst, ratio: float = 0.8) -> list[Match]:
    """Mutual nearest neighbours that also pass the source-side ratio test."""
    src = np.atleast_2d(np.asarray(src, dtype=np.float64))
    dst = np.atleast_2d(np.asarray(dst, dtype=np.float64))
    if len(src) == 0 or len(dst) == 0:
        raise ContractError("both descriptor sets must be non-empty")
    d = descriptor_distances(src, dst)
    fwd = np.argmin(d, axis=1)
    bwd = np.argmin(d, axis=0)
    if d.shape[1] >= 2:
        second = np.partition(d, 1, axis=1)[:, 1]
    matches = []
    for i, j in enumerate(fwd):
        if bwd[j] != i:
            continue
        if d.shape[1] >= 2:
            # an exact tie with the runner-up is ambiguous even at ratio 1
            if second[i] == 0 or d[i, j] / second[i] > ratio:
                continue
        matches.append(Match(i, int(j), float(d[i, j])))
    return matches


# --- homography ------------------------------------------------------------

def _normalizer(pts: np.ndarray) -> np.ndarray:
    mean = pts.mean(axis=0)
    spread = np.mean(np.linalg.norm(pts - mean, axis=1))
    s = np.sqrt(2) / spread if spread > 0 else 1.0
    return np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1]])


def to_homogeneous(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = to_homogeneous(np.asarray(pts, dtype=np.float64)) @ h.T
    return p[:, :2] / p[:, 2:3]


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalised DLT; least squares for more than four points."""
    t1, t2 = _normalizer(src), _normalizer(dst)
    a = apply_homography(t1, src)
    b = apply_homography(t2, dst)
    rows = []
    for (x, y), (u, v) in zip(a, b):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t2) @ hn @ t1
    if abs(h[2, 2]) < 1e-12 * np.abs(h).max():
        return None
    h = h / h[2, 2]
    if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) < 1e-12:
        return None
    return h


def _collinear(p: np.ndarray, tol: float) -> bool:
    for i in range(4):
        q = np.delete(p, i, axis=0)
        d1, d2 = q[1] - q[0], q[2] - q[0]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= tol:
            return True
    return False


def transfer_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Symmetric transfer error in pixels: RMS of forward and backward residuals."""
    try:
        h_inv = np.linalg.inv(h)
    except np.linalg.LinAlgError:
        return np.full(len(src), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.sum((apply_homography(h, src) - dst) ** 2, axis=1)
        bwd = np.sum((apply_homography(h_inv, dst) - src) ** 2, axis=1)
    err = np.sqrt(0.5 * (fwd + bwd))
    return np.where(np.isfinite(err), err, np.inf)


def ransac_homography(src_pts, dst_pts, iterations: int = 1000, inlier_threshold: float = 1.5,
                      seed: int = 0) -> HomographyModel:
    src = np.asarray(src_pts, dtype=np.float64)
    dst = np.asarray(dst_pts, dtype=np.float64)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise ContractError(f"need >= 4 paired points, got {n} and {len(dst)}")
    rng = np.random.default_rng(seed)
    extent = max(np.ptp(src, axis=0).max(), np.ptp(dst, axis=0).max(), 1.0)
    tol = 1e-6 * extent ** 2
    best_h, best_in, best_err = None, np.zeros(n, dtype=bool), np.inf
    for _ in range(iterations):
        pick = rng.choice(n, 4, replace=False)
        if _collinear(src[pick], tol) or _collinear(dst[pick], tol):
            continue
        h = fit_homography(src[pick], dst[pick])
        if h is None:
            continue
        err = transfer_errors(h, src, dst)
        inl = err <= inlier_threshold
        score = float(np.mean(err[inl])) if inl.any() else np.inf
        if inl.sum() > best_in.sum() or (inl.sum() == best_in.sum() and score < best_err):
            best_h, best_in, best_err = h, inl, score
    if best_h is None or best_in.sum() < 4:
        raise NoConsensusError("no homography is supported by four or more matches")
    refit = fit_homography(src[best_in], dst[best_in])
    if refit is not None:
        err = transfer_errors(refit, src, dst)
        inl = err <= inlier_threshold
        if inl.sum() >= best_in.sum():
            best_h, best_in = refit, inl
    err = transfer_errors(best_h, src, dst)
    return HomographyModel(best_h, np.flatnonzero(best_in), inlier_threshold, err)


# --- pipeline and outputs --------------------------------------------------

@dataclass
class MatchResult:
    keypoints1: list[Keypoint]
    keypoints2: list[Keypoint]
    matches: list[Match]
    model: HomographyModel | None


def match_feature_maps(img1, fmap1, img2, fmap2, max_corners: int = 200,
                       quality: float = 0.01, min_distance: float = 2.0, ratio: float = 0.8,
                       iterations: int = 1000, inlier_threshold: float = 1.5,
                       seed: int = 0) -> MatchResult:
    kp1 = shi_tomasi(img1, max_corners, quality, min_distance)
    kp2 = shi_tomasi(img2, max_corners, quality, min_distance)
    if not kp1 or not kp2:
        return MatchResult(kp1, kp2, [], None)
    d1 = describe(fmap1, kp1, img1.shape[:2])
    d2 = describe(fmap2, kp2, img2.shape[:2])
    matches = match_descriptors(d1, d2, ratio)
    model = None
    if len(matches) >= 4:
        src = np.array([[kp1[m.source].x, kp1[m.source].y] for m in matches])
        dst = np.array([[kp2[m.target].x, kp2[m.target].y] for m in matches])
        try:
            model = ransac_homography(src, dst, iterations, inlier_threshold, seed)
        except NoConsensusError:
            model = None
    return MatchResult(kp1, kp2, matches, model)


def write_matches_csv(path, result: MatchResult) -> None:
    inliers = set() if result.model is None else set(result.model.inliers.tolist())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x1", "y1", "x2", "y2", "distance", "inlier"])
        for k, m in enumerate(result.matches):
            a, b = result.keypoints1[m.source], result.keypoints2[m.target]
            writer.writerow([a.x, a.y, b.x, b.y, repr(m.distance), int(k in inliers)])


def draw_line(img: np.ndarray, p0, p1, color) -> None:
    steps = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 1
    xs = np.rint(np.linspace(p0[0], p1[0], steps)).astype(int)
    ys = np.rint(np.linspace(p0[1], p1[1], steps)).astype(int)
    ok = (xs >= 0) & (xs < img.shape[1]) & (ys >= 0) & (ys < img.shape[0])
    img[ys[ok], xs[ok]] = color


def render_matches(img1, img2, result: MatchResult, cap: int = 30, scale: int = 4) -> np.ndarray:
    """Side-by-side canvas with lines joining up to ``cap`` inlier matches."""
    h = max(img1.shape[0], img2.shape[0])
    canvas = np.zeros((h, img1.shape[1] + img2.shape[1], 3))
    canvas[:img1.shape[0], :img1.shape[1]] = img1
    canvas[:img2.shape[0], img1.shape[1]:] = img2
    canvas = np.repeat(np.repeat(canvas, scale, axis=0), scale, axis=1)
    if result.model is None:
        return canvas
    colors = np.array([[1, 0.2, 0.2], [0.2, 1, 0.2], [0.3, 0.5, 1], [1, 1, 0.2], [1, 0.3, 1]])
    for n, k in enumerate(result.model.inliers[:cap]):
        m = result.matches[k]
        a, b = result.keypoints1[m.source], result.keypoints2[m.target]
        p0 = ((a.x + 0.5) * scale, (a.y + 0.5) * scale)
        p1 = ((b.x + img1.shape[1] + 0.5) * scale, (b.y + 0.5) * scale)
        draw_line(canvas, p0, p1, colors[n % len(colors)])
    return canvas
