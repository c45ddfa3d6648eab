"""Contextual triplet loss and the end-to-end training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import encoder as enc
from .features import ContractError
from .similarity import SimilarityConfig, contextual_similarity, contextual_similarity_backward

log = logging.getLogger(__name__)

ROLES = ("a1", "a2", "p1", "p2", "n1", "n2")


class TripletKind(str, Enum):
    CROSS_SEASON = "cross_season"
    WITHIN_SEASON = "within_season"


@dataclass
class TrainingSample:
    """Two consecutive frames each of anchor, positive and negative."""
    a1: np.ndarray
    a2: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    n1: np.ndarray
    n2: np.ndarray

    def images(self) -> dict[str, np.ndarray]:
        return {r: getattr(self, r) for r in ROLES}


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str
    kind: TripletKind


# cross-season pairs drive seasonal invariance; the three within-season
# triplets treat consecutive frames of one season as positives
FIVE_TRIPLETS = (
    Triplet("a1", "p1", "n1", TripletKind.CROSS_SEASON),
    Triplet("a2", "p2", "n2", TripletKind.CROSS_SEASON),
    Triplet("a1", "a2", "n1", TripletKind.WITHIN_SEASON),
    Triplet("p1", "p2", "n2", TripletKind.WITHIN_SEASON),
    Triplet("n1", "n2", "a1", TripletKind.WITHIN_SEASON),
)


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5
    alpha: float = 0.2
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    # which triplet family the alpha weight applies to
    alpha_weights: TripletKind = TripletKind.WITHIN_SEASON

    def __post_init__(self):
        if not self.margin > 0:
            raise ContractError(f"margin must be > 0, got {self.margin}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must be in [0, 1], got {self.alpha}")
        object.__setattr__(self, "alpha_weights", TripletKind(self.alpha_weights))


@dataclass
class LossReport:
    total: float
    cross_season_mean: float
    within_season_mean: float
    per_triplet: list[float]


def build_triplets(sample: TrainingSample | None = None,
                   features: dict[str, np.ndarray] | None = None) -> list[Triplet]:
    """The five triplets of one training sample, as role names.

    Roles index into the six feature maps (``a1`` ... ``n2``).
    """
    if features is not None and set(features) != set(ROLES):
        raise ContractError(f"need feature maps for roles {ROLES}")
    return list(FIVE_TRIPLETS)


def hinge(cx_an: float, cx_ap: float, margin: float) -> float:
    return max(cx_an - cx_ap + margin, 0.0)


def triplet_loss(anchor, positive, negative, cfg: LossConfig = LossConfig()) -> float:
    """max(CX(A, N) - CX(A, P) + m, 0) for three feature maps."""
    cx_ap = contextual_similarity(anchor, positive, cfg.similarity).cx
    cx_an = contextual_similarity(anchor, negative, cfg.similarity).cx
    return hinge(cx_an, cx_ap, cfg.margin)


def _weights(kinds: list[TripletKind], cfg: LossConfig) -> np.ndarray:
    weighted = np.array([k == cfg.alpha_weights for k in kinds])
    n_w, n_u = weighted.sum(), (~weighted).sum()
    w = np.zeros(len(kinds))
    if n_u:
        w[~weighted] = 1.0 / n_u
    if n_w:
        w[weighted] = cfg.alpha / n_w
    return w


def combine_losses(losses, kinds, cfg: LossConfig = LossConfig()) -> LossReport:
    """Mean of the unweighted family plus alpha times mean of the other."""
    kinds = [TripletKind(k) for k in kinds]
    if TripletKind.CROSS_SEASON not in kinds:
        raise ContractError("at least one cross-season triplet is required")
    losses = [float(l) for l in losses]
    cross = [l for l, k in zip(losses, kinds) if k is TripletKind.CROSS_SEASON]
    within = [l for l, k in zip(losses, kinds) if k is TripletKind.WITHIN_SEASON]
    cross_mean = float(np.mean(cross))
    within_mean = float(np.mean(within)) if within else 0.0
    if cfg.alpha_weights is TripletKind.WITHIN_SEASON:
        total = cross_mean + cfg.alpha * within_mean
    else:
        total = within_mean + cfg.alpha * cross_mean
    return LossReport(total, cross_mean, within_mean, losses)


def total_loss(triplets: list[Triplet], features: dict[str, np.ndarray],
               cfg: LossConfig = LossConfig()) -> LossReport:
    losses = [triplet_loss(features[t.anchor], features[t.positive], features[t.negative], cfg)
              for t in triplets]
    return combine_losses(losses, [t.kind for t in triplets], cfg)


def loss_backward(features: dict[str, np.ndarray], cfg: LossConfig = LossConfig(),
                  triplets: list[Triplet] | None = None):
    """Loss report and dL/dF for every feature map taking part."""
    triplets = list(FIVE_TRIPLETS) if triplets is None else triplets
    kinds = [t.kind for t in triplets]
    if TripletKind.CROSS_SEASON not in kinds:
        raise ContractError("at least one cross-season triplet is required")
    weights = _weights(kinds, cfg)
    grads = {name: np.zeros_like(f, dtype=np.float64) for name, f in features.items()}
    losses = []
    for t, w in zip(triplets, weights):
        fa, fp, fn = features[t.anchor], features[t.positive], features[t.negative]
        ap, g_ap = contextual_similarity_backward(fa, fp, cfg.similarity)
        an, g_an = contextual_similarity_backward(fa, fn, cfg.similarity)
        loss = hinge(an.cx, ap.cx, cfg.margin)
        losses.append(loss)
        if loss > 0.0 and w > 0.0:
            grads[t.anchor] += w * (g_an.d_cx_d_f1 - g_ap.d_cx_d_f1)
            grads[t.negative] += w * g_an.d_cx_d_f2
            grads[t.positive] -= w * g_ap.d_cx_d_f2
    return combine_losses(losses, kinds, cfg), grads


# --- training loop ---------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    total: float
    cross_mean: float
    within_mean: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    curve: list[EpochStats]


def train_step(params, enc_cfg: enc.EncoderConfig, sample: TrainingSample,
               loss_cfg: LossConfig, optimizer: enc.SGD):
    features, tapes = {}, {}
    for role, img in sample.images().items():
        features[role], tapes[role] = enc.forward(params, enc_cfg, img)
    report, d_features = loss_backward(features, loss_cfg)
    grads = enc.zeros_like_parameters(params)
    for role in ROLES:
        if not np.any(d_features[role]):
            continue
        g = enc.backward(params, enc_cfg, tapes[role], d_features[role])
        for name in grads:
            grads[name] += g[name]
    return optimizer.step(params, grads), report


def train(dataset, enc_cfg: enc.EncoderConfig, opt: enc.OptimizerConfig,
          loss_cfg: LossConfig, seed: int, params=None,
          samples_per_epoch: int | None = None) -> TrainResult:
    """Train the encoder; one SGD step per sampled training sample.

    ``dataset`` is a :class:`dejavu.dataset.DatasetIndex`.  An epoch draws as
    many samples as there are training locations unless told otherwise.
    """
    from .dataset import sample_training_sample

    train_locs = dataset.locations("train")
    if len(train_locs) < 2 or len(dataset.seasons) < 2:
        raise ContractError("training needs >= 2 train locations and >= 2 seasons")
    per_epoch = samples_per_epoch or len(train_locs)
    rng = np.random.default_rng(seed)
    if params is None:
        params = enc.init_parameters(enc_cfg, seed)
    optimizer = enc.SGD(opt)
    cache: dict = {}
    curve = []
    for epoch in range(opt.epochs):
        reports = []
        for _ in range(per_epoch):
            drawn = sample_training_sample(dataset, rng)
            sample = drawn.load(cache)
            params, report = train_step(params, enc_cfg, sample, loss_cfg, optimizer)
            reports.append(report)
        stats = EpochStats(
            epoch,
            float(np.mean([r.total for r in reports])),
            float(np.mean([r.cross_season_mean for r in reports])),
            float(np.mean([r.within_season_mean for r in reports])),
        )
        curve.append(stats)
        log.info("epoch %d loss %.4f (cross %.4f, within %.4f)",
                 epoch, stats.total, stats.cross_mean, stats.within_mean)
    return TrainResult(params, curve)


def write_loss_curve(path, curve: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "cross_mean", "within_mean"])
        for s in curve:
            writer.writerow([s.epoch, repr(s.total), repr(s.cross_mean), repr(s.within_mean)])
