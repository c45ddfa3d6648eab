"""Synthetic multi-season place dataset and training-sample selection.

Every location is a random 2-D scene of textured shapes.  A season is a
global appearance transform (tint, brightness, blur, noise, light streaks)
applied to that same scene, and each frame sees it through a small random
camera offset, so images of one place never align pixel for pixel.

On disk::

    root/index.csv                          location,season,frame,split,path
    root/manifest.txt                       seed, counts and a content hash
    root/loc_<id>/<season>/frame_<i>.ppm
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import ContractError, FormatError, read_ppm, write_ppm
from .training import TrainingSample

MAX_JITTER = 2
TRAIN_FRACTION = (40, 49)


@dataclass(frozen=True)
class SeasonTransform:
    name: str
    tint: tuple[float, float, float]
    brightness: float
    contrast: float
    noise_sigma: float
    blur_radius: int
    streak_intensity: float

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = img * np.asarray(self.tint)
        out = (out - 0.5) * self.contrast + 0.5 + self.brightness
        if self.blur_radius:
            out = box_blur(out, self.blur_radius)
        if self.streak_intensity:
            # long-exposure smear of the bright parts, as in night driving
            bright = np.clip(img.mean(axis=2, keepdims=True) - 0.55, 0.0, None)
            streak = box_blur_1d(bright, 4, axis=1) * np.array([1.0, 0.9, 0.6])
            out = out + self.streak_intensity * streak
        if self.noise_sigma:
            out = out + rng.normal(0.0, self.noise_sigma, size=out.shape)
        return np.clip(out, 0.0, 1.0)


SEASON_PRESETS = (
    SeasonTransform("sun", (1.10, 1.00, 0.80), 0.08, 1.15, 0.01, 0, 0.0),
    SeasonTransform("overcast", (0.85, 0.90, 0.95), 0.00, 0.60, 0.015, 1, 0.0),
    SeasonTransform("night", (0.55, 0.60, 0.95), -0.30, 0.70, 0.04, 0, 2.5),
    SeasonTransform("snow", (0.95, 1.00, 1.10), 0.22, 0.50, 0.02, 0, 0.0),
    SeasonTransform("dusk", (1.15, 0.70, 0.50), -0.10, 0.90, 0.02, 1, 0.8),
    SeasonTransform("rain", (0.70, 0.80, 0.85), -0.05, 0.75, 0.035, 1, 0.0),
)


def season_transforms(count: int, master_seed: int) -> list[SeasonTransform]:
    """Fixed presets first, then random transforms for any extra seasons."""
    seasons = list(SEASON_PRESETS[:count])
    rng = np.random.default_rng([master_seed, 0x5EA5])
    for k in range(len(seasons), count):
        seasons.append(SeasonTransform(
            f"season{k}", tuple(rng.uniform(0.5, 1.2, 3)), float(rng.uniform(-0.25, 0.2)),
            float(rng.uniform(0.5, 1.2)), float(rng.uniform(0.01, 0.04)),
            int(rng.integers(0, 2)), float(rng.choice([0.0, 1.5]))))
    return seasons


def box_blur_1d(img: np.ndarray, radius: int, axis: int) -> np.ndarray:
    k = 2 * radius + 1
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="edge")
    csum = np.cumsum(padded, axis=axis)
    csum = np.concatenate([np.zeros_like(np.take(csum, [0], axis=axis)), csum], axis=axis)
    n = img.shape[axis]
    hi = np.take(csum, np.arange(k, k + n), axis=axis)
    lo = np.take(csum, np.arange(0, n), axis=axis)
    return (hi - lo) / k


def box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    return box_blur_1d(box_blur_1d(img, radius, 0), radius, 1)


@dataclass(frozen=True)
class SceneSpec:
    scene_seed: int
    num_shapes: int = 7
    palette: tuple = field(default=(
        (0.85, 0.20, 0.15), (0.15, 0.55, 0.20), (0.20, 0.30, 0.80), (0.90, 0.80, 0.20),
        (0.55, 0.25, 0.60), (0.10, 0.70, 0.75), (0.95, 0.55, 0.10), (0.90, 0.90, 0.90),
        (0.20, 0.20, 0.20), (0.60, 0.45, 0.30),
    ))


def render_scene(spec: SceneSpec, size: int) -> np.ndarray:
    """Render a location's canonical view at ``size x size``."""
    rng = np.random.default_rng([spec.scene_seed, 0x5CE2E])
    palette = np.asarray(spec.palette)
    yy, xx = np.mgrid[0:size, 0:size] / size
    top, bottom = palette[rng.choice(len(palette), 2, replace=False)]
    horizon = rng.uniform(0.3, 0.7)
    img = np.where((yy < horizon)[..., None], top * 0.8 + 0.1, bottom * 0.8 + 0.1)
    img = img * (0.85 + 0.3 * yy[..., None])
    for _ in range(spec.num_shapes):
        color = palette[rng.integers(len(palette))]
        cx, cy = rng.uniform(0.05, 0.95, 2)
        rx, ry = rng.uniform(0.08, 0.3, 2)
        kind = rng.integers(3)
        if kind == 0:
            mask = (np.abs(xx - cx) < rx) & (np.abs(yy - cy) < ry)
        elif kind == 1:
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1.0
        else:
            mask = (yy - cy + ry > 0) & (np.abs(xx - cx) < (yy - cy + ry) * rx / (2 * ry))
            mask &= yy < cy + ry
        texture = rng.integers(3)
        if texture == 0:
            shade = np.ones_like(xx)
        else:
            freq = rng.uniform(6, 14)
            theta = rng.uniform(0, np.pi)
            phase = (np.cos(theta) * xx + np.sin(theta) * yy) * freq
            if texture == 1:
                shade = 0.7 + 0.3 * (np.floor(phase) % 2)
            else:
                shade = 0.7 + 0.3 * ((np.floor(xx * freq) + np.floor(yy * freq)) % 2)
        img = np.where(mask[..., None], color * shade[..., None], img)
    return np.clip(img, 0.0, 1.0)


def render_view(scene: np.ndarray, size: int, dx: int, dy: int) -> np.ndarray:
    off = MAX_JITTER
    return scene[off + dy:off + dy + size, off + dx:off + dx + size]


def split_counts(num_locations: int) -> tuple[int, int]:
    """Train/val location counts following a 40:9 ratio (floor on train)."""
    num, den = TRAIN_FRACTION
    n_train = max(1, min(num_locations - 1, (num_locations * num) // den))
    return n_train, num_locations - n_train


def split_of(location: int, num_locations: int) -> str:
    n_train, _ = split_counts(num_locations)
    return "train" if location < n_train else "val"


@dataclass(frozen=True)
class Record:
    location: int
    season: str
    frame: int
    split: str
    path: str


@dataclass
class DatasetIndex:
    root: Path
    records: list[Record]
    seasons: list[str]

    def __post_init__(self):
        self._by_key = {(r.location, r.season, r.frame): r for r in self.records}

    def locations(self, split: str | None = None) -> list[int]:
        return sorted({r.location for r in self.records if split in (None, r.split)})

    def frames(self, location: int, season: str) -> list[int]:
        return sorted(r.frame for r in self.records
                      if r.location == location and r.season == season)

    def record(self, location: int, season: str, frame: int) -> Record:
        return self._by_key[(location, season, frame)]

    def path(self, record: Record) -> Path:
        return self.root / record.path

    def select(self, split: str | None = None, season: str | None = None) -> list[Record]:
        return [r for r in self.records
                if split in (None, r.split) and season in (None, r.season)]


def generate_dataset(root, locations: int = 8, seasons: int = 4, frames_per_season: int = 4,
                     image_size: int = 32, master_seed: int = 7) -> DatasetIndex:
    """Render the whole dataset to ``root``; a pure function of the arguments."""
    if locations < 2 or seasons < 2 or frames_per_season < 2:
        raise ContractError("need >= 2 locations, >= 2 seasons and >= 2 frames")
    if image_size < 4:
        raise ContractError(f"image_size must be >= 4, got {image_size}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    transforms = season_transforms(seasons, master_seed)
    canvas = image_size + 2 * MAX_JITTER
    digest = hashlib.sha256()
    records = []
    for loc in range(locations):
        scene = render_scene(SceneSpec(scene_seed=master_seed * 100003 + loc), canvas)
        for s_idx, season in enumerate(transforms):
            folder = root / f"loc_{loc}" / season.name
            folder.mkdir(parents=True, exist_ok=True)
            for frame in range(frames_per_season):
                rng = np.random.default_rng([master_seed, loc, s_idx, frame])
                dx, dy = rng.integers(-MAX_JITTER, MAX_JITTER + 1, size=2)
                img = season.apply(render_view(scene, image_size, dx, dy), rng)
                rel = f"loc_{loc}/{season.name}/frame_{frame}.ppm"
                write_ppm(root / rel, img)
                digest.update((root / rel).read_bytes())
                records.append(Record(loc, season.name, frame, split_of(loc, locations), rel))
    write_index(root / "index.csv", records)
    with open(root / "manifest.txt", "w") as fh:
        fh.write(f"master_seed={master_seed}\nlocations={locations}\nseasons={seasons}\n"
                 f"frames_per_season={frames_per_season}\nimage_size={image_size}\n"
                 f"season_names={','.join(t.name for t in transforms)}\n"
                 f"images={len(records)}\nsha256={digest.hexdigest()}\n")
    return DatasetIndex(root, records, [t.name for t in transforms])


def write_index(path, records: list[Record]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location", "season", "frame", "split", "path"])
        for r in records:
            writer.writerow([r.location, r.season, r.frame, r.split, r.path])


def load_index(root) -> DatasetIndex:
    root = Path(root)
    path = root / "index.csv"
    if not path.exists():
        raise FormatError(f"missing {path}")
    records, seen, seasons = [], set(), []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["location", "season", "frame", "split", "path"]:
            raise FormatError(f"unexpected index columns {reader.fieldnames}")
        for row in reader:
            try:
                rec = Record(int(row["location"]), row["season"], int(row["frame"]),
                             row["split"], row["path"])
            except (TypeError, ValueError) as exc:
                raise FormatError(f"bad index row {row}") from exc
            key = (rec.location, rec.season, rec.frame)
            if key in seen:
                raise FormatError(f"duplicate index entry {key}")
            if not (root / rec.path).exists():
                raise FormatError(f"index points at missing file {rec.path}")
            seen.add(key)
            if rec.season not in seasons:
                seasons.append(rec.season)
            records.append(rec)
    all_locs = sorted({r.location for r in records})
    split_by_loc: dict[int, str] = {}
    for i, rec in enumerate(records):
        split = rec.split or split_of(all_locs.index(rec.location), len(all_locs))
        if split not in ("train", "val"):
            raise FormatError(f"unknown split {split!r}")
        if split_by_loc.setdefault(rec.location, split) != split:
            raise FormatError(f"location {rec.location} appears in both splits")
        records[i] = Record(rec.location, rec.season, rec.frame, split, rec.path)
    return DatasetIndex(root, records, seasons)


# --- sampling --------------------------------------------------------------

@dataclass(frozen=True)
class SampleResult:
    index: DatasetIndex
    anchor: tuple[int, str, int]
    positive: tuple[int, str, int]
    negative: tuple[int, str, int]

    def paths(self) -> dict[str, Path]:
        out = {}
        for role, (loc, season, frame) in (("a", self.anchor), ("p", self.positive),
                                           ("n", self.negative)):
            out[f"{role}1"] = self.index.path(self.index.record(loc, season, frame))
            out[f"{role}2"] = self.index.path(self.index.record(loc, season, frame + 1))
        return out

    def load(self, cache: dict | None = None) -> TrainingSample:
        images = {}
        for role, path in self.paths().items():
            if cache is not None and path in cache:
                images[role] = cache[path]
            else:
                images[role] = read_ppm(path)
                if cache is not None:
                    cache[path] = images[role]
        return TrainingSample(**images)


def _pair_starts(index: DatasetIndex, loc: int, season: str) -> list[int]:
    frames = set(index.frames(loc, season))
    return sorted(f for f in frames if f + 1 in frames)


def sample_training_sample(index: DatasetIndex, rng: np.random.Generator,
                           split: str = "train") -> SampleResult:
    """Anchor, positive (other season, nearest frame) and negative (other place)."""
    locs = index.locations(split)
    if len(locs) < 2 or len(index.seasons) < 2:
        raise ContractError(f"{split} split needs >= 2 locations and >= 2 seasons")
    a_loc = locs[rng.integers(len(locs))]
    a_season = index.seasons[rng.integers(len(index.seasons))]
    starts = _pair_starts(index, a_loc, a_season)
    if not starts:
        raise ContractError(f"no consecutive frames at location {a_loc}, {a_season}")
    a_frame = starts[rng.integers(len(starts))]

    others = [s for s in index.seasons if s != a_season]
    p_season = others[rng.integers(len(others))]
    p_starts = _pair_starts(index, a_loc, p_season)
    if not p_starts:
        raise ContractError(f"no consecutive frames at location {a_loc}, {p_season}")
    p_frame = min(p_starts, key=lambda f: (abs(f - a_frame), f))

    n_locs = [l for l in locs if l != a_loc]
    n_loc = n_locs[rng.integers(len(n_locs))]
    n_season = index.seasons[rng.integers(len(index.seasons))]
    n_starts = _pair_starts(index, n_loc, n_season)
    if not n_starts:
        raise ContractError(f"no consecutive frames at location {n_loc}, {n_season}")
    n_frame = n_starts[rng.integers(len(n_starts))]
    return SampleResult(index, (a_loc, a_season, a_frame), (a_loc, p_season, p_frame),
                        (n_loc, n_season, n_frame))
