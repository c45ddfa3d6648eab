import itertools
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dejavu.dataset import (SEASON_PRESETS, SeasonTransform, generate_dataset, load_index,
                            sample_training_sample, split_counts, write_index)
from dejavu.features import ContractError, FormatError, read_ppm


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    return generate_dataset(root, locations=8, seasons=4, frames_per_season=4, image_size=32,
                            master_seed=7)


def test_image_count(desk):
    assert len(desk.records) == 128
    assert len(list(desk.root.rglob("*.ppm"))) == 128
    assert len((desk.root / "index.csv").read_text().strip().splitlines()) == 129


def test_directory_layout(desk):
    rec = desk.records[5]
    assert rec.path == f"loc_{rec.location}/{rec.season}/frame_{rec.frame}.ppm"
    assert read_ppm(desk.path(rec)).shape == (32, 32, 3)
    assert "master_seed=7" in (desk.root / "manifest.txt").read_text()


def test_generation_is_byte_identical(desk, tmp_path):
    again = generate_dataset(tmp_path / "again", 8, 4, 4, 32, 7)
    for rec in again.records:
        assert again.path(rec).read_bytes() == desk.path(rec).read_bytes()
    for name in ("index.csv", "manifest.txt"):
        assert (again.root / name).read_bytes() == (desk.root / name).read_bytes()


def test_different_seed_differs(desk, tmp_path):
    other = generate_dataset(tmp_path / "other", 8, 4, 4, 32, 8)
    rec = desk.records[0]
    assert other.path(rec).read_bytes() != desk.path(rec).read_bytes()


def test_seasons_change_appearance(desk):
    for loc in desk.locations():
        means = {}
        for season in desk.seasons:
            imgs = [read_ppm(desk.path(desk.record(loc, season, f))) for f in range(4)]
            means[season] = np.mean(imgs, axis=(0, 1, 2))
        for a, b in itertools.combinations(desk.seasons, 2):
            assert np.mean(np.abs(means[a] - means[b])) >= 0.05, (loc, a, b)


def test_consecutive_frames_are_not_aligned(desk):
    a = read_ppm(desk.path(desk.record(0, "sun", 0)))
    b = read_ppm(desk.path(desk.record(0, "sun", 1)))
    assert not np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(SEASON_PRESETS + (
    SeasonTransform("extreme", (3.0, 0.0, 2.0), 0.9, 4.0, 0.5, 2, 5.0),)))
def test_transforms_stay_in_unit_range(seed, season):
    rng = np.random.default_rng(seed)
    out = season.apply(rng.random((12, 12, 3)), rng)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_split_ratio():
    assert split_counts(49) == (40, 9)
    assert split_counts(8) == (6, 2)


def test_load_index_round_trip(desk):
    index = load_index(desk.root)
    assert index.records == desk.records
    assert index.seasons == desk.seasons
    assert index.locations("train") == [0, 1, 2, 3, 4, 5]
    assert index.locations("val") == [6, 7]


def test_load_index_duplicate(desk, tmp_path):
    root = tmp_path / "dup"
    shutil.copytree(desk.root, root)
    write_index(root / "index.csv", desk.records + desk.records[:1])
    with pytest.raises(FormatError, match="duplicate"):
        load_index(root)


def test_load_index_dangling_path(desk, tmp_path):
    root = tmp_path / "dangling"
    shutil.copytree(desk.root, root)
    (root / desk.records[3].path).unlink()
    with pytest.raises(FormatError, match="missing"):
        load_index(root)


def test_load_index_missing(tmp_path):
    with pytest.raises(FormatError):
        load_index(tmp_path)


def test_generate_rejects_tiny_counts(tmp_path):
    with pytest.raises(ContractError):
        generate_dataset(tmp_path, locations=1)


def test_two_seasons_force_positive(tmp_path):
    index = generate_dataset(tmp_path, locations=4, seasons=2, frames_per_season=3,
                             image_size=16, master_seed=2)
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = sample_training_sample(index, rng)
        assert {s.anchor[1], s.positive[1]} == set(index.seasons)


def test_label_soundness(desk):
    rng = np.random.default_rng(1)
    train_locs = set(desk.locations("train"))
    for _ in range(1000):
        s = sample_training_sample(desk, rng)
        assert s.anchor[0] == s.positive[0]
        assert s.anchor[1] != s.positive[1]
        assert s.negative[0] != s.anchor[0]
        assert {s.anchor[0], s.negative[0]} <= train_locs
        # aligned sequences: nearest frame is the same frame index
        assert s.positive[2] == s.anchor[2]
        for loc, season, frame in (s.anchor, s.positive, s.negative):
            assert frame + 1 in desk.frames(loc, season)


def test_nearest_frame_with_missing_frames(desk, tmp_path):
    root = tmp_path / "gappy"
    shutil.copytree(desk.root, root)
    keep = [r for r in desk.records if not (r.season != "sun" and r.frame in (0, 1))]
    write_index(root / "index.csv", keep)
    index = load_index(root)
    rng = np.random.default_rng(5)
    for _ in range(200):
        s = sample_training_sample(index, rng)
        if s.anchor[1] == "sun" and s.anchor[2] == 0:
            assert s.positive[2] == 2


def test_sampling_is_deterministic(desk):
    a = [sample_training_sample(desk, np.random.default_rng(9)) for _ in range(3)]
    b = [sample_training_sample(desk, np.random.default_rng(9)) for _ in range(3)]
    assert [(x.anchor, x.positive, x.negative) for x in a] == \
           [(x.anchor, x.positive, x.negative) for x in b]


def test_sample_loads_six_images(desk):
    s = sample_training_sample(desk, np.random.default_rng(3)).load()
    assert all(img.shape == (32, 32, 3) for img in s.images().values())


def test_sampling_needs_two_locations(desk):
    with pytest.raises(ContractError):
        sample_training_sample(desk, np.random.default_rng(0), split="nope")
