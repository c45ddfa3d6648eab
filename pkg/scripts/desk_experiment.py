"""Fixed-seed desk-scale experiment.

Generates the synthetic dataset, measures the untrained encoder and a
raw-pixel baseline, trains with alpha = 0.2 and alpha = 0, and writes every
number to ``results/desk_results.json``.  The acceptance suite pins its
thresholds to that file.

    python scripts/desk_experiment.py [--root DIR] [--out results/desk_results.json]
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import tempfile
import time
from pathlib import Path

from dejavu import encoder as enc
from dejavu import evaluation as ev
from dejavu import matching as mt
from dejavu.dataset import generate_dataset
from dejavu.features import read_ppm
from dejavu.presets import DESK
from dejavu.training import train


def matrix_summary(m: ev.PerformanceMatrix) -> dict:
    return {"seasonal_auc": m.seasonal_auc, "cross_season_auc": m.cross_season_auc,
            "matrix": m.auc.tolist(), "seasons": m.seasons}


def run(root: Path) -> dict:
    ds = DESK.dataset
    index = generate_dataset(root, ds.locations, ds.seasons, ds.frames, ds.image_size, ds.seed)
    sim = DESK.loss.similarity
    out: dict = {"preset": {"dataset": dataclasses.asdict(ds),
                            "encoder": dataclasses.asdict(DESK.encoder),
                            "optimizer": dataclasses.asdict(DESK.optimizer),
                            "margin": DESK.loss.margin, "bandwidth": sim.bandwidth,
                            "seed": DESK.seed}}
    out["raw_rgb"] = matrix_summary(ev.evaluate_matrix(
        index, ev.raw_rgb_features(DESK.encoder.downsample_factor), sim))
    untrained = enc.init_parameters(DESK.encoder, DESK.seed)
    out["untrained"] = matrix_summary(
        ev.evaluate_matrix(index, ev.encoder_features(untrained, DESK.encoder), sim))

    for alpha in (0.2, 0.0):
        loss = dataclasses.replace(DESK.loss, alpha=alpha)
        start = time.perf_counter()
        result = train(index, DESK.encoder, DESK.optimizer, loss, seed=DESK.seed)
        seconds = time.perf_counter() - start
        entry = matrix_summary(
            ev.evaluate_matrix(index, ev.encoder_features(result.params, DESK.encoder), sim))
        entry["train_seconds"] = seconds
        entry["loss_curve"] = [c.total for c in result.curve]
        if alpha == 0.2:
            inliers = {}
            for loc in index.locations("val"):
                for season in index.seasons:
                    a = read_ppm(index.path(index.record(loc, season, 0)))
                    b = read_ppm(index.path(index.record(loc, season, 1)))
                    r = mt.match_feature_maps(a, enc.encode(result.params, DESK.encoder, a),
                                              b, enc.encode(result.params, DESK.encoder, b),
                                              seed=DESK.seed)
                    inliers[f"{loc}/{season}"] = 0 if r.model is None else len(r.model.inliers)
            entry["same_season_match_inliers"] = inliers
        out[f"alpha_{alpha}"] = entry
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=Path("results/desk_results.json"))
    args = parser.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        results = run(args.root or Path(tmp) / "desk")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(results, indent=2) + "\n")
    for key in ("raw_rgb", "untrained", "alpha_0.2", "alpha_0.0"):
        r = results[key]
        print(f"{key:>10}: seasonal {r['seasonal_auc']:.4f}  cross-season {r['cross_season_auc']:.4f}")


if __name__ == "__main__":
    main()
