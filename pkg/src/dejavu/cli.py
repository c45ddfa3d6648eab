"""Command-line entry point: ``dejavu {generate,train,eval,retrieve,match,viz}``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import evaluation as ev
from . import matching as mt
from . import presets
from .dataset import generate_dataset, load_index
from .features import ContractError, DataError, FormatError, read_ppm, write_ppm
from .similarity import SimilarityConfig, contextual_similarity
from .training import LossConfig, TripletKind, train, write_loss_curve

log = logging.getLogger("dejavu")

PRESETS = {
    name: dict(epochs=p.optimizer.epochs, lr=p.optimizer.learning_rate,
               momentum=p.optimizer.momentum, pools=p.encoder.spp_pool_sizes)
    for name, p in presets.PRESETS.items()
}


class UsageError(Exception):
    pass


def _pools(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--deterministic", action="store_true",
                   help="run single-threaded with fixed reduction order")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (falls back to $DEJAVU_THREADS, then 1)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _similarity_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bandwidth", type=float, default=0.5, help="softmax band-width h")
    p.add_argument("--epsilon", type=float, default=1e-5)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="dejavu", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="render the synthetic dataset")
    g.add_argument("--root", type=Path, required=True)
    g.add_argument("--locations", type=int, default=8)
    g.add_argument("--seasons", type=int, default=4)
    g.add_argument("--frames", type=int, default=4)
    g.add_argument("--size", type=int, default=32)

    t = sub.add_parser("train", parents=[common], help="train the encoder")
    t.add_argument("--root", type=Path, required=True)
    t.add_argument("--checkpoint", type=Path, default=None,
                   help="where to write weights (default OUT/checkpoint.dvw)")
    t.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--pools", type=_pools)
    t.add_argument("--dim", type=int, default=10, help="feature dimensionality n")
    t.add_argument("--stem-channels", type=int, default=16)
    t.add_argument("--blocks", type=int, default=3)
    t.add_argument("--downsample", type=int, default=4)
    t.add_argument("--margin", type=float, default=0.5)
    t.add_argument("--alpha", type=float, default=0.2)
    t.add_argument("--alpha-weights", choices=[k.value for k in TripletKind],
                   default=TripletKind.WITHIN_SEASON.value)
    t.add_argument("--samples-per-epoch", type=int, default=None)
    _similarity_flags(t)

    e = sub.add_parser("eval", parents=[common], help="season x season AUC matrix")
    e.add_argument("--root", type=Path, required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--raw-rgb", type=int, metavar="FACTOR",
                     help="score average-pooled pixels instead of learnt features")
    e.add_argument("--split", choices=["train", "val"], default="val")
    _similarity_flags(e)

    r = sub.add_parser("retrieve", parents=[common], help="rank references by CX to a query")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--query", type=Path, required=True)
    r.add_argument("--refs", type=Path, nargs="+", required=True,
                   help="reference PPM files or directories searched recursively")
    _similarity_flags(r)

    m = sub.add_parser("match", parents=[common], help="sparse matching between two images")
    m.add_argument("--checkpoint", type=Path, required=True)
    m.add_argument("image1", type=Path)
    m.add_argument("image2", type=Path)
    m.add_argument("--max-corners", type=int, default=200)
    m.add_argument("--quality", type=float, default=0.01)
    m.add_argument("--min-distance", type=float, default=2.0)
    m.add_argument("--ratio", type=float, default=0.8)
    m.add_argument("--iterations", type=int, default=1000)
    m.add_argument("--inlier-threshold", type=float, default=1.5)
    m.add_argument("--cap", type=int, default=30, help="inlier lines drawn in matches.ppm")

    v = sub.add_parser("viz", parents=[common], help="PCA visualisation of a feature map")
    v.add_argument("--checkpoint", type=Path, required=True)
    v.add_argument("image", type=Path)
    v.add_argument("--scale", type=int, default=1, help="nearest-neighbour enlargement")
    return parser


def _threads(args) -> int:
    if args.deterministic:
        return 1
    if args.threads is not None:
        n = args.threads
    else:
        try:
            n = int(os.environ.get("DEJAVU_THREADS", "1"))
        except ValueError:
            raise UsageError("DEJAVU_THREADS must be an integer")
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _sim_cfg(args) -> SimilarityConfig:
    return SimilarityConfig(epsilon=args.epsilon, bandwidth=args.bandwidth, threads=_threads(args))


def cmd_generate(args) -> int:
    index = generate_dataset(args.root, args.locations, args.seasons, args.frames,
                             args.size, args.seed)
    print((args.root / "manifest.txt").read_text(), end="")
    print(f"train locations: {index.locations('train')}  val locations: {index.locations('val')}")
    return 0


def cmd_train(args) -> int:
    preset = PRESETS[args.preset]
    epochs = args.epochs if args.epochs is not None else preset["epochs"]
    lr = args.lr if args.lr is not None else preset["lr"]
    momentum = args.momentum if args.momentum is not None else preset["momentum"]
    pools = args.pools if args.pools is not None else preset["pools"]
    enc_cfg = enc.EncoderConfig(stem_channels=args.stem_channels, num_residual_blocks=args.blocks,
                                spp_pool_sizes=pools, output_dim=args.dim,
                                downsample_factor=args.downsample)
    opt = enc.OptimizerConfig(learning_rate=lr, epochs=epochs, momentum=momentum)
    loss_cfg = LossConfig(margin=args.margin, alpha=args.alpha, similarity=_sim_cfg(args),
                          alpha_weights=TripletKind(args.alpha_weights))
    index = load_index(args.root)
    args.out.mkdir(parents=True, exist_ok=True)
    result = train(index, enc_cfg, opt, loss_cfg, seed=args.seed,
                   samples_per_epoch=args.samples_per_epoch)
    ckpt = args.checkpoint or args.out / "checkpoint.dvw"
    enc.save_checkpoint(ckpt, result.params, enc_cfg)
    write_loss_curve(args.out / "loss.csv", result.curve)
    print(f"wrote {ckpt} and {args.out / 'loss.csv'}; "
          f"loss {result.curve[0].total:.4f} -> {result.curve[-1].total:.4f}")
    return 0


def cmd_eval(args) -> int:
    index = load_index(args.root)
    sim = _sim_cfg(args)
    if args.checkpoint is not None:
        cfg, params = enc.load_checkpoint(args.checkpoint)
        features = ev.encoder_features(params, cfg)
    else:
        features = ev.raw_rgb_features(args.raw_rgb)
    records = index.select(args.split)
    if len(index.locations(args.split)) < 2:
        raise UsageError(f"{args.split} split needs >= 2 locations")
    feats = [features(read_ppm(index.path(r))) for r in records]
    scores = ev.score_matrix(feats, sim, sim.threads)
    matrix = ev.matrix_from_scores(records, scores, index.seasons)
    args.out.mkdir(parents=True, exist_ok=True)
    ev.write_matrix_csv(args.out / "matrix.csv", matrix)
    ev.write_summary_csv(args.out / "summary.csv", matrix)
    ev.write_roc_csv(args.out / "roc.csv", ev.pooled_cross_season_roc(records, scores))
    print(f"seasonal AUC {matrix.seasonal_auc:.4f}  cross-season AUC {matrix.cross_season_auc:.4f}")
    return 0


def _collect_refs(paths: list[Path]) -> list[Path]:
    out = []
    for p in paths:
        out.extend(sorted(p.rglob("*.ppm")) if p.is_dir() else [p])
    return out


def cmd_retrieve(args) -> int:
    cfg, params = enc.load_checkpoint(args.checkpoint)
    sim = _sim_cfg(args)
    query = enc.encode(params, cfg, read_ppm(args.query))
    refs = _collect_refs(args.refs)
    if not refs:
        raise UsageError("no reference images found")
    scored = [(contextual_similarity(query, enc.encode(params, cfg, read_ppm(p)), sim).cx, str(p))
              for p in refs]
    # stable on ties: input order breaks them
    ranked = sorted(enumerate(scored), key=lambda t: (-t[1][0], t[0]))
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "ranked.csv", "w") as fh:
        fh.write("rank,path,cx\n")
        for rank, (_, (cx, path)) in enumerate(ranked, start=1):
            fh.write(f"{rank},{path},{cx!r}\n")
    print(f"best match {ranked[0][1][1]} (cx {ranked[0][1][0]:.4f})")
    return 0


def cmd_match(args) -> int:
    cfg, params = enc.load_checkpoint(args.checkpoint)
    img1, img2 = read_ppm(args.image1), read_ppm(args.image2)
    result = mt.match_feature_maps(
        img1, enc.encode(params, cfg, img1), img2, enc.encode(params, cfg, img2),
        max_corners=args.max_corners, quality=args.quality, min_distance=args.min_distance,
        ratio=args.ratio, iterations=args.iterations, inlier_threshold=args.inlier_threshold,
        seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    mt.write_matches_csv(args.out / "matches.csv", result)
    write_ppm(args.out / "matches.ppm", mt.render_matches(img1, img2, result, cap=args.cap))
    inliers = 0 if result.model is None else len(result.model.inliers)
    print(f"{len(result.keypoints1)}/{len(result.keypoints2)} keypoints, "
          f"{len(result.matches)} matches, {inliers} inliers")
    return 0


def cmd_viz(args) -> int:
    cfg, params = enc.load_checkpoint(args.checkpoint)
    fmap = enc.encode(params, cfg, read_ppm(args.image))
    rgb = ev.pca_visualize(fmap)
    if args.scale > 1:
        rgb = np.repeat(np.repeat(rgb, args.scale, axis=0), args.scale, axis=1)
    args.out.mkdir(parents=True, exist_ok=True)
    target = args.out / f"{args.image.stem}_pca.ppm"
    write_ppm(target, rgb)
    print(f"wrote {target}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "retrieve": cmd_retrieve, "match": cmd_match, "viz": cmd_viz}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ContractError) as exc:
        parser.print_usage(sys.stderr)
        print(f"dejavu {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, DataError, mt.NoConsensusError) as exc:
        print(f"dejavu {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
