"""Command line entry point: ``curvclust ricci | train | eval``.

Exit codes: 0 success, 2 input error, 3 training diverged, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import GraphFormatError, GraphValidationError, load_graph
from .ricci import load_or_compute
from .trainer import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
    write_curves,
    write_metrics,
)

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("curvclust")


def _graph_args(p: argparse.ArgumentParser, labels: bool = True) -> None:
    p.add_argument("--edges", required=True, help="edge list (TSV, one src<TAB>dst per line)")
    p.add_argument("--features", required=True, help="node features (CSV, one row per node)")
    if labels:
        p.add_argument("--labels", help="ground-truth class per node (optional)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curvclust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("ricci", help="compute edge and node Ollivier-Ricci curvature")
    _graph_args(r, labels=False)
    r.add_argument("--lambda", dest="lam", type=float, default=0.5, help="idleness of the lazy walk")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("train", help="train the clustering model")
    _graph_args(t)
    t.add_argument("--config", required=True, help="key=value training config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.npz)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--lambda", dest="lam", type=float, help="override the config lambda")

    e = sub.add_parser("eval", help="score a trained checkpoint without training")
    _graph_args(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="config the checkpoint must match (default: stored config)")
    e.add_argument("--out", help="write membership.csv here")
    return parser


def _load(args):
    labels = getattr(args, "labels", None)
    return load_graph(args.edges, args.features, labels)


def _summary(row: dict) -> str:
    if math.isnan(row.get("nmi", math.nan)):
        return f"density={row['density']:.4f}"
    return f"ACC={row['acc']:.4f},NMI={row['nmi']:.4f},ARI={row['ari']:.4f}"


def _structure(row: dict) -> str:
    if math.isnan(row.get("nmi", math.nan)):
        return f"density={row['density']:.4f}"
    return f"density={row['density']:.4f},entropy={row['entropy']:.4f}"


def cmd_ricci(args) -> int:
    g = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = load_or_compute(g, args.lam, out / "ricci.npz", args.workers)
    table.to_csv(out / "edge_ricci.csv", out / "node_ricci.csv")
    v = table.edge_values
    if v.size:
        print(f"edges={v.size} mean={v.mean():.6f} min={v.min():.6f} max={v.max():.6f}")
    else:
        print("edges=0")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.lam is not None:
        cfg.lam = args.lam
    cfg.validate()
    g = _load(args)
    if cfg.normalize_features:
        g = g.row_normalized()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.npz"
    table = load_or_compute(g, cfg.lam, out / "ricci.npz", cfg.workers)
    try:
        result = train(g, table, cfg, metrics_path=out / "metrics.csv", curves_path=out / "curves.csv")
    except TrainingDiverged as exc:
        write_metrics(exc.history, out / "metrics.csv")
        write_curves(exc.history, out / "curves.csv")
        save_checkpoint(ckpt, {k: ad.Tensor(v) for k, v in exc.params.items()}, cfg)
        print(f"error: {exc}; last finite parameters saved to {ckpt}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(ckpt, result.params, cfg)
    np.savetxt(out / "membership.csv", result.state.membership, delimiter=",", fmt="%.17g")
    print(_summary(result.final))
    return EXIT_OK


def cmd_eval(args) -> int:
    expected = TrainConfig.load(args.config) if args.config else None
    params, stored = load_checkpoint(args.checkpoint, expected)
    cfg = expected or stored
    g = _load(args)
    if cfg.normalize_features:
        g = g.row_normalized()
    table = load_or_compute(g, cfg.lam)
    try:
        row, membership = predict(g, table, cfg, params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not fit this graph: {exc}") from exc
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / "membership.csv", membership, delimiter=",", fmt="%.17g")
    if not math.isnan(row["nmi"]):
        print(_summary(row))
    print(_structure(row))
    return EXIT_OK


COMMANDS = {"ricci": cmd_ricci, "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, GraphFormatError, GraphValidationError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
