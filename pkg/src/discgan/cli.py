"""``discgan`` command-line tool: render, cluster, elbow, train, synthesize, evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ConfigError, keys, load_config
from .training import CheckpointError, TrainingDiverged

# config keys each subcommand reads, listed in its --help
READS = {
    "render": ["seed", *keys("dataset"), *keys("water")],
    "cluster": ["seed", *[k for k in keys("clustering") if k not in ("clustering.k_min", "clustering.k_max")]],
    "elbow": ["seed", *[k for k in keys("clustering") if k != "clustering.k"]],
    "train": ["seed", *keys("train")],
    "synthesize": ["seed"],
    "evaluate": ["seed", *keys("eval")],
}

EXIT_CONFIG = 2
EXIT_FAILURE = 1


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="YAML run configuration")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=None, help="cap numeric library worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="discgan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        epilog = "config keys read:\n" + "\n".join(f"  {k}" for k in READS[name])
        return sub.add_parser(name, parents=[common], help=help, description=help, epilog=epilog,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("render", "generate or load clean scenes and render them under every water type")
    p.add_argument("in_dir", nargs="?", type=Path,
                   help="directory of clean <name>.ppm + <name>.pfm pairs (omit with --procedural)")
    p.add_argument("--procedural", action="store_true", help="generate procedural scenes")

    for name, help in (("cluster", "fit K-means on style features and label every render"),
                       ("elbow", "scan k and write the inertia curve with the suggested k")):
        p = add(name, help)
        p.add_argument("source", nargs="?", type=Path,
                       help="render directory or features CSV (default: <out>/render)")

    p = add("train", "train the generator of one cluster (or 'all')")
    p.add_argument("cluster", help="cluster id or 'all'")

    p = add("synthesize", "restyle clean images with a trained cluster generator")
    p.add_argument("cluster", type=int, help="cluster id")
    p.add_argument("content", nargs="*", type=Path,
                   help="clean PPM images (default: validation scenes of the cluster)")

    p = add("evaluate", "write SSIM/PSNR/FID reports")
    p.add_argument("generated", nargs="?", type=Path, help="generated image directory")
    p.add_argument("reference", nargs="?", type=Path, help="reference image directory, paired by file name")
    return parser


def _run(args) -> None:
    cfg = load_config(args.config, args.seed)
    out: Path = args.out
    pipeline.write_config(cfg, out)
    cmd = args.command
    if cmd == "render":
        if args.procedural == (args.in_dir is not None):
            raise pipeline.PipelineError("render needs exactly one of in_dir or --procedural")
        records = pipeline.render(cfg, out, args.in_dir)
        print(f"rendered {len(records)} images into {out / 'render'}")
    elif cmd == "cluster":
        model = pipeline.cluster(cfg, out, args.source or out / "render")
        print(f"k={model.k} inertia={model.inertia:.6g} -> {out / 'clusters'}")
    elif cmd == "elbow":
        curve, k = pipeline.elbow(cfg, out, args.source or out / "render")
        for kk, inertia in curve:
            print(f"k={kk} inertia={inertia:.6g}")
        print(f"suggested k={k}")
    elif cmd == "train":
        ids = pipeline.cluster_ids(out) if args.cluster == "all" else [int(args.cluster)]
        for c in ids:
            log = pipeline.train(cfg, out, c)
            final = f" final loss_g_l1={log[-1]['loss_g_l1']:.6g}" if log else ""
            print(f"cluster {c}: {len(log)} epochs{final}")
    elif cmd == "synthesize":
        written = pipeline.synthesize_files(cfg, out, args.cluster, args.content or None)
        print(f"wrote {len(written)} images into {out / 'synth' / str(args.cluster)}")
    elif cmd == "evaluate":
        if (args.generated is None) != (args.reference is None):
            raise pipeline.PipelineError("evaluate takes both generated and reference directories or neither")
        if args.generated is not None:
            pipeline.evaluate_dirs(cfg, out, args.generated, args.reference)
        else:
            pipeline.evaluate_run(cfg, out)
        print((out / "reports" / "report.csv").read_text(), end="")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            with threadpool_limits(limits=args.threads):
                _run(args)
        else:
            _run(args)
    except ConfigError as exc:
        _error("config", exc)
        return EXIT_CONFIG
    except (pipeline.PipelineError, CheckpointError, TrainingDiverged, ValueError, OSError) as exc:
        _error(type(exc).__name__, exc)
        return EXIT_FAILURE
    return 0


def _error(kind: str, exc: Exception) -> None:
    # one JSON object per line so callers can parse failures
    print(json.dumps({"error": kind, "message": str(exc)}, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
