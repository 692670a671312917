"""
app.py · ConDA Desk · command line

    python app.py [--config desk|full|path.json] [--seed N] [--out DIR]
                  [--threads N] [--precision f32|f64] <command> ...
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

# ── Ensure project root is in Python path ──────────────────────────────────────
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from utils.errors import EXIT_CONFIG, ConfigError, CondaDeskError

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

logger = logging.getLogger("conda_desk")


class Parser(argparse.ArgumentParser):
    """Usage errors exit with the config error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="conda-desk", description="Range-view LiDAR domain adaptation at desk scale")
    p.add_argument("--config", default=None, help="preset name (desk, full) or JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("--log-level", default=None)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-gen", help="generate source and target datasets")

    s = sub.add_parser("project", help="project one PCRV cloud to the range view")
    s.add_argument("cloud")

    s = sub.add_parser("pretrain", help="source-only training")
    s.add_argument("--eval-target", action="store_true", help="score the target after every epoch")

    s = sub.add_parser("selftrain", help="two self-training rounds from a pre-trained checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--eval-target", action="store_true")

    s = sub.add_parser("eval", help="score a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--domain", choices=("source", "target"), default="target")
    s.add_argument("--pixels", action="store_true", help="score pixels instead of points")
    s.add_argument("--overlay", type=int, default=0, metavar="N", help="render N correctness overlays")
    s.add_argument("--fold", action="store_true", help="fold regularizers before inference")

    s = sub.add_parser("sweep", help="one self-training run per axis value")
    s.add_argument("axis", choices=("k", "k1", "k2", "sigma", "varpi", "template"),
                   help="k sets both rounds; k1 or k2 sweeps one round and keeps the other")
    s.add_argument("values", nargs="*")
    s.add_argument("--checkpoint", default=None, help="shared pre-trained weights")

    s = sub.add_parser("concat-demo", help="render intermediate-domain samples")
    s.add_argument("--count", type=int, default=2)

    s = sub.add_parser("stats", help="range-view occupancy report")
    s.add_argument("--domain", choices=("source", "target"), default="source")
    s.add_argument("--split", type=int, nargs=2, default=(2, 4), metavar=("M", "N"))

    sub.add_parser("ablate", help="component ablation ladder")
    return p


def run(args) -> int:
    # imported here so the thread policy is in place before numpy loads
    from modules import cli
    from utils.config import apply_overrides, load_config
    from utils.logs import LOG_LEVEL, setup_logging

    cfg = apply_overrides(load_config(args.config), seed=args.seed, precision=args.precision,
                          threads=resolve_threads(args))
    command = args.command.replace("-", "_")
    run_dir = cli.run_dir_for(args.command, cfg, args.out)
    setup_logging(run_dir, args.log_level or LOG_LEVEL)
    logger.info("%s: run directory %s, seed %d, %s", args.command, run_dir, cfg.seed, cfg.precision)

    if command == "synth_gen":
        cli.cmd_synth_gen(cfg, run_dir)
    elif command == "project":
        cli.cmd_project(cfg, args.cloud, run_dir)
    elif command == "pretrain":
        cli.cmd_pretrain(cfg, run_dir, eval_target=args.eval_target)
    elif command == "selftrain":
        cli.cmd_selftrain(cfg, args.checkpoint, run_dir, eval_target=args.eval_target)
    elif command == "eval":
        cli.cmd_eval(cfg, args.checkpoint, run_dir, domain=args.domain, per_point=not args.pixels,
                     overlay=args.overlay, fold=args.fold)
    elif command == "sweep":
        cli.cmd_sweep(cfg, args.axis, args.values, run_dir, checkpoint=args.checkpoint)
    elif command == "concat_demo":
        cli.cmd_concat_demo(cfg, run_dir, count=args.count)
    elif command == "stats":
        cli.cmd_stats(cfg, run_dir, domain=args.domain, split=tuple(args.split))
    elif command == "ablate":
        cli.cmd_ablate(cfg, run_dir)
    return 0


def _config_threads(source):
    """`threads` of a JSON config file, read without loading numpy. Broken files are left to load_config."""
    if not source or source in ("desk", "full"):
        return None
    try:
        data = json.loads(Path(source).read_text())
    except (OSError, ValueError):
        return None
    return data.get("threads") if isinstance(data, dict) else None


def resolve_threads(args) -> int:
    """--threads, then CONDA_DESK_THREADS, then the config's `threads`, then 1."""
    if args.threads is not None:
        return args.threads
    env = os.getenv("CONDA_DESK_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"CONDA_DESK_THREADS must be an integer, got {env!r}") from e
    value = _config_threads(args.config)
    if value is None:
        return 1
    if not isinstance(value, int):
        raise ConfigError(f"threads must be an integer, got {value!r}")
    return value


def apply_thread_policy(threads: int) -> None:
    for var in THREAD_VARS:
        os.environ[var] = str(threads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        threads = resolve_threads(args)
        if threads >= 1:
            apply_thread_policy(threads)
        return run(args)
    except CondaDeskError as e:
        print(f"conda-desk: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
