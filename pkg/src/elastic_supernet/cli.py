"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data or file-format error,
4 numerical failure (including an empty search result).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from . import numerics as nx
from .config import RunConfig, default_config_text
from .curriculum import TrainLog, stage1_train
from .errors import ConfigError, DataFormatError, NumericalError, SearchError
from .importance import rearrange, score_importance
from .pipeline import (BUDGET_HEADER, STAGES, budget_rows, build_dataset, run_pipeline, run_router,
                       run_search, stage_seed, write_csv)
from .router import RouterParams
from .search import ParetoArchive

log = logging.getLogger("elastic_supernet")


def _budgets(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"budgets must be comma-separated numbers, got {text!r}") from None
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("budgets must be a non-empty list of values in [0, 1]")
    return vals


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastic-supernet", description=__doc__.splitlines()[0])
    p.add_argument("--dump-default-config", action="store_true", help="print the default YAML config and exit")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="YAML config file (defaults are used for missing keys)")
        sp.add_argument("--seed", type=_u64, help="override the config seed")

    sp = sub.add_parser("rearrange", help="score unit importance and reorder a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint-in", required=True)
    sp.add_argument("--checkpoint-out", required=True)
    sp.add_argument("--audit", help="permutation audit file (default: <checkpoint-out>.perm.txt)")

    sp = sub.add_parser("adapt", help="curriculum elastic adaptation")
    common(sp)
    sp.add_argument("--checkpoint-in", required=True)
    sp.add_argument("--checkpoint-out", required=True)
    sp.add_argument("--log", help="training log (default: <checkpoint-out>.log.txt)")
    sp.add_argument("--checkpoint-every", type=int, default=500, help="periodic checkpoint interval, 0 to disable")

    sp = sub.add_parser("search", help="NSGA-II search over an adapted supernet")
    common(sp)
    sp.add_argument("--checkpoint-in", required=True)
    sp.add_argument("--archive-out", required=True)
    sp.add_argument("--front-out", required=True)

    sp = sub.add_parser("train-router", help="router warm-up and joint training")
    common(sp)
    sp.add_argument("--checkpoint-in", required=True)
    sp.add_argument("--front", required=True, help="front-0 CSV written by the search command")
    sp.add_argument("--checkpoint-out", required=True)

    sp = sub.add_parser("eval", help="evaluate the router over a budget grid")
    common(sp)
    sp.add_argument("--checkpoint-in", required=True)
    sp.add_argument("--budgets", type=_budgets, help="comma-separated budgets, e.g. 0.2,0.3,0.4")
    sp.add_argument("--out", help="CSV output (default: stdout)")

    sp = sub.add_parser("pipeline", help="run every stage with checkpoints")
    common(sp)
    sp.add_argument("--output-dir", help="override the config output_dir")
    sp.add_argument("--resume", metavar="DIR", help="continue an interrupted run stored in DIR")
    sp.add_argument("--stop-after", choices=STAGES)
    return p


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.raw, "seed": args.seed})
    return cfg


def _load_checkpoint(path):
    try:
        return checkpoint.load_params(path)
    except OSError as e:
        raise DataFormatError(f"cannot read checkpoint {path}: {e}") from None


def _cmd_rearrange(args, cfg):
    params, _, _ = _load_checkpoint(args.checkpoint_in)
    data = build_dataset(cfg)
    n = min(cfg.raw["importance"]["samples"], len(data.train_y))
    params, rec = rearrange(params, score_importance(params, data.train_x[:n], n))
    checkpoint.save_params(args.checkpoint_out, params, meta={"stage": "rearrange"})
    Path(args.audit or f"{args.checkpoint_out}.perm.txt").write_text(rec.audit_text())


def _cmd_adapt(args, cfg):
    params, _, _ = _load_checkpoint(args.checkpoint_in)
    data = build_dataset(cfg)
    out = args.checkpoint_out

    def save_periodic(step, p):
        checkpoint.save_params(f"{out}.step{step}", p, meta={"stage": "stage1", "step": str(step)})

    tl = TrainLog()
    stage1_train(params, cfg.schedule(params.spec), data, cfg.optimizer(), stage_seed(cfg.seed, "stage1"),
                 cfg.raw["curriculum"]["batch_size"], train_log=tl,
                 checkpoint_every=args.checkpoint_every, on_checkpoint=save_periodic)
    checkpoint.save_params(out, params, meta={"stage": "stage1"})
    Path(args.log or f"{out}.log.txt").write_text(tl.text())


def _cmd_search(args, cfg):
    params, _, _ = _load_checkpoint(args.checkpoint_in)
    archive, _ = run_search(cfg, params, build_dataset(cfg))
    archive.write_csv(args.archive_out)
    archive.write_csv(args.front_out, front_only=True)


def _cmd_train_router(args, cfg):
    params, _, _ = _load_checkpoint(args.checkpoint_in)
    try:
        front = ParetoArchive.read_csv(args.front, params.spec)
    except OSError as e:
        raise DataFormatError(f"cannot read front {args.front}: {e}") from None
    params, router, lg = run_router(cfg, params, front, build_dataset(cfg))
    checkpoint.save_params(args.checkpoint_out, params, extra=router.arrays(), meta={"stage": "router"})
    Path(f"{args.checkpoint_out}.log.txt").write_text(lg.text())


def _cmd_eval(args, cfg):
    params, extra, _ = _load_checkpoint(args.checkpoint_in)
    if not any(k.startswith("router.") for k in extra):
        raise DataFormatError(f"{args.checkpoint_in} holds no router weights; run train-router first")
    router = RouterParams.from_arrays(extra)
    rows = budget_rows(params, router, build_dataset(cfg), args.budgets or cfg.budgets, cfg.router().delta)
    if args.out:
        write_csv(args.out, BUDGET_HEADER, rows)
    else:
        print(",".join(BUDGET_HEADER))
        for r in rows:
            print(",".join(str(v) for v in r))


def _cmd_pipeline(args, cfg):
    out = args.resume or args.output_dir
    run_pipeline(cfg, out, resume=args.resume is not None, stop_after=args.stop_after)


COMMANDS = {
    "rearrange": _cmd_rearrange, "adapt": _cmd_adapt, "search": _cmd_search,
    "train-router": _cmd_train_router, "eval": _cmd_eval, "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_default_config:
        sys.stdout.write(default_config_text())
        return 0
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
        env = os.environ.get("ELASTIC_SUPERNET_PRECISION")
        with nx.precision(env or cfg.precision):
            COMMANDS[args.command](args, cfg)
    except (ConfigError, DataFormatError, NumericalError, SearchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
