"""Command line front end.

Verbs:
  gen-data        write a synthetic dataset (JSONL index + PPM images)
  train           run both training stages for one experiment config
  eval            re-evaluate a finished run from its checkpoint
  ablate          run a matrix of experiment configs, emit reports
  inspect-tiling  show the grid the tiler picks for an image size
"""

import argparse
import json
import os
import re
import sys

from .datagen import generate, save_dataset
from .errors import BudgetError, ConfigError, ContractError, \
    DimensionError
from .experiment import (
    ablate,
    build_pipeline_config,
    build_task_spec,
    evaluate_run,
    load_config,
    run_experiment,
    validate_task_block,
)
from .tiling import select_grid

_SIZE_RE = re.compile(r"^(\d+)x(\d+)$")


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def cmd_gen_data(args) -> int:
    cfg = _load_json(args.config)
    task = cfg.get("task", cfg)
    problems = validate_task_block(task)
    if problems:
        raise ConfigError(
            f"invalid config {args.config}: " + "; ".join(problems))
    spec = build_task_spec(task, seed_override=args.seed)
    data = generate(spec)
    for split, samples in (("train", data.train), ("eval", data.eval)):
        index = save_dataset(samples, args.out, split)
        print(f"{split}: {len(samples)} samples -> {index}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = run_experiment(cfg, out_dir=args.out,
                            seed_override=args.seed)
    print(f"config_id: {result.config_id}")
    print(f"steps: {result.steps}")
    print(f"eval accuracy: {result.accuracy:.4f}")
    if args.out:
        print(f"artifacts: {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    accuracy = evaluate_run(cfg, args.out, seed_override=args.seed)
    print(f"config_id: {cfg['config_id']}")
    print(f"eval accuracy: {accuracy:.4f}")
    return 0


def cmd_ablate(args) -> int:
    matrix = _load_json(args.config)
    formats = ("csv", "json") if args.report is None else (args.report,)
    report = ablate(matrix, os.path.dirname(os.path.abspath(args.config)),
                    out_dir=args.out, seed_override=args.seed,
                    formats=formats)
    if args.out:
        for name in formats:
            print(f"wrote {os.path.join(args.out, 'report.' + name)}")
    for cell in report.rows:
        if cell.result is None:
            print(f"{cell.config_id}: FAILED ({cell.error})")
        else:
            print(f"{cell.config_id}: accuracy "
                  f"{cell.result.accuracy:.4f}")
    if not report.complete:
        print("report is PARTIAL: at least one cell failed")
        return 1
    return 0


def cmd_inspect_tiling(args) -> int:
    m = _SIZE_RE.match(args.size)
    if not m:
        raise ConfigError(
            f"size must look like 1024x768, got {args.size!r}")
    width, height = int(m.group(1)), int(m.group(2))
    tile, max_tiles, thumbnail = args.tile, args.max_tiles, True
    pipe_cfg = None
    if args.config:
        cfg = load_config(args.config)
        pipe_cfg = build_pipeline_config(cfg["model"])
        tile = pipe_cfg.tile_size
        max_tiles = pipe_cfg.max_tiles
        thumbnail = pipe_cfg.thumbnail
    grid = select_grid(width, height, max_tiles)
    patches = grid.n_tiles
    with_thumb = thumbnail and grid.n_tiles > 1
    if with_thumb:
        patches += 1
    print(f"input: {width}x{height}")
    print(f"tile: {tile}, max tiles: {max_tiles}")
    print(f"grid: {grid.cols}x{grid.rows} ({grid.n_tiles} tiles)")
    print(f"thumbnail: {'yes' if with_thumb else 'no'}")
    print(f"patches: {patches}")
    if pipe_cfg is not None:
        per_tile = pipe_cfg.tokens_per_tile()
        print(f"tokens per tile: {per_tile}")
        print(f"tokens per image: {per_tile * patches}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilefusion",
        description="tiled dual-encoder vision-language experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, need_out):
        p.add_argument("--config", required=True, metavar="PATH",
                       help="JSON config file")
        p.add_argument("--seed", type=int, default=None, metavar="N",
                       help="override the config's seed")
        p.add_argument("--out", required=need_out, metavar="DIR",
                       help="output directory")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p, need_out=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one experiment")
    common(p, need_out=False)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    common(p, need_out=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation matrix")
    common(p, need_out=False)
    p.add_argument("--report", choices=("csv", "json"), default=None,
                   help="write only this report format")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("inspect-tiling",
                       help="show grid choice for an image size")
    p.add_argument("size", help="image size as WIDTHxHEIGHT")
    p.add_argument("--config", default=None, metavar="PATH",
                   help="take tile geometry from this experiment config")
    p.add_argument("--tile", type=int, default=448)
    p.add_argument("--max-tiles", type=int, default=6)
    p.set_defaults(fn=cmd_inspect_tiling)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError, DimensionError, BudgetError,
            OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
