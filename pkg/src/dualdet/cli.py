"""Command-line entry point: train, fine-tune, evaluate, inspect, ablate.

Exit codes are stable: 0 success, 2 configuration/usage error, 3 numeric
abort during training, 4 checkpoint error.  Every run refuses to reuse an
existing output directory unless --force is given, and records its
resolved config and a manifest before doing any work.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

from . import checkpoint as ckpt_mod
from . import config as config_mod
from . import training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4

# Fusion-combination grid: which encoder feeds each branch, one row per
# published combination (single paths, one fused branch, both fused).
TABLE4_ROWS = [
    {"fusion_cls_conv": False, "fusion_cls_fc": True, "fusion_reg_conv": True, "fusion_reg_fc": False},
    {"fusion_cls_conv": True, "fusion_cls_fc": False, "fusion_reg_conv": False, "fusion_reg_fc": True},
    {"fusion_cls_conv": True, "fusion_cls_fc": False, "fusion_reg_conv": True, "fusion_reg_fc": False},
    {"fusion_cls_conv": False, "fusion_cls_fc": True, "fusion_reg_conv": False, "fusion_reg_fc": True},
    {"fusion_cls_conv": True, "fusion_cls_fc": True, "fusion_reg_conv": False, "fusion_reg_fc": True},
    {"fusion_cls_conv": True, "fusion_cls_fc": True, "fusion_reg_conv": True, "fusion_reg_fc": False},
    {"fusion_cls_conv": True, "fusion_cls_fc": False, "fusion_reg_conv": True, "fusion_reg_fc": True},
    {"fusion_cls_conv": True, "fusion_cls_fc": True, "fusion_reg_conv": True, "fusion_reg_fc": True},
]

TABLE5_ROWS = [
    {"meta_cls": False, "meta_reg": False},
    {"meta_cls": True, "meta_reg": False},
    {"meta_cls": False, "meta_reg": True},
    {"meta_cls": True, "meta_reg": True},
]

ABLATION_SCALE = 0.25          # episode counts per cell
ABLATION_EVAL_REPEATS = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _prepare_out(out_dir: str, force: bool) -> None:
    if os.path.exists(out_dir) and not force:
        raise CliError(f"output directory {out_dir} already exists "
                       "(pass --force to overwrite)", EXIT_CONFIG)
    os.makedirs(out_dir, exist_ok=True)


def _write_manifest(out_dir: str, command: str, args: argparse.Namespace,
                    cfg: config_mod.TrainConfig = None) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_path": getattr(args, "config", None),
        "out_dir": out_dir,
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    if cfg is not None:
        config_mod.dump_resolved(cfg, os.path.join(out_dir, "config.resolved.json"))


def _load_config(args) -> config_mod.TrainConfig:
    try:
        cfg = config_mod.load_config(args.config)
    except config_mod.ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from exc
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_train_base(args) -> int:
    cfg = _load_config(args)
    _prepare_out(args.out, args.force)
    _write_manifest(args.out, "train-base", args, cfg)
    try:
        ckpt, _ = training.train_base(cfg, log_path=os.path.join(args.out, "train_log.csv"))
    except training.NumericAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    ckpt_mod.save_checkpoint(ckpt, os.path.join(args.out, "base.ckpt"))
    print(f"wrote {args.out}/base.ckpt after {ckpt.iteration} episodes")
    return EXIT_OK


def cmd_finetune(args) -> int:
    try:
        stored = ckpt_mod.load_checkpoint(getattr(args, "from"))
    except ckpt_mod.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    if args.config is not None:
        cfg = _load_config(args)
    else:
        try:
            cfg = config_mod.from_dict(stored.config)
        except config_mod.ConfigError as exc:
            raise CliError(f"config error in checkpoint: {exc}", EXIT_CONFIG) from exc
    _prepare_out(args.out, args.force)
    cfg = cfg.replace(finetune_k=args.shots)
    _write_manifest(args.out, "finetune", args, cfg)
    try:
        ckpt, _ = training.finetune(stored, args.shots, cfg,
                                    log_path=os.path.join(args.out, "train_log.csv"))
    except training.NumericAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ckpt_mod.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    path = os.path.join(args.out, f"ft_{args.shots}.ckpt")
    ckpt_mod.save_checkpoint(ckpt, path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        stored = ckpt_mod.load_checkpoint(getattr(args, "from"))
        detector_cfg = config_mod.from_dict(stored.config)
        result = training.evaluate_checkpoint(stored, args.subset,
                                              repeats=args.repeats, num_scenes=args.scenes)
    except ckpt_mod.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (config_mod.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _prepare_out(args.out, args.force)
    _write_manifest(args.out, "eval", args, detector_cfg)
    with open(os.path.join(args.out, "eval.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(result.csv_rows()) + "\n")
    print(result.table())
    return EXIT_OK


def cmd_inspect_weights(args) -> int:
    try:
        with open(args.log, encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except FileNotFoundError:
        print(f"log file not found: {args.log}", file=sys.stderr)
        return EXIT_CONFIG
    if not lines:
        print(f"log file {args.log} is empty", file=sys.stderr)
        return EXIT_CONFIG
    header = lines[0].split(",")
    wanted = ["iteration", "lambda_cls_conv", "lambda_cls_fc",
              "lambda_reg_conv", "lambda_reg_fc"]
    missing = [c for c in wanted if c not in header]
    if missing:
        print(f"log {args.log} lacks columns: {', '.join(missing)}", file=sys.stderr)
        return EXIT_CONFIG
    cols = [header.index(c) for c in wanted]
    rows = [ln.split(",") for ln in lines[1:]]
    if not rows:
        print(f"log {args.log} has no data rows", file=sys.stderr)
        return EXIT_CONFIG
    limit = 2000
    if len(rows) > limit:
        # keep first and last, evenly thin the middle
        idx = sorted({0, len(rows) - 1} |
                     {round(i * (len(rows) - 1) / (limit - 1)) for i in range(limit)})
        rows = [rows[i] for i in idx][:limit]
    _prepare_out(args.out, args.force)
    _write_manifest(args.out, "inspect-weights", args)
    out_path = os.path.join(args.out, "lambda_trajectories.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(wanted) + "\n")
        for row in rows:
            fh.write(",".join(row[c] for c in cols) + "\n")
    print(f"wrote {out_path} ({len(rows)} rows)")
    return EXIT_OK


def _ablation_cells(grid: str):
    if grid == "table4":
        return TABLE4_ROWS
    if grid == "table5":
        return TABLE5_ROWS
    raise CliError(f"unknown grid {grid!r} (expected table4 or table5)", EXIT_CONFIG)


def run_ablation_cell(cfg: config_mod.TrainConfig, overrides: dict, seed: int):
    """Train + fine-tune + evaluate one ablation configuration."""
    cell_cfg = cfg.replace(
        seed=seed,
        base_episodes=max(1, int(cfg.base_episodes * ABLATION_SCALE)),
        finetune_episodes=max(1, int(cfg.finetune_episodes * ABLATION_SCALE)),
        **overrides).validate()
    base_ckpt, _ = training.train_base(cell_cfg)
    ft_ckpt, _ = training.finetune(base_ckpt, cell_cfg.finetune_k, cell_cfg)
    novel = training.evaluate_checkpoint(ft_ckpt, "novel", repeats=ABLATION_EVAL_REPEATS)
    base = training.evaluate_checkpoint(ft_ckpt, "base", repeats=ABLATION_EVAL_REPEATS)
    return base.map_mean, novel.map_mean


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    cells = _ablation_cells(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    _prepare_out(args.out, args.force)
    _write_manifest(args.out, "ablate", args, cfg)
    flag_names = sorted(cells[0])
    header = ["grid", "cell", "seed"] + flag_names + ["base_map50", "novel_map50"]
    rows = [",".join(header)]
    for ci, overrides in enumerate(cells, start=1):
        for seed in seeds:
            try:
                base_map, novel_map = run_ablation_cell(cfg, overrides, seed)
            except training.NumericAbort as exc:
                print(f"aborted: {exc}", file=sys.stderr)
                return EXIT_NUMERIC
            row = [args.grid, str(ci), str(seed)]
            row += [str(int(overrides[f])) for f in flag_names]
            row += [repr(base_map), repr(novel_map)]
            rows.append(",".join(row))
            print(f"{args.grid} cell {ci} seed {seed}: "
                  f"base {base_map:.3f} novel {novel_map:.3f}", flush=True)
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"wrote {args.out}/ablation.csv ({len(rows) - 1} cells)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualdet",
        description="Few-shot shape detector: train, fine-tune, evaluate, ablate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="run the base training phase")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("finetune", help="K-shot fine-tuning from a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--from", required=True)
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="held-out evaluation of a checkpoint")
    p.add_argument("--from", required=True)
    p.add_argument("--subset", choices=("base", "novel", "all"), required=True)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-weights", help="extract fusion-weight trajectories")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_inspect_weights)

    p = sub.add_parser("ablate", help="run a fusion or meta-loss ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt_mod.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
