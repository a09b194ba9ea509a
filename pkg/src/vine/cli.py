"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, ablation.  Every command
is deterministic given (config, seed); the VINE_SEED environment
variable overrides the config seed, and an explicit --seed flag
overrides both.  All outputs go to paths given by flags.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import trainer as tr
from .config import config_help, load_config, validate_config, Config
from .episodes import (ManifestRow, episode_from_row, image_luminance,
                       write_manifest, write_pgm)
from .trainer import NanGradientError


def _resolve_config(args) -> Config:
    cfg = load_config(getattr(args, "config", None))
    env = os.environ.get("VINE_SEED")
    if env is not None:
        cfg = cfg.with_values({"seed": int(env)})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_values({"seed": args.seed})
    validate_config(cfg)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    count = args.count
    seeds = tr.episode_seeds(cfg, 1, count)
    rows, episodes = [], []
    for s in seeds:
        ep = tr._make_episode(cfg, "base", int(s))
        rows.append(ManifestRow(seed=int(s), class_id=ep.class_id,
                                split="base", k=cfg["episodes.k"],
                                view_shift=cfg["episodes.view_shift"]))
        episodes.append(ep)
    write_manifest(args.out, rows)
    if args.dump is not None:
        os.makedirs(args.dump, exist_ok=True)
        for i, ep in enumerate(episodes):
            write_pgm(os.path.join(args.dump, f"ep{i:04d}_query.pgm"),
                      image_luminance(ep.query_image))
            write_pgm(os.path.join(args.dump, f"ep{i:04d}_gt.pgm"),
                      ep.query_mask)
            write_pgm(os.path.join(args.dump, f"ep{i:04d}_support0.pgm"),
                      image_luminance(ep.supports[0][0]))
            write_pgm(os.path.join(args.dump, f"ep{i:04d}_support0_mask.pgm"),
                      ep.supports[0][1])
    print(f"wrote {count} rows to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        arrays = tr.train(cfg, log_fh=log_fh)
    finally:
        if log_fh is not None:
            log_fh.close()
    tr.save_checkpoint(args.out_checkpoint, arrays, cfg)
    print(f"wrote checkpoint {args.out_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    arrays, cfg = tr.load_checkpoint(args.checkpoint)
    env = os.environ.get("VINE_SEED")
    if env is not None:
        cfg = cfg.with_values({"seed": int(env)})
    dump = args.dump_masks

    def collect(i, ep, pred, result):
        os.makedirs(dump, exist_ok=True)
        write_pgm(os.path.join(dump, f"ep{i:04d}_pred.pgm"), pred)
        write_pgm(os.path.join(dump, f"ep{i:04d}_gt.pgm"), ep.query_mask)
        write_pgm(os.path.join(dump, f"ep{i:04d}_query.pgm"),
                  image_luminance(ep.query_image))
        for m, prior in result.disc_priors.items():
            write_pgm(os.path.join(dump, f"ep{i:04d}_prior_{m}.pgm"),
                      np.clip(prior.data, 0.0, 1.0))

    score = tr.evaluate(arrays, cfg, count=args.episodes,
                        collect=collect if dump else None)
    print(f"episodes={len(score['per_episode_miou'])} "
          f"miou={score['miou']:.4f} precision={score['precision']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = tr.tiny_config() if args.config is None else _resolve_config(args)
    report = tr.gradcheck_all(cfg)
    ok = True
    for path, rel in report:
        status = "PASS" if rel < 1e-4 else "FAIL"
        ok = ok and rel < 1e-4
        print(f"{status} {rel:.3e} {path}")
    print(f"gradcheck: {sum(r < 1e-4 for _, r in report)}/{len(report)} paths pass")
    return 0 if ok else 1


def cmd_ablation(args) -> int:
    cfg = _resolve_config(args)
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    if not seeds:
        raise ValueError(f"no seeds in {args.seeds!r}")
    rows = tr.run_ablation_suite(cfg, seeds)
    print(tr.format_ablation_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vine",
        description="Few-shot segmentation on synthetic episodes.",
        epilog="config keys:\n" + config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write an episode manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump", help="also export episode PGMs to this directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the episodic training loop")
    p.add_argument("--config")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--log", help="write per-step metrics lines here")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on novel episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--dump-masks", help="write pred/gt/prior PGMs here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablation", help="train and score all module subsets")
    p.add_argument("--config")
    p.add_argument("--seeds", default="0")
    p.set_defaults(fn=cmd_ablation)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NanGradientError as e:
        print(f"train aborted: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
