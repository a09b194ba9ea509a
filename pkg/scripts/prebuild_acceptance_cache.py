"""Fill tests/.acceptance_cache in parallel.

The acceptance tests for criteria 5-8 train 15 full-budget models and
run 27 evaluations; serially that is over an hour.  This script builds
the same content-addressed cache with a process pool so a subsequent
`pytest tests/test_acceptance.py` only reads cached artifacts.

Usage: python3 scripts/prebuild_acceptance_cache.py [workers]
"""

import os
import sys
from concurrent.futures import ProcessPoolExecutor

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

import test_acceptance as acc
from vine.config import load_config, parse_config, render_config


def _tasks():
    cfg = load_config(None)
    train, evals = [], []
    for row in ("(c)", "(d)", "(e)", "(f)"):
        for seed in acc.ACCEPTANCE_SEEDS:
            vcfg = acc._variant_cfg(cfg, row, seed)
            train.append(render_config(vcfg))
            evals.append((render_config(vcfg), None))
            if row in ("(c)", "(e)"):
                evals.append((render_config(vcfg), 0.0))
                evals.append((render_config(vcfg), 0.15))
    for seed in acc.ACCEPTANCE_SEEDS:
        only = cfg.with_values({"seed": seed, "loss.lambda_proto": 0.0})
        train.append(render_config(only))
        evals.append((render_config(only), None))
    train.append(render_config(cfg))
    evals.append((render_config(cfg), None))
    return train, evals


def _train_one(cfg_text: str) -> str:
    cfg = parse_config(cfg_text)
    acc._trained(cfg)
    return acc._cfg_key(cfg)


def _eval_one(task) -> str:
    cfg_text, shift = task
    cfg = parse_config(cfg_text)
    acc._eval_cached(cfg, view_shift=shift)
    return f"{acc._cfg_key(cfg)} shift={shift}"


def main() -> int:
    workers = int(sys.argv[1]) if len(sys.argv) > 1 else os.cpu_count() or 4
    train, evals = _tasks()
    train = list(dict.fromkeys(train))
    evals = list(dict.fromkeys(evals))
    print(f"{len(train)} trainings, {len(evals)} evaluations, "
          f"{workers} workers")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for i, key in enumerate(pool.map(_train_one, train)):
            print(f"trained {i + 1}/{len(train)}: {key}", flush=True)
        for i, key in enumerate(pool.map(_eval_one, evals)):
            print(f"evaluated {i + 1}/{len(evals)}: {key}", flush=True)
    print("cache complete")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
