"""Adaptive-step vs fixed-step comparison on one config, over several seeds.

    python scripts/ablation.py --config configs/synthetic.cfg --seeds 0 1 2 --out runs/ablation
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch

from asmaml import harness
from asmaml.config import load_config


def run(config, overrides, seeds, fixed_steps, out, tasks=None):
    rows = []
    for seed in seeds:
        variants = [("adaptive", ["controller.enabled=true"])]
        variants += [(f"fixed-{t}", ["controller.enabled=false", f"controller.fixed_steps={t}"]) for t in fixed_steps]
        for name, extra in variants:
            cfg = load_config(config, overrides + extra + [f"train.seed={seed}"])
            splits = harness.load_splits(cfg)
            res = harness.train(cfg, Path(out) / f"{name}-seed{seed}", splits)
            ev = harness.evaluate(res.best_checkpoint, cfg, "test", splits, tasks=tasks)
            row = {"variant": name, "seed": seed, "mean": ev.mean, "std": ev.std,
                   "steps": res.state.steps}
            print(json.dumps(row), flush=True)
            rows.append(row)
    summary = {}
    for name in sorted({r["variant"] for r in rows}):
        summary[name] = float(np.mean([r["mean"] for r in rows if r["variant"] == name]))
    return rows, summary


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="configs/synthetic.cfg")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--fixed", type=int, nargs="+", default=[4, 9, 15])
    p.add_argument("--tasks", type=int)
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()
    torch.set_num_threads(1)
    rows, summary = run(args.config, args.set, args.seeds, args.fixed, args.out, args.tasks)
    best_fixed = max(v for k, v in summary.items() if k != "adaptive")
    print(json.dumps({"summary": summary, "adaptive_minus_best_fixed": summary["adaptive"] - best_fixed}))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.json").write_text(json.dumps({"rows": rows, "summary": summary}, indent=2))


if __name__ == "__main__":
    main()
