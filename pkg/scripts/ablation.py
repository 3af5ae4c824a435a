"""Hierarchical vs single-stage masks on the toy task.

Trains (or reuses) one model per seed, then scores the finest-stage mask and the
coarsest mask nearest-upsampled to the same grid against the same ground truth.

    python scripts/ablation.py --work /tmp/toy --config configs/toy.cfg --seeds 0 1 2
"""

import argparse
import json
from pathlib import Path

import numpy as np

from hclinpaint.checkpoint import load_checkpoint, save_checkpoint
from hclinpaint.config import RunConfig
from hclinpaint.pipeline import evaluate
from hclinpaint.synth import NoiseSource, make_dataset
from hclinpaint.training import load_dataset, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", default="/tmp/toy")
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()

    work = Path(args.work)
    if not (work / "train" / "manifest.tsv").exists():
        make_dataset(500, 64, (0.1, 0.4), NoiseSource("image"), 0, work / "train")
        make_dataset(50, 64, (0.1, 0.4), NoiseSource("image"), 100_000, work / "test")
    train_set, test_set = load_dataset(work / "train"), load_dataset(work / "test")

    rows = []
    for seed in args.seeds:
        ck_path = work / f"seed{seed}.ckpt"
        if ck_path.exists() and load_checkpoint(ck_path).step >= args.steps:
            ck = load_checkpoint(ck_path)
            cfg, params = ck.config, ck.model_params()
        else:
            cfg = RunConfig.from_text(Path(args.config).read_text()) if args.config else RunConfig()
            cfg.train.seed, cfg.train.steps = seed, args.steps
            state, _ = train(train_set, cfg)
            save_checkpoint(ck_path, state.checkpoint(cfg))
            params = state.params
        rep = evaluate(test_set, params, cfg)
        rows.append((rep["iou"], rep["iou_stage1_up"]))
        print(json.dumps({"seed": seed, "iou_hierarchical": rep["iou"], "iou_stage1_up": rep["iou_stage1_up"]}), flush=True)

    fine, coarse = np.median(np.array(rows), axis=0)
    print(f"median finest-stage IoU {fine:.4f} vs stage-1 upsampled {coarse:.4f}")


if __name__ == "__main__":
    main()
