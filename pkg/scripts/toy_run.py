"""Desk-scale end-to-end run: synthesize data, train, evaluate on held-out samples.

    python scripts/toy_run.py --work /tmp/toy --steps 2000 --seed 0
"""

import argparse
import json
import logging
import time
from pathlib import Path

from hclinpaint.checkpoint import save_checkpoint
from hclinpaint.config import RunConfig
from hclinpaint.pipeline import evaluate
from hclinpaint.synth import NoiseSource, make_dataset
from hclinpaint.training import load_dataset, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", default="/tmp/toy")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--eval-every", type=int, default=0)
    ap.add_argument("--config", default=None, help="RunConfig text file, e.g. configs/toy.cfg")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    work = Path(args.work)
    if not (work / "train" / "manifest.tsv").exists():
        make_dataset(args.n_train, 64, (0.1, 0.4), NoiseSource("image"), 0, work / "train")
        make_dataset(args.n_test, 64, (0.1, 0.4), NoiseSource("image"), 100_000, work / "test")
    train_set, test_set = load_dataset(work / "train"), load_dataset(work / "test")

    cfg = RunConfig.from_text(Path(args.config).read_text()) if args.config else RunConfig()
    cfg.train.seed = args.seed
    t0 = time.time()
    state = None
    chunk = args.eval_every or args.steps
    target = 0
    while target < args.steps:
        target = min(args.steps, target + chunk)
        cfg.train.steps = target
        state, _ = train(train_set, cfg, state=state, log_path=work / f"train_seed{args.seed}.log")
        report = evaluate(test_set, state.params, cfg)
        report["step"] = target
        report["minutes"] = (time.time() - t0) / 60
        print(json.dumps(report), flush=True)
    save_checkpoint(work / f"seed{args.seed}.ckpt", state.checkpoint(cfg))


if __name__ == "__main__":
    main()
