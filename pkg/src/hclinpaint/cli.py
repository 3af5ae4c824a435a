"""Command-line entry point: gen-data, train, detect, inpaint, eval.

Exit codes: 0 ok, 1 usage, 2 I/O or file format, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .detector import NonFiniteEmbeddingError
from .metrics import format_report
from .network import STAGES
from .pipeline import evaluate, restore
from .pnm import FormatError, read_image, write_image
from .synth import MaskGenerationError, NoiseSource, make_dataset
from .training import TrainingAborted, load_dataset, state_from_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for I/O here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ratio(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(t) for t in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    if not 0 <= lo <= hi <= 1:
        raise argparse.ArgumentTypeError(f"need 0 <= LO <= HI <= 1, got {text!r}")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hclinpaint", description="Blind inpainting with hierarchical contrastive mask detection.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize a corrupted-image dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--count", required=True, type=int)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--ratio", type=_ratio, default=(0.1, 0.4))
    g.add_argument("--noise", choices=("constant", "uniform", "image"), default="image")
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--config", type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", type=Path, help="continue from this checkpoint")
    t.add_argument("--log", type=Path, help="per-step loss log (tab separated)")

    d = sub.add_parser("detect", help="predict corruption masks for one image")
    d.add_argument("--ckpt", required=True, type=Path)
    d.add_argument("--image", required=True, type=Path)
    d.add_argument("--out-mask", required=True, type=Path)
    d.add_argument("--emit-scales", type=Path, help="also write mask_s{1,2,3}.pgm here")
    d.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("inpaint", help="blindly restore one image")
    i.add_argument("--ckpt", required=True, type=Path)
    i.add_argument("--image", required=True, type=Path)
    i.add_argument("--out", required=True, type=Path)
    i.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="score detection and restoration on a dataset")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--report", required=True, type=Path)
    e.add_argument("--seed", type=int, default=0)
    return ap


def _gen_data(a) -> None:
    if a.count < 1 or a.size < 8 or a.size % 8:
        raise UsageError("--count must be >= 1 and --size a positive multiple of 8")
    make_dataset(a.count, a.size, a.ratio, NoiseSource(a.noise), a.seed, a.out)


def _train(a) -> None:
    data = load_dataset(a.data)
    state = None
    if a.resume:
        ck = load_checkpoint(a.resume)
        cfg, state = ck.config, state_from_checkpoint(ck)
    else:
        cfg = RunConfig.from_text(a.config.read_text()) if a.config else RunConfig()
    if a.steps is not None:
        cfg.train.steps = a.steps
    if a.seed is not None:
        if state is not None and a.seed != cfg.train.seed:
            raise UsageError("--seed cannot change the seed of a resumed run")
        cfg.train.seed = a.seed
    train(data, cfg, out=a.out, state=state, log_path=a.log)


def _load_model(path: Path):
    ck = load_checkpoint(path)
    return ck.model_params(), ck.config


def _detect(a) -> None:
    params, cfg = _load_model(a.ckpt)
    res = restore(read_image(a.image), params, cfg, a.seed)
    masks = res.detections[0].masks
    write_image(a.out_mask, masks[3])
    if a.emit_scales:
        a.emit_scales.mkdir(parents=True, exist_ok=True)
        for s in STAGES:
            write_image(a.emit_scales / f"mask_s{s}.pgm", masks[s])


def _inpaint(a) -> None:
    params, cfg = _load_model(a.ckpt)
    res = restore(read_image(a.image), params, cfg, a.seed)
    write_image(a.out, res.restored[0])


def _eval(a) -> None:
    params, cfg = _load_model(a.ckpt)
    report = evaluate(load_dataset(a.data), params, cfg, a.seed)
    a.report.write_text(format_report(report))


COMMANDS = {"gen-data": _gen_data, "train": _train, "detect": _detect, "inpaint": _inpaint, "eval": _eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[a.cmd](a)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, NonFiniteEmbeddingError) as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, CheckpointError, ConfigError, MaskGenerationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
