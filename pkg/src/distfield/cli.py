"""``distfield`` command line: synth, train, rectify, eval, pca."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import format_config, load_config, network_config, train_options
from .errors import DistfieldError, EmptyMask, EmptyOverlap
from .field import rectify
from .metrics import emit_report
from .network import field_losses, load_checkpoint, save_checkpoint
from .pca import pca_fit, save_pca, load_pca
from .pipeline import auto_mask, estimate_field, evaluate_samples
from .synth import load_dataset, write_dataset
from .train import train

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EMPTY = 2
EXIT_USAGE = 64

log = logging.getLogger("distfield")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads() -> None:
    n = os.environ.get("DISTFIELD_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def cmd_synth(args) -> int:
    seeds = range(args.seed, args.seed + args.count)
    write_dataset(args.out, seeds, args.size, magnitude_range=(args.magnitude_min, args.magnitude_max))
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    if args.seed is not None:
        cfg["seed"] = args.seed
    samples = load_dataset(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = train(network_config(cfg), samples, train_options(cfg))
    save_checkpoint(out, result.net)
    (out.parent / f"{out.name}.config.txt").write_text(format_config(cfg))
    result.write_log(out.parent / f"{out.name}.log.csv")
    print(f"saved {out} (best epoch {result.best_epoch})")
    return EXIT_OK


def _stem(path: str) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix.lower() in (".png", ".dfld", ".pgm") else p


def cmd_rectify(args) -> int:
    net = load_checkpoint(args.model)
    image = io.read_image(args.image)
    mask = io.read_mask(args.mask) if args.mask else auto_mask(image)
    field = estimate_field(net, image, mask)
    rectified, _ = rectify(image, mask, field)
    stem = _stem(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    io.write_image(stem.with_suffix(".png"), rectified)
    io.write_dfld(stem.with_suffix(".dfld"), field)
    smo = field_losses(field, field, np.ones((field.grid_h, field.grid_w), bool)).smo
    print(f"L_smo={smo!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.erode_blocks is not None:
        cfg["erode_blocks"] = args.erode_blocks
    net = load_checkpoint(args.model)
    samples = load_dataset(args.data)
    pca_model = load_pca(args.pca) if args.pca else None
    reports, extra, problems = evaluate_samples(
        net, samples, pca_model, args.k, cfg["bin_edges"], cfg["erode_blocks"], cfg["min_norm"]
    )
    emit_report(reports, args.out, extra)
    Path(args.out, "config.txt").write_text(format_config(cfg))
    if problems:
        print(f"empty mask or overlap for seeds: {problems}", file=sys.stderr)
        return EXIT_EMPTY
    print(f"evaluated {len(reports)} samples into {args.out}")
    return EXIT_OK


def cmd_pca(args) -> int:
    samples = load_dataset(args.data)
    model = pca_fit([s.gt for s in samples], args.k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pca(out, model)
    print(f"saved {model.k}-component model to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="distfield", description="Dense fingerprint distortion estimation and rectification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--magnitude-min", type=float, default=5.0)
    s.add_argument("--magnitude-max", type=float, default=30.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the distortion network")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rectify", help="rectify one image")
    r.add_argument("--model", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--mask")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rectify)

    e = sub.add_parser("eval", help="evaluate a model on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--pca")
    e.add_argument("--k", type=int, default=8)
    e.add_argument("--config")
    e.add_argument("--erode-blocks", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("pca", help="fit the PCA baseline on dataset ground truths")
    c.add_argument("--data", required=True)
    c.add_argument("--k", type=int, default=8)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_pca)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _threads()
    try:
        return args.func(args)
    except (EmptyMask, EmptyOverlap) as exc:
        print(f"distfield: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (DistfieldError, OSError, KeyError, ValueError) as exc:
        print(f"distfield: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
