"""Command line entry point: ``refineseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .nn.optim import TrainConfig
from .pipeline.synth import SynthSpec, load_split, synth_generate
from .refiner import DESK_CHANNELS, RefinerConfig
from .tensor import FormatError, NumericError, read_pgm, read_ppm, write_pgm


class UsageError(ValueError):
    pass


def _read_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"bad JSON in {path}: {e}") from e


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"expected comma separated numbers, got {text!r}") from e


def _load_model(path):
    from .pipeline.model import SegModel
    return SegModel.load(path)


def cmd_gen_data(args):
    spec = _read_json(args.spec)
    if args.seed is not None:
        spec["seed"] = args.seed
    out = synth_generate(SynthSpec.from_dict(spec), args.out)
    _emit({"data": str(out)})


def _train_parts(cfg, seed, defaults):
    arch = dict(channels=list(DESK_CHANNELS), enc_blocks=1, dec_blocks=1)
    arch.update(cfg.get("arch", {}))
    train = dict(defaults)
    train.update(cfg.get("train", {}))
    if seed is not None:
        train["seed"] = seed
    return arch, TrainConfig(**train)


def cmd_train_baseline(args):
    from .pipeline.train import train_baseline
    data = load_split(args.data, "train")
    cfg = _read_json(args.config)
    arch, train = _train_parts(cfg, args.seed, {"lr": 2e-3, "epochs": 6, "batch_size": 4})
    arch = RefinerConfig(num_classes=data.num_classes, **arch)
    crop = cfg.get("crop", [32, 64])
    model, tlog = train_baseline(data, arch, train, crop=None if crop is None else tuple(crop))
    model.save(args.out)
    _emit({"checkpoint": args.out, "steps": len(tlog.steps), "final_loss": tlog.losses[-1]})


def cmd_train_refiner(args):
    from .pipeline.train import train_refiner
    data = load_split(args.data, "train")
    model = _load_model(args.baseline)
    cfg = _read_json(args.config)
    arch, train = _train_parts(cfg, args.seed, {"lr": 2e-3, "epochs": 3, "batch_size": 4})
    arch = RefinerConfig(num_classes=model.num_classes, **arch)
    model, tlog = train_refiner(data, model, args.alpha, arch, train,
                                hidden=int(cfg.get("hidden", 64)), strategy=args.ensemble)
    model.save(args.out)
    _emit({"checkpoint": args.out, "steps": len(tlog.steps), "skipped": tlog.skipped,
           "final_loss": tlog.losses[-1] if tlog.steps else None})


def cmd_refine(args):
    from .pipeline.evaluate import refine_image
    model = _load_model(args.ckpt)
    image = read_ppm(args.image)
    gt = read_pgm(args.gt) if args.gt else None
    res = refine_image(model, image, args.ensemble, args.alpha, gt)
    write_pgm(args.out, res.labels)
    _emit({"out": args.out, "density": float(res.mask.mean()), "macs": res.macs,
           "latency_ms": {k: v * 1e3 for k, v in res.timings.items()}})


def cmd_select(args):
    from .pipeline.train import select_from_logits
    from .selector import selector_metrics
    from .tensor import argmax_channels, nearest_upsample
    model = _load_model(args.ckpt)
    image = read_ppm(args.image)
    low = model.baseline_logits([model.lowres_input(image)])[0]
    mask = select_from_logits(low, args.alpha, model.factor)
    write_pgm(args.out, mask.astype(np.uint8) * 255)
    line = {"out": args.out, "alpha": args.alpha, "selected": int(mask.sum()),
            "density": float(mask.mean())}
    if args.gt:
        pred = argmax_channels(nearest_upsample(low, model.factor))
        r = selector_metrics(mask, pred, read_pgm(args.gt))
        line.update(recall=r.recall, precision=r.precision)
    _emit(line)


def cmd_eval(args):
    from .pipeline.evaluate import evaluate
    model = _load_model(args.ckpt)
    data = load_split(args.data, args.split)
    report = evaluate(data, model, args.ensemble, args.alpha)
    _emit(report.to_dict())


def cmd_bench(args):
    from .pipeline.bench import bench_conv, bench_model
    densities = _floats(args.density)
    if args.ckpt:
        rows = bench_model(_load_model(args.ckpt), args.height, args.width, densities,
                           args.steps, args.warmup, args.seed or 0)
        for r in rows:
            _emit(r)
    if args.conv or not args.ckpt:
        for d in densities:
            _emit(bench_conv(args.conv_height, args.conv_width, args.channels, d, args.steps,
                             args.warmup, args.seed or 0).to_dict())


def cmd_verify(args):
    from .pipeline.verify import SUITES
    kwargs = {"seed": args.seed or 0}
    if args.cases is not None:
        kwargs["instances" if args.suite == "grad" else "cases"] = args.cases
    result = SUITES[args.suite](**kwargs)
    _emit(result)
    return 0 if result["passed"] else 1


def cmd_experiment(args):
    from .pipeline.experiment import ExperimentConfig, run_experiment
    cfg = _read_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    result = run_experiment(ExperimentConfig.from_dict(cfg), args.out)
    _emit({"out": args.out, "alpha": result.alpha, **result.gains(),
           "runtime_s": result.timings["stages"]["total"]})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refineseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        s = sub.add_parser(name, **kw)
        s.set_defaults(func=fn)
        s.add_argument("--seed", type=int, default=None)
        return s

    s = add("gen-data", cmd_gen_data, help="write the synthetic dataset")
    s.add_argument("--spec", help="JSON SynthSpec (defaults when omitted)")
    s.add_argument("--out", required=True)

    s = add("train-baseline", cmd_train_baseline, help="train the low-resolution baseline")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON with optional 'arch', 'train' and 'crop'")

    s = add("train-refiner", cmd_train_refiner, help="train refiner + ensembler")
    s.add_argument("--data", required=True)
    s.add_argument("--baseline", required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ensemble", choices=("gated", "direct"), default="gated")
    s.add_argument("--config", help="JSON with optional 'arch', 'train' and 'hidden'")

    s = add("refine", cmd_refine, help="refine one image")
    s.add_argument("--image", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--ensemble", choices=("baseline", "gated", "direct", "entropy", "oracle"),
                   default="gated")
    s.add_argument("--alpha", type=float)
    s.add_argument("--gt", help="label PGM (needed by the oracle ensemble)")
    s.add_argument("--out", required=True)

    s = add("select", cmd_select, help="write the entropy selection mask")
    s.add_argument("--image", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--gt", help="label PGM for recall/precision")
    s.add_argument("--out", required=True)

    s = add("eval", cmd_eval, help="evaluate a split")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--ensemble", choices=("baseline", "gated", "direct", "entropy", "oracle"),
                   default="gated")
    s.add_argument("--alpha", type=float)

    s = add("bench", cmd_bench, help="latency and MACs")
    s.add_argument("--ckpt")
    s.add_argument("--density", default="0.05,0.1,0.5,1.0")
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--warmup", type=int, default=100)
    s.add_argument("--conv", action="store_true", help="also run the single-conv benchmark")
    s.add_argument("--conv-height", type=int, default=256)
    s.add_argument("--conv-width", type=int, default=512)
    s.add_argument("--channels", type=int, default=32)

    s = add("verify", cmd_verify, help="built-in correctness suites")
    s.add_argument("--suite", choices=("conv", "grad", "coords"), required=True)
    s.add_argument("--cases", type=int)

    s = add("experiment", cmd_experiment, help="full desk-scale run")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON ExperimentConfig overrides")
    return p


ERRORS = (UsageError, CheckpointError, FormatError, NumericError, ValueError, OSError,
          KeyError, TypeError, ArithmeticError, RuntimeError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except ERRORS as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
