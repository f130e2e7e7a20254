"""Command-line surface: infer, train, eval, quantize, bench.

Exit codes: 0 success, 1 computation failure, 2 bad input or arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import bench as bench_mod
from . import modelfile, quant
from .arch import MMNetConfig, build_mmnet, forward, init_weights
from .data import load_dataset, synth_fixtures
from .losses import LossWeights, metric_gradient_error, metric_mad
from .ops import bilinear_resize
from .train import (
    AdamState,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_loop,
)

EXIT_OK = 0
EXIT_COMPUTE = 1
EXIT_BAD_INPUT = 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_BAD_INPUT):
        super().__init__(message)
        self.code = code


def _load_any_model(path):
    """Returns (kind, config, infer_fn) for float or quantized containers."""
    try:
        config, tensors, extras, _ = modelfile.load_model(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc
    except modelfile.ModelFileError as exc:
        raise CliError(f"cannot load model {path}: {exc}") from exc
    if extras.get("kind") == "quant":
        qm = quant.load_quantized(path)
        return "quant", qm.config, lambda img: quant.run_quantized(qm, img), qm
    graph = build_mmnet(config)
    weights = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    return "float", config, lambda img: forward(graph, weights, img), None


def _read_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise CliError(f"image not found: {path}") from exc
    except Exception as exc:
        raise CliError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)[None]  # (1,3,h,w)


def _write_alpha_png(path, alpha):
    gray = np.clip(np.round(alpha * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path)


def cmd_infer(args):
    kind, config, infer, _ = _load_any_model(args.model)
    image = _read_image(args.image)
    orig_h, orig_w = image.shape[2:]
    s = config.input_size
    resized = bilinear_resize(image, s, s)
    alpha = infer(resized)
    if args.original_size:
        alpha = bilinear_resize(alpha, orig_h, orig_w)
    _write_alpha_png(args.out, alpha[0, 0])
    print(f"wrote {args.out} ({alpha.shape[3]}x{alpha.shape[2]}, {kind} model)")
    return EXIT_OK


def cmd_eval(args):
    kind, config, infer, _ = _load_any_model(args.model)
    try:
        samples = load_dataset(args.dataset)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    if not samples:
        raise CliError(f"dataset {args.dataset} is empty")
    s = config.input_size
    grads, mads = [], []
    for sample in samples:
        image = sample.image[None]
        gt = sample.alpha[None]
        resized = bilinear_resize(image, s, s)
        alpha = infer(resized)
        # evaluate at the ground-truth resolution
        alpha_full = bilinear_resize(alpha, gt.shape[2], gt.shape[3])
        ge = metric_gradient_error(alpha_full, gt)
        mad = metric_mad(alpha_full, gt)
        grads.append(ge)
        mads.append(mad)
        print(
            f"{sample.source_id}: gradient_error_x1e3={ge * 1e3:.4f} "
            f"mad_x1e2={mad * 1e2:.4f}"
        )
    print(
        f"mean: gradient_error_x1e3={np.mean(grads) * 1e3:.4f} "
        f"mad_x1e2={np.mean(mads) * 1e2:.4f} images={len(samples)}"
    )
    return EXIT_OK


def cmd_bench(args):
    kind, config, infer, qm = _load_any_model(args.model)
    s = config.input_size
    try:
        report = bench_mod.run_benchmark(
            infer,
            (1, 3, s, s),
            runs=args.runs,
            warmup=args.warmup,
            threads=args.threads,
            allow_multithread=args.allow_multithread,
            seed=args.seed,
            config={
                "model": str(args.model),
                "kind": kind,
                "width_multiplier": config.width_multiplier,
                "input_size": config.input_size,
            },
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if report.std_ms >= report.mean_ms:
        print("warning: pathological timing jitter (std >= mean)", file=sys.stderr)
    print(report.format())
    if qm is not None:
        counts = " ".join(f"{k}={v}" for k, v in sorted(qm.counters.items()))
        print(f"int8 path counters: {counts}")
    return EXIT_OK


_TRAIN_KEYS = {
    "lr", "weight_decay", "batch_size", "max_steps", "seed",
    "loss_weights", "augment", "checkpoint_every",
}
_MODEL_KEYS = {"width_multiplier", "input_size", "channel_rounding"}


def _parse_train_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"invalid JSON in {path}: {exc}") from exc
    model_raw = raw.pop("model", {})
    train_raw = raw.pop("train", {})
    if raw:
        raise CliError(f"unknown config section(s): {', '.join(sorted(raw))}")
    for k in model_raw:
        if k not in _MODEL_KEYS:
            raise CliError(f"unknown model config field: {k}")
    for k in train_raw:
        if k not in _TRAIN_KEYS:
            raise CliError(f"unknown train config field: {k}")
    try:
        model_cfg = MMNetConfig(**model_raw)
        lw = train_raw.pop("loss_weights", None)
        aug = train_raw.pop("augment", None)
        train_cfg = TrainConfig(**train_raw)
        if lw is not None:
            train_cfg.loss_weights = LossWeights(**lw)
        if aug is not None:
            from .data import AugmentConfig

            train_cfg.augment = AugmentConfig(**aug)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc
    return model_cfg, train_cfg


def _training_data(args, input_size):
    if args.synthetic:
        return synth_fixtures(args.synthetic, input_size, seed=args.fixture_seed)
    if not args.dataset:
        raise CliError("provide a dataset directory or --synthetic N")
    try:
        return load_dataset(args.dataset)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from exc


def cmd_train(args):
    model_cfg, train_cfg = _parse_train_config(args.config)
    if args.steps is not None:
        train_cfg.max_steps = args.steps
    graph = build_mmnet(model_cfg)
    start_step = 0
    if args.resume:
        _, weights, state = load_checkpoint(args.resume, expected_config=model_cfg)
        start_step = state.step
    else:
        weights = init_weights(graph, seed=train_cfg.seed)
        state = AdamState()
    data = _training_data(args, model_cfg.input_size)
    if not data:
        raise CliError("training data is empty")
    train_cfg.checkpoint_path = args.out
    report = train_loop(graph, weights, data, train_cfg, state=state,
                        start_step=start_step)
    save_checkpoint(args.out, graph, weights, state)
    log_path = Path(args.out).with_suffix(".log")
    log_path.write_text("\n".join(report.log_lines()) + "\n")
    final = report.final or {}
    print(f"wrote checkpoint {args.out} (final total loss "
          f"{final.get('total', float('nan')):.6f}); log at {log_path}")
    return EXIT_OK


def cmd_quantize(args):
    try:
        config, weights, _ = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, modelfile.ModelFileError) as exc:
        raise CliError(str(exc)) from exc
    graph = build_mmnet(config)
    data = _training_data(args, config.input_size)
    if not data:
        raise CliError("calibration data is empty")
    batches = [s.image[None] for s in data]
    qm = quant.quantize_model(graph, weights, batches)
    quant.save_quantized(args.out, qm)
    print(f"wrote quantized model {args.out} "
          f"({len(qm.qweights)} quantized conv layers)")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mmnet",
                                description="Portrait matting engine")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("infer", help="run a model on one image")
    sp.add_argument("model")
    sp.add_argument("image")
    sp.add_argument("out")
    sp.add_argument("--original-size", action=argparse.BooleanOptionalAction,
                    default=True,
                    help="upscale the matte to the input image's resolution")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="compute metrics over a dataset")
    sp.add_argument("model")
    sp.add_argument("dataset")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="single-thread latency benchmark")
    sp.add_argument("model")
    sp.add_argument("--runs", type=int, default=100)
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--allow-multithread", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("train", help="train from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--dataset")
    sp.add_argument("--synthetic", type=int, default=0,
                    help="train on N generated fixtures instead of a dataset")
    sp.add_argument("--fixture-seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=None,
                    help="override max_steps from the config")
    sp.add_argument("--resume", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("quantize", help="emit an int8 model from a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--synthetic", type=int, default=0)
    sp.add_argument("--fixture-seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_quantize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
