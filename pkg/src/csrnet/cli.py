"""Command-line front end: ``csrnet <subcommand> ...`` (or ``python -m csrnet``)."""

import argparse
import dataclasses
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

import numpy as np
from PIL import Image

from . import engine as E
from .config import dataclass_from_kv, parse_kv_text
from .errors import ConfigError, CSRNetError
from .model import (
    ModelConfig,
    base_only_config,
    build,
    count_flops,
    count_params,
    csrnet_config,
    csrnet_l_config,
    export_modulation,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    band_split,
    TrainConfig,
    evaluate,
    list_images,
    load_images,
    load_paired_dataset,
    predict,
    read_image,
    run_simulation,
    sample_band_split,
    train,
    train_two_stage,
    write_image,
    write_train_log,
)
from .retouch import RetouchOp
from .verify import check_layers, check_model

ARCHS = {
    "csrnet": csrnet_config,
    "csrnet-l": csrnet_l_config,
    "base": base_only_config,
    "base3x3": lambda: base_only_config(base_kernel=3),
}
RESOLVED_NAME = "resolved_config.cfg"
SIM_GAIN_JITTER = 0.0
GRADCHECK_TOL = 1e-6
MODEL_GRADCHECK_TOL = 1e-5


class CliError(CSRNetError):
    pass


# ---------------------------------------------------------------------------
# config resolution


@dataclasses.dataclass(frozen=True)
class CliConfig:
    arch: str
    model: ModelConfig
    train: TrainConfig

    def to_text(self):
        return f"arch = {self.arch}\n" + self.model.to_text() + self.train.to_text()


def _field_names(cls):
    return [f.name for f in dataclasses.fields(cls)]


def resolve_config(path=None, overrides=None, default_arch="csrnet"):
    """Merge a config file with flag overrides (flags win) into model + train configs."""
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_kv_text(fh.read(), path))
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    arch = values.pop("arch", default_arch)
    if arch not in ARCHS:
        raise ConfigError(f"unknown arch {arch!r}; expected one of {', '.join(ARCHS)}")
    model_keys, train_keys = set(_field_names(ModelConfig)), set(_field_names(TrainConfig))
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    model = dataclass_from_kv(
        ModelConfig, {k: v for k, v in values.items() if k in model_keys}, ARCHS[arch]()
    )
    train_cfg = dataclass_from_kv(TrainConfig, {k: v for k, v in values.items() if k in train_keys})
    return CliConfig(arch, model, train_cfg)


def _echo_config(text, *paths):
    """Write the resolved config into the directory of every output path."""
    for d in sorted({os.path.dirname(os.path.abspath(p)) for p in paths if p}):
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, RESOLVED_NAME), "w", encoding="utf-8") as fh:
            fh.write(text)


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--arch", choices=sorted(ARCHS), help="architecture preset")
    for name in _field_names(ModelConfig) + _field_names(TrainConfig):
        p.add_argument("--" + name.replace("_", "-"), dest=name, metavar="V")


def _overrides(args):
    names = ["arch"] + _field_names(ModelConfig) + _field_names(TrainConfig)
    return {n: getattr(args, n, None) for n in names}


def _config_from_args(args, default_arch="csrnet"):
    return resolve_config(args.config, _overrides(args), default_arch)


def parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CliError(f"bad size {text!r}; expected HxW, e.g. 480x480") from None
    if h < 1 or w < 1:
        raise CliError(f"bad size {text!r}; dimensions must be positive")
    return h, w


def parse_floats(text, what):
    try:
        return tuple(float(Fraction(v.strip())) for v in text.split(","))
    except (ValueError, ZeroDivisionError):
        raise CliError(f"bad {what} {text!r}; expected comma-separated numbers") from None


# ---------------------------------------------------------------------------
# subcommands


def _finish_training(args, cli, result, data):
    model = result.model
    save_checkpoint(model, args.out)
    if args.log:
        write_train_log(args.log, result.log)
        from .plots import figure_path, plot_training_curve

        if result.log:
            plot_training_curve(result.log, figure_path(args.log), title=f"{cli.arch} training")
    report = evaluate(model, data)
    print(f"final train-set PSNR: {report.mean_psnr:.6f} dB")
    print(f"wrote {args.out}")


def cmd_train(args):
    cli = _config_from_args(args)
    data = load_paired_dataset(args.input_dir, args.target_dir)
    _echo_config(cli.to_text(), args.out, args.log)
    model = build(cli.model, cli.train.seed)
    result = train(model, data, cli.train)
    _finish_training(args, cli, result, data)
    return 0


def cmd_train2(args):
    cli = _config_from_args(args)
    data = load_paired_dataset(args.input_dir, args.target_dir)
    _echo_config(cli.to_text(), args.out, args.log)
    model = build(cli.model, cli.train.seed)
    result = train_two_stage(model, data, cli.train)
    _finish_training(args, cli, result, data)
    return 0


def cmd_infer(args):
    model = load_checkpoint(args.ckpt)
    if os.path.isdir(args.input):
        os.makedirs(args.output, exist_ok=True)
        names = list_images(args.input)
        for name in names:
            out = predict(model, read_image(os.path.join(args.input, name)))
            write_image(os.path.join(args.output, os.path.splitext(name)[0] + ".png"), out)
        _echo_config(model.config.to_text(), os.path.join(args.output, "x"))
        print(f"wrote {len(names)} images to {args.output}")
    else:
        write_image(args.output, predict(model, read_image(args.input)))
        _echo_config(model.config.to_text(), args.output)
        print(f"wrote {args.output}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.ckpt)
    data = load_paired_dataset(args.input_dir, args.target_dir)
    report = evaluate(model, data, workers=args.workers)
    if args.report:
        _echo_config(model.config.to_text(), args.report)
        report.write_csv(args.report)
        from .plots import figure_path, plot_metrics

        plot_metrics(report, figure_path(args.report), title=os.path.basename(args.ckpt))
    print(report.summary())
    print(f"PSNR: {report.mean_psnr:.6f} dB")
    return 0


OPS = {
    "brightness": "brightness",
    "contrast": "contrast",
    "tone": "tone_curve",
    "wb": "white_balance",
    "sat": "saturation",
}


def _simulation_op(args):
    kind = OPS[args.op]
    if kind == "tone_curve":
        if not args.tone:
            raise CliError("--op tone needs --tone, e.g. --tone 3/8,2/8,1/8,2/8")
        return RetouchOp(kind, tone_params=parse_floats(args.tone, "tone parameters"))
    if kind == "white_balance":
        if not args.gains:
            raise CliError("--op wb needs --gains r,g,b")
        return RetouchOp(kind, gains=parse_floats(args.gains, "gains"))
    if args.alpha is None:
        raise CliError(f"--op {args.op} needs --alpha")
    return RetouchOp(kind, alpha=args.alpha)


def simulation_split(sources=None, size=64, train_count=2000, seed=0, gain_jitter=SIM_GAIN_JITTER):
    if sources:
        images, names = load_images(sources)
        return band_split(images, names, size, train_count, seed, gain_jitter)
    return sample_band_split(size=size, train_count=train_count, seed=seed, gain_jitter=gain_jitter)


def cmd_simulate(args):
    cli = _config_from_args(args, default_arch="base")
    op = _simulation_op(args)
    split = simulation_split(args.sources, cli.train.crop_size, args.train_crops, cli.train.seed, args.gain_jitter)
    _echo_config(cli.to_text(), args.report, args.out)
    sim = run_simulation(op, cli.model, cli.train, split)
    model, report = sim.model, sim.report
    if args.out:
        save_checkpoint(model, args.out)
    if args.report:
        from .plots import figure_path, plot_metrics, plot_training_curve

        report.write_csv(args.report)
        title = f"{op.describe()} / {cli.arch}"
        plot_metrics(report, figure_path(args.report), title=title)
        if sim.log:
            stem = os.path.splitext(args.report)[0]
            write_train_log(stem + "_train.csv", sim.log)
            plot_training_curve(sim.log, figure_path(stem + "_train.csv"), title=title)
    print(
        f"{op.describe()} arch={cli.arch} train={sim.train_size} held-out={len(report.rows)} "
        f"iters={cli.train.total_iters}"
    )
    print(f"held-out PSNR: {report.mean_psnr:.4f} dB")
    return 0


def cmd_gradcheck(args):
    errors = check_layers(args.seed)
    width = max(len(k) for k in errors)
    ok = True
    for name, err in errors.items():
        flag = "ok" if err < GRADCHECK_TOL else "FAIL"
        ok &= err < GRADCHECK_TOL
        print(f"{name:<{width}}  {err:.3e}  {flag}")
    if args.full:
        err = check_model(seed=args.seed)
        flag = "ok" if err < MODEL_GRADCHECK_TOL else "FAIL"
        ok &= err < MODEL_GRADCHECK_TOL
        print(f"{'csrnet_end_to_end':<{width}}  {err:.3e}  {flag}")
    return 0 if ok else 1


def cmd_params(args):
    print(count_params(_config_from_args(args).model))
    return 0


def cmd_flops(args):
    h, w = parse_size(args.size)
    print(count_flops(_config_from_args(args).model, h, w))
    return 0


def cmd_bench(args):
    if args.runs < 1 or args.warmup < 0 or args.workers < 1:
        raise CliError("--runs must be >= 1, --warmup >= 0, --workers >= 1")
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        cli = _config_from_args(args)
        model = build(cli.model, cli.train.seed)
    h, w = parse_size(args.size)
    img = np.random.default_rng(0).random((h, w, 3)).astype(E.DTYPE)
    batch = [img] * args.workers

    def run_batch(pool):
        if pool is None:
            forward(model, img)
        else:
            list(pool.map(lambda x: forward(model, x), batch))

    pool = ThreadPoolExecutor(args.workers) if args.workers > 1 else None
    try:
        for _ in range(args.warmup):
            run_batch(pool)
        times = []
        for _ in range(args.runs):
            t0 = time.perf_counter()
            run_batch(pool)
            times.append((time.perf_counter() - t0) / args.workers)
    finally:
        if pool is not None:
            pool.shutdown()
    med = statistics.median(times) * 1e3
    print(f"size={h}x{w} runs={args.runs} warmup={args.warmup} workers={args.workers}")
    print(f"median latency: {med:.3f} ms/image")
    return 0


def _minmax_gray(a):
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    return np.round(scaled * 255).astype(np.uint8)


def cmd_export_mod(args):
    model = load_checkpoint(args.ckpt)
    img = read_image(args.input)
    gamma, beta = export_modulation(model, img, args.layer)
    if gamma.ndim == 3:
        if not 0 <= args.channel < gamma.shape[0]:
            raise CliError(f"--channel {args.channel} out of range [0, {gamma.shape[0]})")
        maps = gamma[args.channel], beta[args.channel]
    else:
        # GFM parameters are one scalar per channel: a 1 x C strip
        maps = gamma[None, :], beta[None, :]
    prefix = args.out_prefix
    _echo_config(model.config.to_text(), prefix)
    written = []
    for name, m in zip(("gamma", "beta"), maps):
        path = f"{prefix}_{name}.png"
        Image.fromarray(_minmax_gray(m), mode="L").save(path)
        written.append(path)
        print(f"{name}: min {m.min():.6f} max {m.max():.6f} -> {path}")
    from .plots import plot_modulation

    heat = plot_modulation(
        gamma, beta, f"{prefix}_heatmap.png", channel=args.channel, title=f"layer {args.layer}"
    )
    print(f"heatmap -> {heat}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="csrnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    for name, fn, help_ in (
        ("train", cmd_train, "train on paired images"),
        ("train2", cmd_train2, "two-stage training (base first, then joint)"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        p.add_argument("--input-dir", required=True)
        p.add_argument("--target-dir", required=True)
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--log", help="training log CSV (a curve PNG is written next to it)")
        p.set_defaults(func=fn)

    p = sub.add_parser("infer", help="retouch an image (or a directory of images)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="learn a synthetic retouching operator")
    _add_config_flags(p)
    p.add_argument("--op", choices=sorted(OPS), required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tone", help="tone curve weights, e.g. 3/8,2/8,1/8,2/8")
    p.add_argument("--gains", help="white-balance gains r,g,b")
    p.add_argument("--sources", help="directory of source images (default: bundled photos)")
    p.add_argument("--train-crops", type=int, default=2000, help="random training crops")
    p.add_argument("--gain-jitter", type=float, default=SIM_GAIN_JITTER,
                   help="per-channel gain jitter on training crops (0 disables)")
    p.add_argument("--iters", dest="total_iters", metavar="N", help="alias for --total-iters")
    p.add_argument("--report", help="held-out metrics CSV")
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="PSNR / SSIM / Delta E on paired images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input-dir", required=True)
    p.add_argument("--target-dir", required=True)
    p.add_argument("--report", help="per-image CSV (a PSNR bar chart is written next to it)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true", help="also check full CSRNet end to end")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="trainable parameter count")
    _add_config_flags(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("flops", help="multiply-accumulate count for an image size")
    _add_config_flags(p)
    p.add_argument("--size", default="480x480", help="HxW")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", help="median forward latency")
    _add_config_flags(p)
    p.add_argument("--ckpt", help="checkpoint (default: fresh model from the config)")
    p.add_argument("--size", default="480x480", help="HxW")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-mod", help="write gamma / beta of one base layer as images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--channel", type=int, default=0, help="feature channel for SFM maps")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_export_mod)
    return parser


def run(argv=None):
    """Parse ``argv`` and dispatch; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CSRNetError, ValueError, IndexError) as exc:
        print(f"csrnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = f" {exc.filename}" if exc.filename else ""
        print(f"csrnet {args.command}: error:{where}: {exc.strerror or exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())
