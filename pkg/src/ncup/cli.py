"""Command-line front end: ``ncup <subcommand> [flags]``.

Every numeric result is printed as ``key=value`` with 6 significant digits.
Exit codes: 0 success, 1 failed check or bad input data, 2 usage or scale mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import selftest
from .ablation import ABLATION_DATA, ABLATION_EPOCHS, ABLATION_LR, DEFAULT_VARIANTS, Variant, run_ablation
from .flowio import FlowFormatError, dump_weights_map, epe, flow_to_color, read_flo, read_ppm, write_flo, write_ppm
from .tensor import DimensionError
from .train import LOG_HEADER, DataConfig, LossConfig, area_downsample, gen_synthetic, train_loop
from .upsampler import (
    InterpNetConfig,
    NCUPModel,
    WeightsNetConfig,
    bilinear_baseline,
    load_model,
    ncup_upsample,
    save_model,
)

UPSAMPLE_SCALES = (2, 4, 8)


class CLIError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def emit(**pairs) -> None:
    print(" ".join(f"{k}={fmt(v)}" for k, v in pairs.items()))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NCUP_THREADS", "1")))
    except ValueError:
        return 1


# ------------------------------------------------------------------- helpers
def _model_from_flags(args) -> NCUPModel:
    wcfg = WeightsNetConfig(final_activation=args.final_act, batch_norm=not args.no_batch_norm)
    icfg = InterpNetConfig(pooling=args.pooling, downsamplings=args.downsamplings)
    return NCUPModel(args.scale, wcfg, icfg, seed=args.seed)


def _ready_for_inference(model: NCUPModel) -> NCUPModel:
    net = model.weights_net
    if model.weights_cfg.batch_norm and not net.bn1.initialized:
        # no running statistics were ever recorded: normalize with per-input statistics
        warnings.warn("model has no batch-norm statistics; using per-input statistics", stacklevel=3)
        return model.train()
    return model.eval()


def _load_or_init(args) -> NCUPModel:
    if args.model is None:
        warnings.warn("no --model given; using an untrained model", stacklevel=2)
        return _ready_for_inference(_model_from_flags(args))
    try:
        model = load_model(args.model)
    except (OSError, ValueError) as err:
        raise CLIError(f"cannot load model {args.model}: {err}") from err
    if model.scale != args.scale:
        raise CLIError(f"model scale {model.scale} does not match requested scale {args.scale}", code=2)
    return _ready_for_inference(model)


def _read_flow(path) -> np.ndarray:
    try:
        return read_flo(path)
    except (OSError, FlowFormatError) as err:
        raise CLIError(f"cannot read flow {path}: {err}") from err


def _guidance_lr(path, shape_lr: tuple[int, int], s: int) -> np.ndarray:
    """Guidance as (1, 3, h, w) in [0, 1]; high-resolution images are area-averaged down."""
    h, w = shape_lr
    if path is None:
        warnings.warn("no guidance given; using zeros", stacklevel=2)
        return np.zeros((1, 3, h, w))
    try:
        img = read_ppm(path).astype(np.float64).transpose(2, 0, 1)[None] / 255.0
    except (OSError, FlowFormatError) as err:
        raise CLIError(f"cannot read guidance {path}: {err}") from err
    gh, gw = img.shape[2:]
    if (gh, gw) == (h, w):
        return img
    if (gh, gw) == (s * h, s * w):
        return area_downsample(img, s)
    raise CLIError(f"guidance {gh}x{gw} fits neither the {h}x{w} flow nor its {s}x upsampling")


def _guidance_to_ppm(guidance: np.ndarray) -> np.ndarray:
    return np.round(np.clip(guidance[0].transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)


# ------------------------------------------------------------------ commands
def cmd_upsample(args) -> int:
    if args.scale not in UPSAMPLE_SCALES:
        raise CLIError(f"scale must be one of {UPSAMPLE_SCALES}, got {args.scale}", code=2)
    model = _load_or_init(args)
    flow_lr = _read_flow(args.flow)
    guide = _guidance_lr(args.guidance, flow_lr.shape[2:], args.scale)
    out, conf, _ = ncup_upsample(flow_lr, guide, model, return_conf=True)
    out = out.data
    write_flo(args.out, out)
    emit(out=args.out, height=out.shape[2], width=out.shape[3], mean_confidence=float(conf.data.mean()))
    if args.color:
        write_ppm(args.color, flow_to_color(out))
    if args.weights_map:
        dump_weights_map(conf.data[0, 0], args.weights_map)
    if args.gt:
        gt = _read_flow(args.gt)
        if gt.shape != out.shape:
            raise CLIError(f"ground truth {gt.shape[2]}x{gt.shape[3]} does not match output {out.shape[2]}x{out.shape[3]}")
        emit(epe=epe(out, gt), epe_bilinear=epe(bilinear_baseline(flow_lr, args.scale, rescale=False).data, gt))
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _model_from_flags(args)
    data = DataConfig(n_train=args.n_train, n_val=args.n_val, height=args.size, width=args.size, scale=args.scale)
    loss_cfg = LossConfig.full_resolution(args.alpha1)
    _, log = train_loop(model, data, args.epochs, lr=args.lr, loss_cfg=loss_cfg, seed=args.seed)
    save_model(model, out / "model.ckpt")
    (out / "train_log.csv").write_text("\n".join([LOG_HEADER, *(e.csv() for e in log)]) + "\n")
    if log:
        from .plotting import plot_training_curve

        plot_training_curve(log, out / "training_curve.png")
    counts = model.param_counts()
    emit(checkpoint=out / "model.ckpt", log=out / "train_log.csv", epochs=args.epochs, params=counts["total"])
    if log:
        last = log[-1]
        emit(train_loss=last.train_loss, val_epe_ncup=last.val_epe_ncup, val_epe_bilinear=last.val_epe_bilinear)
    return 0


def cmd_eval(args) -> int:
    pred, gt = _read_flow(args.pred), _read_flow(args.gt)
    if pred.shape != gt.shape:
        raise CLIError(f"shape mismatch: {pred.shape[2]}x{pred.shape[3]} vs {gt.shape[2]}x{gt.shape[3]}")
    emit(epe=epe(pred, gt), pixels=gt.shape[2] * gt.shape[3])
    return 0


def _compare_one(model: NCUPModel, gt: np.ndarray, guide: np.ndarray, s: int) -> tuple[float, float]:
    flow_lr = area_downsample(gt, s)
    pred = ncup_upsample(flow_lr, guide, model).data
    return epe(pred, gt), epe(bilinear_baseline(flow_lr, s, rescale=False).data, gt)


def cmd_compare(args) -> int:
    model = _load_or_init(args)
    s = args.scale
    cases: list[tuple[str, np.ndarray, np.ndarray]] = []
    if args.synthetic:
        for seed in range(args.seed0, args.seed0 + args.synthetic):
            smp = gen_synthetic(seed, args.size, args.size, s)
            cases.append((f"seed{seed}", smp.flow_hr_gt, smp.guidance_lr))
    guides = args.guidance or [None] * len(args.gt)
    if len(guides) != len(args.gt):
        raise CLIError("give one --guidance per ground-truth file", code=2)
    for path, gpath in zip(args.gt, guides):
        gt = _read_flow(path)
        if gt.shape[2] % s or gt.shape[3] % s:
            raise CLIError(f"{path}: {gt.shape[2]}x{gt.shape[3]} is not divisible by scale {s}")
        guide = _guidance_lr(gpath, (gt.shape[2] // s, gt.shape[3] // s), s)
        cases.append((Path(path).stem, gt, guide))
    if not cases:
        raise CLIError("nothing to compare: pass ground-truth files or --synthetic N", code=2)

    # map keeps input order, so aggregation is independent of the thread count
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(lambda c: _compare_one(model, c[1], c[2], s), cases))
    for (name, _, _), (e_n, e_b) in zip(cases, results):
        emit(case=name, epe_ncup=e_n, epe_bilinear=e_b)
    mean_n = float(np.mean([r[0] for r in results]))
    mean_b = float(np.mean([r[1] for r in results]))
    emit(cases=len(cases), mean_epe_ncup=mean_n, mean_epe_bilinear=mean_b, ratio=mean_n / mean_b)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = [f"{n},{fmt(a)},{fmt(b)}" for (n, _, _), (a, b) in zip(cases, results)]
        (out / "compare.csv").write_text("\n".join(["case,epe_ncup,epe_bilinear", *rows]) + "\n")
        from .plotting import plot_epe_bars

        plot_epe_bars([c[0] for c in cases], [r[0] for r in results], [r[1] for r in results],
                      out / "compare.png", title=f"scale {s}")
    return 0


def cmd_selftest(args) -> int:
    results = selftest.run_all(args.model)
    for name, ok, detail in results:
        print(f"suite={name} status={'pass' if ok else 'FAIL'} {detail}")
    failed = [name for name, ok, _ in results if not ok]
    emit(suites=len(results), failed=len(failed))
    if failed:
        print("failed suites: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    variants = list(DEFAULT_VARIANTS)
    if args.alpha1 is not None:
        variants.append(Variant(f"alpha1_{args.alpha1:g}", alpha1=args.alpha1))
    data = DataConfig(n_train=args.n_train, n_val=args.n_val, height=args.size, width=args.size, scale=args.scale)
    rows = run_ablation(variants, data, args.epochs, lr=args.lr, seed=args.seed)
    for r in rows:
        emit(variant=r.name, params=r.params, epe_ncup=r.val_epe_ncup, epe_bilinear=r.val_epe_bilinear,
             beats_bilinear=int(r.beats_bilinear))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["variant,params,epe_ncup,epe_bilinear"]
        lines += [f"{r.name},{r.params},{fmt(r.val_epe_ncup)},{fmt(r.val_epe_bilinear)}" for r in rows]
        (out / "ablation.csv").write_text("\n".join(lines) + "\n")
        from .plotting import plot_epe_bars

        plot_epe_bars([r.name for r in rows], [r.val_epe_ncup for r in rows], [r.val_epe_bilinear for r in rows],
                      out / "ablation.png", title="ablation")
    return 0 if all(r.beats_bilinear for r in rows) else 1


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    smp = gen_synthetic(args.seed, args.size, args.size, args.scale)
    write_flo(out / "gt.flo", smp.flow_hr_gt)
    write_flo(out / "flow_lr.flo", smp.flow_lr)
    write_ppm(out / "guidance.ppm", _guidance_to_ppm(smp.guidance_hr))
    write_ppm(out / "gt_color.ppm", flow_to_color(smp.flow_hr_gt))
    emit(gt=out / "gt.flo", flow_lr=out / "flow_lr.flo", guidance=out / "guidance.ppm",
         height=args.size, width=args.size, scale=args.scale)
    return 0


# -------------------------------------------------------------------- parser
def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--final-act", choices=("sigmoid", "softplus"), default="sigmoid")
    p.add_argument("--pooling", choices=("conf", "max"), default="conf")
    p.add_argument("--downsamplings", type=int, choices=(1, 2), default=1)
    p.add_argument("--no-batch-norm", action="store_true")


def _data_flags(p: argparse.ArgumentParser, n_train: int, n_val: int, epochs: int, lr: float) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--n-train", type=int, default=n_train)
    p.add_argument("--n-val", type=int, default=n_val)
    p.add_argument("--size", type=int, default=64, help="side of the square synthetic frames")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncup", description="Normalized-convolution flow upsampling.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scale", type=int, default=4)
    common.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("upsample", parents=[common], help="upsample a .flo file")
    p.add_argument("flow")
    p.add_argument("--guidance", help="PPM image at the flow resolution or at the output resolution")
    p.add_argument("--model")
    p.add_argument("--out", required=True)
    p.add_argument("--color", help="also write a color-coded PPM of the result")
    p.add_argument("--weights-map", help="also write the final confidence as a gray PPM")
    p.add_argument("--gt", help="ground-truth .flo; prints the EPE of the result")
    _model_flags(p)
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("train", parents=[common], help="train on synthetic data")
    p.add_argument("--out", required=True, help="directory for model.ckpt, train_log.csv and figures")
    p.add_argument("--alpha1", type=float, default=0.02)
    _data_flags(p, 500, 50, 20, 1e-4)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="EPE between two .flo files")
    p.add_argument("pred")
    p.add_argument("gt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="NCUP against bilinear on ground-truth flows")
    p.add_argument("gt", nargs="*")
    p.add_argument("--guidance", nargs="*")
    p.add_argument("--model")
    p.add_argument("--synthetic", type=int, default=0, metavar="N", help="add N synthetic held-out samples")
    p.add_argument("--seed0", type=int, default=100_000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", help="directory for compare.csv and compare.png")
    _model_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("selftest", help="run the built-in invariant suites")
    p.add_argument("--model", help="checkpoint to audit instead of a fresh model")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("ablate", parents=[common], help="train the ablation variants and tabulate them")
    p.add_argument("--out", help="directory for ablation.csv and ablation.png")
    p.add_argument("--alpha1", type=float, help="add a variant with this full-resolution loss weight")
    _data_flags(p, ABLATION_DATA.n_train, ABLATION_DATA.n_val, ABLATION_EPOCHS, ABLATION_LR)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic sample to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
        try:
            return args.func(args)
        except CLIError as err:
            print(f"error: {err}", file=sys.stderr)
            return err.code
        except (DimensionError, ValueError) as err:
            print(f"error: {err}", file=sys.stderr)
            return 1


if __name__ == "__main__":
    sys.exit(main())
