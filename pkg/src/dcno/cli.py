"""Command-line driver: generate, train, eval, rollout, diagnose, params.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diagnostics, io
from .datagen import TASKS, GenConfig, make_dataset
from .layers import ModelConfig, build_model, count_parameters
from .training import TrainConfig, evaluate, rollout_evaluate, teacher_forcing_pairs, train

log = logging.getLogger("dcno")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_tuple(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return vals


def _modes(text: str) -> tuple:
    vals = _int_tuple(text)
    if len(vals) == 1:
        return vals * 2
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("modes take one or two integers")
    return vals


MODEL_FLAGS = {
    "pattern": ("pattern", str),
    "width": ("width", int),
    "modes": ("modes", _modes),
    "dilations": ("dilations", _int_tuple),
    "kernel": ("kernel_size", int),
    "conv_width": ("conv_width", int),
    "padding": ("padding", str),
}

TRAIN_FLAGS = {
    "epochs": ("epochs", int),
    "batch": ("batch_size", int),
    "lr": ("lr", float),
    "wd": ("weight_decay", float),
    "loss": ("loss", str),
    "seed": ("seed", int),
    "n_train": ("n_train", int),
    "n_val": ("n_val", int),
    "dtype": ("dtype", str),
}


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--pattern", help="layer pattern over {F, C}, e.g. FCFCFCF")
    p.add_argument("--width", type=int, help="spectral channel width d")
    p.add_argument("--modes", type=_modes, help="retained modes m or m1,m2")
    p.add_argument("--dilations", type=_int_tuple, help="dilation rates, e.g. 1,3,9,3,1")
    p.add_argument("--kernel", type=int, help="convolution kernel size")
    p.add_argument("--conv-width", type=int, help="convolution channel width")
    p.add_argument("--padding", choices=("zero", "circular"))
    p.add_argument("--config", help="key=value file; flags override its values")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcno", description="Dilated convolution neural operator lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="generate a dataset container")
    g.add_argument("--task", required=True, choices=TASKS)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--res", type=int, required=True)
    g.add_argument("--c", type=float, default=20.0)
    g.add_argument("--nu", type=float, default=1e-3)
    g.add_argument("--T", type=int, default=20)
    g.add_argument("--dt", type=float, default=1e-3)
    g.add_argument("--eps", type=float, default=0.0, help="noise level for the inverse task")
    g.add_argument("--fine-res", type=int, help="reference solve resolution")
    g.add_argument("--first", type=int, default=0, help="index of the first sample")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    _add_model_flags(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--wd", type=float)
    t.add_argument("--loss", choices=("rel-l2", "rel-h1"))
    t.add_argument("--seed", type=int)
    t.add_argument("--n-train", type=int)
    t.add_argument("--n-val", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--teacher-forcing", choices=("auto", "on", "off"), default="auto")
    t.add_argument("--ckpt-out", required=True)
    t.add_argument("--metrics-out")
    t.add_argument("--snapshot-dir", help="write a checkpoint every --snapshot-every epochs")
    t.add_argument("--snapshot-every", type=int, default=1)

    e = sub.add_parser("eval", help="mean relative L2 error of a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    _add_model_flags(e)

    r = sub.add_parser("rollout", help="autoregressive rollout error on trajectories")
    r.add_argument("--data", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--T0", type=int, default=1)
    r.add_argument("--T", type=int, required=True)

    d = sub.add_parser("diagnose", help="frequency-resolved error dynamics")
    d.add_argument("--data", required=True)
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--ckpt-dir")
    d.add_argument("--threshold", type=float, default=diagnostics.DEFAULT_THRESHOLD)
    d.add_argument("--n-test", type=int, help="use the last n samples (default: all)")
    d.add_argument("--out", required=True, help="CSV path; figures and plot script go alongside")
    d.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("params", help="print parameter counts")
    _add_model_flags(p)
    return parser


def _merge(args, flags: Dict[str, tuple], base: Dict[str, str]) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for flag, (key, conv) in flags.items():
        if key in base:
            out[key] = conv(base[key])
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = val
    return out


def _config_values(args) -> Dict[str, str]:
    return io.read_config_file(args.config) if getattr(args, "config", None) else {}


def _model_config(args, base: Optional[Dict[str, str]] = None, **extra) -> ModelConfig:
    base = base if base is not None else _config_values(args)
    values = _merge(args, MODEL_FLAGS, base)
    values.update(extra)
    return ModelConfig(**values)


def _model_flags_given(args) -> bool:
    return bool(getattr(args, "config", None)) or any(getattr(args, f, None) is not None for f in MODEL_FLAGS)


def _is_trajectory(data: io.DatasetContainer) -> bool:
    return (data.cin == 1 and data.cout > 1
            and np.array_equal(data.outputs[..., 0], data.inputs[..., 0]))


def cmd_generate(args) -> int:
    cfg = GenConfig(c=args.c, fine_res=args.fine_res, eps=args.eps, nu=args.nu, T=args.T, dt=args.dt)
    data = make_dataset(args.task, args.n, args.res, cfg, seed=args.seed, first=args.first,
                        dtype=np.dtype(args.dtype))
    io.write_dataset(args.out, data)
    print(f"wrote {data.samples} samples {data.resolution[0]}x{data.resolution[1]} "
          f"cin={data.cin} cout={data.cout} to {args.out}")
    return 0


def cmd_train(args) -> int:
    base = _config_values(args)
    data = io.read_dataset(args.data)
    pairs = args.teacher_forcing == "on" or (args.teacher_forcing == "auto" and _is_trajectory(data))
    if pairs:
        data = teacher_forcing_pairs(data)
    extra = {"in_channels": data.cin, "out_channels": data.cout,
             "lattice": base.get("lattice", "vertex" if pairs else "cell")}
    if pairs and args.padding is None and "padding" not in base:
        extra["padding"] = "circular"  # trajectories live on the torus
    cfg = _model_config(args, base, **extra)
    tcfg = TrainConfig(**_merge(args, TRAIN_FLAGS, base))
    model = build_model(cfg, tcfg.seed)

    def snapshot(state, work):
        if args.snapshot_dir and state.epoch % args.snapshot_every == 0:
            params = work.params.copy().astype(np.float64)
            params.unflatten(state.theta)
            io.save_checkpoint(os.path.join(args.snapshot_dir, f"epoch_{state.epoch:05d}.ckpt"),
                               io.Checkpoint(cfg, params, state.epoch, work.normalizer))

    metrics = open(args.metrics_out, "w", newline="") if args.metrics_out else None
    try:
        if args.snapshot_dir:
            os.makedirs(args.snapshot_dir, exist_ok=True)
        result = train(model, data, tcfg, metrics_out=metrics, on_epoch=snapshot)
    finally:
        if metrics is not None:
            metrics.close()
    st = result.state
    ck = io.Checkpoint(cfg, result.model.params, result.best_epoch, result.model.normalizer,
                       (st.opt.step, st.opt.m, st.opt.v),
                       {"rng": f"seed:{tcfg.seed};epochs:{st.epoch}"})
    io.save_checkpoint(args.ckpt_out, ck)
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"trained {st.epoch} epochs; final train loss {last.train_loss:.6g}; "
              f"best epoch {result.best_epoch}")
    else:
        print("trained 0 epochs")
    return 0


def _load_for_data(args, data: io.DatasetContainer) -> io.Checkpoint:
    expected = None
    if _model_flags_given(args):
        ck_peek = io.load_checkpoint(args.ckpt)
        c = ck_peek.cfg
        expected = _model_config(args, in_channels=c.in_channels, out_channels=c.out_channels,
                                 lattice=c.lattice)
    ck = io.load_checkpoint(args.ckpt, expected)
    if data.cin != ck.cfg.in_channels:
        raise io.CheckpointMismatchError(
            f"checkpoint/config mismatch: model expects {ck.cfg.in_channels} input channels, "
            f"data has {data.cin}")
    return ck


def cmd_eval(args) -> int:
    data = io.read_dataset(args.data)
    ck = _load_for_data(args, data)
    if data.cout != ck.cfg.out_channels and _is_trajectory(data) and ck.cfg.out_channels == 1:
        data = teacher_forcing_pairs(data)
    if data.cout != ck.cfg.out_channels:
        raise io.CheckpointMismatchError(
            f"checkpoint/config mismatch: model produces {ck.cfg.out_channels} channels, data has {data.cout}")
    err = evaluate(ck.model(), data)
    print(f"mean relative L2: {err:.6g}")
    return 0


def cmd_rollout(args) -> int:
    data = io.read_dataset(args.data)
    ck = _load_for_data(args, data)
    rep = rollout_evaluate(ck.model(), data, args.T0, args.T)
    print("step,rel_l2")
    for s, e in zip(rep.steps, rep.per_step):
        print(f"{s},{e!r}")
    print(f"mean relative L2: {rep.mean:.6g}")
    return 0


def _checkpoint_paths(args) -> List[str]:
    if args.ckpt:
        return [args.ckpt]
    paths = sorted(glob.glob(os.path.join(args.ckpt_dir, "*.ckpt")))
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {args.ckpt_dir}")
    return paths


def cmd_diagnose(args) -> int:
    data = io.read_dataset(args.data)
    if args.n_test:
        data = data.subset(data.samples - args.n_test, data.samples)
    cks = [io.load_checkpoint(p) for p in _checkpoint_paths(args)]
    cks.sort(key=lambda c: c.epoch)
    for ck in cks:
        if ck.cfg.in_channels != data.cin or ck.cfg.out_channels != data.cout:
            raise io.CheckpointMismatchError("checkpoint/config mismatch: channel counts differ from the data")
    reports = diagnostics.track_dynamics(((c.epoch, c.model()) for c in cks), data.inputs, data.outputs,
                                         args.threshold, data.domain_length)
    with open(args.out, "w", newline="") as fh:
        fh.write(diagnostics.dynamics_csv(reports))
    stem = os.path.splitext(args.out)[0]
    with open(stem + "_plot.py", "w") as fh:
        fh.write(diagnostics.plot_script(os.path.basename(args.out), os.path.basename(stem)))
    print(f"wrote {args.out} ({len(reports)} epochs)")
    if not args.no_figures:
        from .plotting import render_dynamics

        for path in render_dynamics(reports, stem):
            print(f"wrote {path}")
    return 0


def cmd_params(args) -> int:
    cfg = _model_config(args)
    print(f"C-layer params: {count_parameters('c-layers', cfg)}")
    print(f"Total params: {count_parameters('all', cfg)}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "diagnose": cmd_diagnose,
    "params": cmd_params,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
