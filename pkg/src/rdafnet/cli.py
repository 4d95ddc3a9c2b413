"""Command line interface: ``rdafnet <command> ...``.

Exit codes are 0 on success, 1 on runtime failure and 2 on usage or
configuration errors. ``RDAF_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import gradcheck as gc
from . import report
from .blocks import RDAFB, RDAFBConfig
from .config import ConfigError, RunConfig, load_config, preset
from .data import load_pair_dir, pad_to_even, read_png, save_pair_dir, synth_dataset, write_png
from .metrics import write_metrics_csv
from .network import count_params, estimate_flops
from .tensor import Tensor
from .trainer import (
    DeskProtocol, baseline_metrics, deblur_array, desk_run, evaluate, load_checkpoint, train,
)

log = logging.getLogger("rdafnet")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def _synth_arg(text: str) -> tuple[int, int, int]:
    try:
        n, size, seed = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected n,size,seed, got {text!r}")
    if n < 1 or size < 2 or size % 2:
        raise argparse.ArgumentTypeError(f"need n >= 1 and an even size, got {text!r}")
    return n, size, seed


def _variant_arg(text: str) -> str:
    try:
        return RDAFBConfig.from_variant(text).variant
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _variants_arg(text: str) -> list[str]:
    return [_variant_arg(v.strip()) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _maps_arg(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        try:
            b, layer = (int(v) for v in item.split(":"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected block:layer pairs, got {item!r}")
        out.append((b, layer))
    return out


def _add_data_args(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--data", type=Path, help="directory with blur/ and sharp/ subdirectories")
    g.add_argument("--synth", type=_synth_arg, metavar="N,SIZE,SEED", help="generate a synthetic set")


def _add_config_args(p, default_preset):
    p.add_argument("--config", type=Path, help="flat YAML file of field overrides")
    p.add_argument("--preset", default=default_preset, choices=["desk", "single", "multi"],
                   help=f"base configuration (default {default_preset})")


def _run_config(args) -> RunConfig:
    base = preset(args.preset)
    return load_config(args.config, base) if args.config else base


def _pairs(args):
    if args.synth is not None:
        return synth_dataset(*args.synth)
    return list(load_pair_dir(args.data))


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    run = _run_config(args)
    epochs = run.epochs if args.epochs is None else args.epochs
    data_cfg = run.data if args.seed is None else replace(run.data, seed=args.seed)
    pairs = _pairs(args)
    res = train(run.net, run.opt, data_cfg, pairs, epochs, out_dir=args.out, loss_cfg=run.loss,
                resume=args.resume)
    if res.log:
        report.loss_curve(res.log, Path(args.out) / "loss_curve.png")
    if res.diverged:
        print(f"training diverged: {res.message}", file=sys.stderr)
        return 1
    last = res.log[-1][1] if res.log else float("nan")
    print(f"epochs {res.state.epoch} steps {res.state.step} final_loss {last:.6f}")
    return 0


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    pairs = _pairs(args)
    rows = evaluate(net, pairs, ssim_mode=args.ssim_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", rows)
    write_metrics_csv(out / "metrics_blurred.csv", baseline_metrics(pairs, ssim_mode=args.ssim_mode))
    sys.stdout.write((out / "metrics.csv").read_text())
    return 0


def cmd_deblur(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    src = Path(args.inp)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png") if src.is_dir() else [src]
    if not files:
        raise FileNotFoundError(f"no PNG files in {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        restored = deblur_array(net, read_png(f))
        write_png(out / f.name, restored)
        print(out / f.name)
    return 0


def cmd_gradcheck(args) -> int:
    rows = gc.run(seed=args.seed, include_stage=not args.no_network)
    worst = 0.0
    print("check,max_rel_error,status")
    for name, err in rows:
        ok = err < gc.TOLERANCE
        worst = max(worst, err)
        print(f"{name},{err:.3e},{'pass' if ok else 'FAIL'}")
    return 0 if worst < gc.TOLERANCE else 1


def cmd_params(args) -> int:
    run = _run_config(args)
    net = replace(run.net, variant=args.variant) if args.variant else run.net
    n = count_params(net)
    print(f"params {n} ({n / 1e6:.2f}M)")
    return 0


def cmd_flops(args) -> int:
    run = _run_config(args)
    if args.height % 2 or args.width % 2:
        raise UsageError(f"--height and --width must be even, got {args.height}x{args.width}")
    f = estimate_flops(run.net, args.height, args.width, flops_per_mac=args.flops_per_mac)
    print(f"flops {f} ({f / 1e9:.2f}G) at {args.height}x{args.width}, {args.flops_per_mac} per MAC")
    return 0


def cmd_synth(args) -> int:
    pairs = synth_dataset(args.n, args.size, args.seed, max_len=args.max_len)
    save_pair_dir(args.out, pairs)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def _layer_label(block: RDAFB, layer: int) -> str:
    if layer == 0:
        return "input"
    return f"afm{layer}" if block.cfg.use_afm else f"am{layer}"


def cmd_attn_dump(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    if not 0 <= args.stage < len(net.stages):
        raise UsageError(f"--stage {args.stage} out of range 0..{len(net.stages) - 1}")
    blocks = net.stages[args.stage].blocks
    if not all(isinstance(b, RDAFB) and b.cfg.use_am for b in blocks):
        raise UsageError("checkpoint has no attention maps (RDB blocks or am0 variant)")
    n_layers = blocks[0].cfg.n_gated_convs + 1
    selected = args.maps or [(b, layer) for b in range(len(blocks)) for layer in range(n_layers)]
    for b, layer in selected:
        if not (0 <= b < len(blocks) and 0 <= layer < n_layers):
            raise UsageError(f"map {b}:{layer} out of range: {len(blocks)} blocks, layers 0..{n_layers - 1}")
    padded, _ = pad_to_even(read_png(args.inp))
    outs = net.forward_stages(Tensor(padded.astype(np.float32)), record=True)
    snaps = {(bi, lbl): m for bi, lbl, m in outs[args.stage].attention_snapshots}
    out = Path(args.out)
    figures = out / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    rows = []
    for b, layer in selected:
        label = _layer_label(blocks[b], layer)
        amap = snaps[(b, label)].data[0].mean(axis=0)
        name = f"stage{args.stage}_block{b:02d}_layer{layer}_{label}.png"
        report.grayscale_map(amap, out / name)
        report.attention_heatmap(amap, figures / name, title=f"block {b}, layer {layer} ({label})")
        rows.append((b, layer, label, float(amap.mean()), float(amap.min()), float(amap.max()), name))
    with open(out / "attention_maps.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["block", "layer", "label", "mean", "min", "max", "png"])
        for r in rows:
            wr.writerow([r[0], r[1], r[2], f"{r[3]:.6f}", f"{r[4]:.6f}", f"{r[5]:.6f}", r[6]])
    sys.stdout.write((out / "attention_maps.csv").read_text())
    return 0


ABLATION_FIELDS = ["variant", "seed", "steps", "initial_loss", "final_loss", "loss_ratio",
                   "psnr_blurred", "psnr_db", "ssim", "status"]


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(ABLATION_FIELDS)
        for r in rows:
            wr.writerow([f"{r[k]:.6f}" if isinstance(r[k], float) else r[k] for k in ABLATION_FIELDS])


def cmd_ablate(args) -> int:
    protocol = DeskProtocol()
    protocol = replace(protocol, **{k: v for k, v in (("steps", args.steps), ("lr", args.lr),
                                                      ("batch_size", args.batch_size)) if v is not None})
    n, size, seed = args.synth
    pairs = synth_dataset(n, size, seed)
    protocol = replace(protocol, crop=min(protocol.crop, size))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in args.variant:
        for s in args.seeds:
            with np.errstate(all="ignore"):
                r = desk_run(variant, s, pairs, protocol)
            rows.append(r)
            report.loss_curve(r["history"], out / f"loss_{variant}_seed{s}.png", title=variant)
    write_ablation_csv(out / "ablation.csv", rows)
    report.ablation_chart(rows, out / "ablation.png")
    sys.stdout.write((out / "ablation.csv").read_text())
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rdafnet", description="Attention fusion deblurring networks in numpy.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="train a network")
    _add_config_args(p, "desk")
    _add_data_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset")
    p.add_argument("--ckpt", type=Path, required=True)
    _add_data_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ssim-mode", choices=["per_channel", "luma"], default="per_channel")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("deblur", help="restore PNG images")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--in", dest="inp", type=Path, required=True, help="PNG file or directory")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_deblur)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all ops and blocks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-network", action="store_true", help="skip the whole-network check")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter count")
    _add_config_args(p, "single")
    p.add_argument("--variant", choices=["rdaf", "rdb"])
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("flops", help="analytic operation count")
    _add_config_args(p, "single")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--flops-per-mac", type=int, default=1, choices=[1, 2])
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("synth", help="write a synthetic blur dataset")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--max-len", type=int, default=13)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("attn-dump", help="heat maps of a block's attention maps")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--in", dest="inp", type=Path, required=True, help="PNG image")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--stage", type=int, default=0)
    p.add_argument("--maps", type=_maps_arg, metavar="B:L,...",
                   help="block:layer pairs; layer 0 gates the block input, layer i the output of conv i")
    p.set_defaults(fn=cmd_attn_dump)

    p = sub.add_parser("ablate", help="desk-scale training of attention variants")
    p.add_argument("--variant", type=_variants_arg, default=["am1_afm1_lrl1"], metavar="amX_afmY_lrlZ[,...]")
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--synth", type=_synth_arg, default=(8, 64, 7), metavar="N,SIZE,SEED")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_ablate)
    return ap


def _thread_limit():
    value = os.environ.get("RDAF_THREADS")
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"RDAF_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.fn(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (ConfigError, UsageError) as exc:
        print(f"rdafnet: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, ckpt.CheckpointError, MemoryError) as exc:
        print(f"rdafnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
