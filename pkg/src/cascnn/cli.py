"""Command-line entry point: degrade, synth, train, finetune, restore, eval, bench, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfg
from .autograd import no_grad
from .codec import check_quality, degrade
from .dataset import (
    NetpbmError,
    assign_splits,
    encode_netpbm,
    extract_patches,
    list_images,
    load_patchset,
    read_luma,
    read_manifest,
    read_netpbm,
    rgb_to_ycbcr,
    synth_corpus,
    to_uint8,
    write_images,
    write_luma,
    write_manifest,
    ycbcr_to_rgb,
)
from .fileio import atomic_write_bytes, atomic_write_text
from .gradcheck import run_suite
from .metrics import MetricReport, psnr
from .model import CasCnnModel, CheckpointError, build, init_weights, load_checkpoint
from .trainer import NonFiniteLossError, TrainConfig, train, write_log

log = logging.getLogger("cascnn")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# argument types

def _qf_arg(text: str) -> int:
    try:
        return check_quality(int(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _qf_list(text: str) -> list[int | None]:
    """Comma-separated quality factors; ``none`` evaluates undistorted inputs."""
    out: list[int | None] = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        out.append(None if tok.lower() == "none" else _qf_arg(tok))
    if not out:
        raise argparse.ArgumentTypeError("empty quality factor list")
    return out


def _width_arg(text: str) -> str:
    try:
        value = cfg.parse_width(text)
        build(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"invalid width {text!r}: {exc}") from None
    return value


def _ratios(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not 1 <= len(vals) <= 3 or any(v < 0 for v in vals) or sum(vals) <= 0:
        raise argparse.ArgumentTypeError("give 1 to 3 non-negative ratios for train,val,test")
    return vals


# ---------------------------------------------------------------------------
# shared helpers

def _pad_to_multiple(img: np.ndarray, k: int = 8) -> np.ndarray:
    h, w = img.shape
    return np.pad(img, ((0, -h % k), (0, -w % k)), mode="edge")


def restore_luma(model: CasCnnModel, luma: np.ndarray) -> np.ndarray:
    """Restore one [H,W] luma image of any size; clamped and snapped to 8-bit."""
    h, w = luma.shape
    x = _pad_to_multiple(np.asarray(luma, dtype=np.float32))[None, None]
    with no_grad():
        y = model(x).y_full.data[0, 0, :h, :w]
    return to_uint8(y).astype(np.float64) / 255.0


def _load_model(path, width=None) -> CasCnnModel:
    try:
        return load_checkpoint(path, width=width)
    except FileNotFoundError:
        raise RuntimeFailure(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise RuntimeFailure(f"{path}: {exc}") from None


def _images_in(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {d}")
    paths = list_images(d)
    if not paths:
        raise RuntimeFailure(f"no inputs: no .pgm/.ppm images in {d}")
    return paths


def _fmt(v: float) -> str:
    return "inf" if v == float("inf") else f"{v:.4f}"


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    paths = write_images(args.out_dir, synth_corpus(args.count, args.size, args.seed), args.prefix)
    print(f"wrote {len(paths)} images to {args.out_dir}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    paths = _images_in(args.in_dir)
    out = Path(args.out_dir)
    refs, sources, failed = [], [], 0
    for p in paths:
        try:
            img = read_luma(p)
        except (OSError, NetpbmError) as exc:
            print(f"error: {p}: {exc}", file=sys.stderr)
            failed += 1
            continue
        if args.patch_size:
            cuts = extract_patches(img, args.patch_size, args.stride)
            if not cuts:
                log.warning("%s is smaller than one %d px patch; skipped", p.name, args.patch_size)
            refs += cuts
            sources += [p.name] * len(cuts)
        else:
            refs.append(img)
            sources.append(p.name)
    if not refs:
        print("error: no inputs produced any output", file=sys.stderr)
        return EXIT_RUNTIME

    ids = [f"p{i:06d}" for i in range(len(refs))] if args.patch_size else [Path(s).stem for s in sources]
    splits = assign_splits(len(refs), args.split, args.seed)
    (out / "ref").mkdir(parents=True, exist_ok=True)
    (out / "dist").mkdir(parents=True, exist_ok=True)
    scores = []
    for pid, ref in zip(ids, refs):
        dist = degrade(ref, args.qf)
        write_luma(out / "ref" / f"{pid}.pgm", ref)
        write_luma(out / "dist" / f"{pid}.pgm", dist)
        scores.append(psnr(ref, dist))
    write_manifest(out / "manifest.csv", ids, sources, [args.qf] * len(ids), splits)
    counts = {s: splits.count(s) for s in dict.fromkeys(splits)}
    print(f"degraded {len(ids)} images at qf {args.qf} into {out} "
          f"({', '.join(f'{k} {v}' for k, v in counts.items())})")
    print(f"mean PSNR vs reference: {_fmt(float(np.mean(scores)))} dB")
    return EXIT_RUNTIME if failed else EXIT_OK


def _run_config(args) -> tuple[cfg.RunConfig, set[str]]:
    """Resolved config plus the set of keys set explicitly (file or command line)."""
    file_values = cfg.read_file(args.config) if args.config else {}
    overrides = {k.name: getattr(args, f"opt_{k.name}") for k in cfg.SCHEMA}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise cfg.ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    run = cfg.resolve(file_values, overrides)
    if run.data is None:
        raise cfg.ConfigError("no dataset given (set `data` in the config or pass --data)")
    explicit = set(file_values) | {k for k, v in overrides.items() if v is not None}
    return run, explicit


def _fit(args, phase: str) -> int:
    run, explicit = _run_config(args)
    data = Path(run.data)
    if not (data / "manifest.csv").is_file():
        raise UsageError(f"dataset manifest not found: {data / 'manifest.csv'}")
    try:
        ps = load_patchset(data)
    except (OSError, ValueError) as exc:
        raise RuntimeFailure(f"cannot load dataset {data}: {exc}") from None
    if run.qf is not None and run.qf != ps.qf:
        raise cfg.ConfigError(f"config qf {run.qf} does not match dataset qf {ps.qf}")
    tr, va = ps.subset(run.train_split), ps.subset(run.val_split)
    if len(tr) == 0:
        raise RuntimeFailure(f"dataset has no {run.train_split!r} patches")

    if phase == "output-only":
        model = _load_model(args.warm_start, width=run.width if "width" in explicit else None)
    else:
        try:
            model = init_weights(build(run.width), run.init_seed)
        except ValueError as exc:
            raise cfg.ConfigError(str(exc)) from None

    tc = TrainConfig(phase=phase, epochs=run.epochs, batch_size=run.batch, lr=run.lr, seed=run.seed,
                     plateau_patience=run.patience, stop_window=run.stop_window,
                     stop_min_gain=run.stop_gain, keep_best=run.keep_best,
                     checkpoint_every=run.checkpoint_every, checkpoint_path=run.checkpoint)
    print(f"{phase}: width {model.width}, {len(tr)} train / {len(va)} val patches at qf {ps.qf}")
    try:
        _, logs = train(model, tr, va, tc, log_path=run.log,
                        on_epoch=lambda e: print(f"epoch {e.epoch:4d}  train {e.train_loss:.6g}  "
                                                 f"val {e.val_loss:.6g}  ({e.seconds:.1f}s)", flush=True))
    except NonFiniteLossError as exc:
        raise RuntimeFailure(f"training aborted: {exc}") from None
    write_log(run.log, logs)
    best = min(e.val_loss for e in logs)
    print(f"wrote checkpoint {run.checkpoint} and log {run.log} (best val loss {best:.6g})")
    return EXIT_OK


def cmd_train(args) -> int:
    return _fit(args, "multi-scale")


def cmd_finetune(args) -> int:
    if not args.warm_start:
        raise UsageError("finetune requires --from CKPT")
    return _fit(args, "output-only")


def cmd_restore(args) -> int:
    model = _load_model(args.ckpt, width=args.width)
    try:
        px = read_netpbm(args.input)
    except (OSError, NetpbmError) as exc:
        raise RuntimeFailure(f"cannot read {args.input}: {exc}") from None
    if px.ndim == 2:
        out = to_uint8(restore_luma(model, px.astype(np.float64) / 255.0))
    else:
        ycc = rgb_to_ycbcr(px)
        ycc[..., 0] = to_uint8(restore_luma(model, ycc[..., 0].astype(np.float64) / 255.0))
        out = ycbcr_to_rgb(ycc)
    atomic_write_bytes(args.output, encode_netpbm(out))
    print(f"restored {args.input} -> {args.output} ({px.shape[1]}x{px.shape[0]})")
    return EXIT_OK


def _eval_references(path, split: str | None) -> list[tuple[str, np.ndarray]]:
    d = Path(path)
    if (d / "manifest.csv").is_file():
        rows = read_manifest(d / "manifest.csv")
        rows = [r for r in rows if split is None or r["split"] == split]
        if not rows:
            raise RuntimeFailure(f"no inputs: manifest in {d} has no rows for split {split!r}")
        return [(r["patch_id"], read_luma(d / "ref" / f"{r['patch_id']}.pgm")) for r in rows]
    return [(p.stem, read_luma(p)) for p in _images_in(d)]


SWEEP_HEADER = ["qf", "images", "jpeg_psnr", "jpeg_psnr_b", "jpeg_ssim",
                "psnr", "psnr_b", "ssim", "ipsnr", "ipsnr_b"]


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt, width=args.width) if args.ckpt else None
    refs = _eval_references(args.data, args.split)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for qf in args.qf_list:
        label = "none" if qf is None else str(qf)
        rep, base = MetricReport(), MetricReport()
        for name, ref in refs:
            dist = ref if qf is None else degrade(ref, qf)
            restored = dist if model is None else restore_luma(model, dist)
            rep.add(name, ref, restored, baseline=dist)
            base.add(name, ref, dist)
        atomic_write_text(out / f"qf_{label}.csv", rep.to_csv())
        m, b = rep.means, base.means
        rows.append([label, len(refs), b.psnr, b.psnr_b, b.ssim, m.psnr, m.psnr_b, m.ssim, m.ipsnr, m.ipsnr_b])
        print(f"qf {label:>4}: jpeg {_fmt(b.psnr)} dB -> {_fmt(m.psnr)} dB, "
              f"IPSNR {_fmt(m.ipsnr)} dB, IPSNR-B {_fmt(m.ipsnr_b)} dB, SSIM {m.ssim:.4f}", flush=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow(r[:2] + [_fmt(v) for v in r[2:]])
    atomic_write_text(out / "sweep.csv", buf.getvalue())
    print(f"wrote {len(rows)} per-qf reports and sweep.csv to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.ckpt:
        model = _load_model(args.ckpt)
    else:
        model = init_weights(build(args.width), args.seed)
    x = np.random.default_rng(args.seed).random((args.batch, 1, args.size, args.size)).astype(np.float32)
    times, first, same = [], None, True
    for r in range(args.reps):
        t0 = time.perf_counter()
        with no_grad():
            y = model(x).y_full.data
        times.append(time.perf_counter() - t0)
        if first is None:
            first = y.copy()
        else:
            same &= bool(np.array_equal(first, y))
        print(f"rep {r + 1}: {times[-1]:.4f} s")
    pixels = args.batch * args.size * args.size
    rates = pixels / np.asarray(times)
    print(f"width {model.width}, {args.batch}x{args.size}x{args.size}: "
          f"{rates.mean() / 1e6:.4f} +- {rates.std() / 1e6:.4f} Mpixel/s "
          f"(time {np.mean(times):.4f} +- {np.std(times):.4f} s)")
    print(f"outputs identical across reps: {'yes' if same else 'no'}")
    return EXIT_OK if same else EXIT_RUNTIME


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, samples=args.samples)
    width = max(len(r.name) for r in results)
    print(f"{'check':<{width}}  {'max rel err':>12}  {'tolerance':>9}  result")
    for r in results:
        print(f"{r.name:<{width}}  {r.error:12.3e}  {r.tolerance:9.0e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    g = p.add_argument_group("config keys (override the config file)")
    for k in cfg.SCHEMA:
        g.add_argument(f"--{k.name.replace('_', '-')}", dest=f"opt_{k.name}", metavar=k.name.upper(),
                       help=k.help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cascnn", description="JPEG artifact suppression with a cascaded CNN.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a seeded synthetic image corpus")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", help="compress images and write a (reference, distorted) dataset")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--qf", type=_qf_arg, required=True, help="JPEG quality factor 1..100")
    p.add_argument("--patch-size", type=int, default=0, help="cut square patches of this size (0 = whole images)")
    p.add_argument("--stride", type=int, default=None, help="patch stride (default: patch size)")
    p.add_argument("--split", type=_ratios, default=(1.0,), help="train,val,test ratios (default: all train)")
    p.add_argument("--seed", type=int, default=0, help="seed for the split assignment")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="multi-scale training from random init",
                       epilog="config keys:\n" + cfg.describe(), formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_run_options(p)
    p.set_defaults(func=cmd_train, warm_start=None)

    p = sub.add_parser("finetune", help="output-loss fine-tuning from a checkpoint",
                       epilog="config keys:\n" + cfg.describe(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--from", dest="warm_start", metavar="CKPT", help="warm-start checkpoint (required)")
    _add_run_options(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("restore", help="restore one PGM/PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--width", type=_width_arg, default=None, help="expected model width; mismatch is an error")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="metrics over a quality factor sweep")
    p.add_argument("--ckpt", help="checkpoint; omit to score the compressed baseline itself")
    p.add_argument("--width", type=_width_arg, default=None, help="expected model width; mismatch is an error")
    p.add_argument("--data", required=True, help="image directory or dataset directory with manifest.csv")
    p.add_argument("--split", default=None, help="manifest split to evaluate (default: all rows)")
    p.add_argument("--qf-list", type=_qf_list, default=[10, 20, 30, 40, 50, 60, 70, 80, 90],
                   help="comma-separated quality factors; 'none' scores undistorted inputs")
    p.add_argument("--out-dir", default="eval", help="directory for qf_<N>.csv and sweep.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time forward passes")
    p.add_argument("--ckpt", help="checkpoint (default: random init at --width)")
    p.add_argument("--width", type=_width_arg, default="1")
    p.add_argument("--size", type=int, default=120)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every operator and a small model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=6, help="entries checked per parameter tensor")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfg.ConfigError) as exc:
        print(f"cascnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeFailure as exc:
        print(f"cascnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"cascnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
