"""Command-line entry point: ``dtpauth <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..core import derive_seed
from ..dtp import DtpImage, make_dtp2d, write_pgm
from ..errors import DtpAuthError, InputError
from ..learn import load_model, save_model
from ..sync import instantaneous_phase
from .config import load_config
from .dataset import generate_dataset, load_records, synchronize, verify_dataset
from .experiment import compare_methods, evaluate, fit, noisy, prepare, run_experiment


def _paths(args):
    out = Path(args.out_dir)
    return out, out / "dataset", out / "cache"


def _config(args):
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    return replace(cfg, **over) if over else cfg


def _find(records, capture_id):
    for r in records:
        if r.capture_id == capture_id:
            return r
    raise InputError(f"capture {capture_id!r} not found in the dataset")


def cmd_gen(args, cfg):
    out, ds, _ = _paths(args)
    generate_dataset(cfg, ds)
    n = verify_dataset(ds)
    print(f"wrote {n} files to {ds}")


def cmd_sync(args, cfg):
    _, ds, _ = _paths(args)
    rec = _find(load_records(ds), args.capture)
    _, report = synchronize(rec, cfg)
    print(report.to_json())


def cmd_dtp(args, cfg):
    out, ds, _ = _paths(args)
    rec = _find(load_records(ds), args.capture)
    s, _ = synchronize(rec, cfg)
    if args.snr is not None:
        s = noisy(s, args.snr, derive_seed(cfg.seed, "awgn", rec.capture_id))
    dcfg = cfg.dtp_config()
    if args.type:
        dcfg = replace(dcfg, dtp_type=args.type)
    sig = instantaneous_phase(s) if dcfg.dtp_type == "phase" else s
    img: DtpImage = make_dtp2d(sig, dcfg, cfg.radio.sps, capture_id=rec.capture_id)
    dest = out / "dtp"
    dest.mkdir(parents=True, exist_ok=True)
    stem = f"{rec.capture_id}_{dcfg.dtp_type}"
    img.save(dest / f"{stem}.dtp")
    for ch in range(img.channels):
        write_pgm(img.channel(ch), dest / f"{stem}_c{ch}.pgm")
    print(f"{stem}: shape {img.shape}, overflow {img.meta['overflow']}")


def _results_dir(out, cfg):
    c = cfg.classifier
    return out / "results" / f"{c.representation}_{c.kind}"


def cmd_train(args, cfg):
    out, ds, cache = _paths(args)
    prep = prepare(cfg, ds, cache_dir=cache)
    model, history = fit(cfg, prep)
    res = _results_dir(out, cfg)
    res.mkdir(parents=True, exist_ok=True)
    if history is None:
        print("knn has no trained state to save; use 'eval' or 'sweep'")
        return
    save_model(model, res / "model.dtpm")
    print(f"best fold {history['best_fold']} val acc {history['best_val_acc']:.4f}; "
          f"model written to {res / 'model.dtpm'}")


def cmd_eval(args, cfg):
    out, ds, cache = _paths(args)
    prep = prepare(cfg, ds, cache_dir=cache)
    res = _results_dir(out, cfg)
    if cfg.classifier.kind == "cnn":
        model = load_model(args.model or res / "model.dtpm")
    else:
        model, _ = fit(cfg, prep)
    bundle = evaluate(cfg, prep, model, res)
    print(bundle.accuracy_csv(), end="")


def cmd_sweep(args, cfg):
    out, ds, cache = _paths(args)
    bundle = run_experiment(cfg, ds, _results_dir(out, cfg), cache_dir=cache)
    print(bundle.accuracy_csv(), end="")
    print(f"accuracy at {bundle.report_snr_db:g} dB: {bundle.accuracy:.4f}")


def cmd_compare(args, cfg):
    out, ds, cache = _paths(args)
    results = compare_methods(cfg, ds, out / "compare", cache_dir=cache)
    print((out / "compare" / "compare.csv").read_text(), end="")
    for name, b in results.items():
        print(f"{name}: {b.accuracy:.4f} at {b.report_snr_db:g} dB")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtpauth", description="Density-trace-plot RF fingerprinting toolkit")
    p.add_argument("--config", help="JSON experiment configuration (defaults if omitted)")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out-dir", default="dtpauth-out", help="dataset, cache and results root")
    p.add_argument("--threads", type=int, help="worker processes for per-capture stages")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", help="synthesize the capture dataset")
    s = sub.add_parser("sync", help="print the synchronization report of one capture")
    s.add_argument("capture", help="capture id, e.g. tx0-qam4-00000")
    s = sub.add_parser("dtp", help="render the DTP of one capture")
    s.add_argument("capture")
    s.add_argument("--snr", type=float, help="inject AWGN at this SNR (dB) first")
    s.add_argument("--type", choices=["constellation", "eye", "phase"])
    sub.add_parser("train", help="train the configured classifier")
    s = sub.add_parser("eval", help="evaluate a trained model across the SNR grid")
    s.add_argument("--model", help="DTPM file (default: results directory)")
    sub.add_parser("sweep", help="train and evaluate across the SNR grid")
    sub.add_parser("compare", help="DTP, DCTF and HOS side by side")
    return p


COMMANDS = {"gen": cmd_gen, "sync": cmd_sync, "dtp": cmd_dtp, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (DtpAuthError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
