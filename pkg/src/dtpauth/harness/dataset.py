"""Dataset synthesis, manifests and load-time synchronization."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..core import IqFrame, derive_seed, make_rng
from ..errors import InputError, StageError
from ..impair import (CaptureParams, apply_clock_skew, apply_dc_offset, awgn, compose_delta_f,
                      impaired_downconvert, rician_fade)
from ..sync import SyncConfig, normalize_rms, preprocess
from ..waveform import make_reference, scheme_by_name, srrc_design
from .config import ExperimentConfig
from .iqc import CaptureRecord, read_capture, write_capture

MANIFEST = "manifest.json"


def parallel_map(fn, items, threads: int = 1):
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * threads))))


def reference_for(cfg: ExperimentConfig, scheme: str):
    r = cfg.radio
    filt = srrc_design(r.sps, r.rolloff, r.span)
    return make_reference(scheme_by_name(scheme), r.n_symbols, r.payload_seed, filt)


def sync_config(cfg: ExperimentConfig) -> SyncConfig:
    rx = cfg.rx_profile()
    return SyncConfig(known_shift_hz=cfg.radio.shift_hz, rx_iq=(rx.beta, rx.psi))


def synthesize_capture(cfg: ExperimentConfig, device: int, scheme: str, index: int,
                       ref=None) -> CaptureRecord:
    """One noise-free, unit-RMS capture of the known payload from one device."""
    tx = cfg.tx_profiles()[device]
    rx = cfg.rx_profile()
    r = cfg.radio
    ref = ref or reference_for(cfg, scheme)
    seed = derive_seed(cfg.seed, "capture", tx.device_id, scheme, index)
    rng = make_rng(seed)
    theta = float(rng.uniform(-math.pi, math.pi))
    jitter = float(rng.uniform(-r.cfo_jitter_hz, r.cfo_jitter_hz))
    burst = apply_clock_skew(IqFrame(ref.samples, r.fs), tx.clock_skew_ppm)
    burst = apply_dc_offset(burst, tx.dc_offset).samples
    guard = 4 * r.span * r.sps
    offset = int(rng.integers(guard, r.frame_length - burst.size - guard))
    buf = np.zeros(r.frame_length, dtype=complex)
    buf[offset: offset + burst.size] = burst
    df = compose_delta_f(tx, rx, r.shift_hz, jitter)
    frame = impaired_downconvert(buf.real, buf.imag, tx, rx, CaptureParams(cpo=theta, delta_f=df), r.fs)
    meta = {"cpo": theta, "delta_f": df, "offset": offset, "clock_skew_ppm": tx.clock_skew_ppm}
    if cfg.channel.kind == "rician":
        frame = rician_fade(frame, cfg.channel.k_factor, derive_seed(seed, "channel"))
        g = frame.meta["channel_gain"]
        meta["channel_gain"] = [g.real, g.imag]
    frame = normalize_rms(frame)
    return CaptureRecord(tx.device_id, scheme, index, seed, frame.samples, meta)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _gen_job(args):
    cfg, device, scheme, index, root = args
    rec = synthesize_capture(cfg, device, scheme, index)
    rel = f"captures/{rec.capture_id}.iqc"
    write_capture(rec, Path(root) / rel)
    return rel, rec.capture_id, rec.device_id, rec.scheme, rec.index


def generate_dataset(cfg: ExperimentConfig, root) -> Path:
    """Write every capture and a manifest with content hashes; returns ``root``."""
    root = Path(root)
    (root / "captures").mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, d, s, i, str(root)) for s in cfg.schemes for d in range(len(cfg.fleet))
            for i in range(cfg.captures_per_device)]
    rows = parallel_map(_gen_job, jobs, cfg.threads)
    (root / "config.json").write_text(cfg.to_json())
    files = {rel: _sha256(root / rel) for rel, *_ in rows}
    files["config.json"] = _sha256(root / "config.json")
    records = [{"file": rel, "capture_id": cid, "device_id": dev, "scheme": sch, "index": idx}
               for rel, cid, dev, sch, idx in rows]
    manifest = {"format": "dtpauth-dataset", "version": 1, "seed": cfg.seed,
                "files": dict(sorted(files.items())), "records": records}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc


def verify_dataset(root) -> int:
    """Check that the manifest lists exactly the files present, with matching hashes."""
    root = Path(root)
    files = read_manifest(root)["files"]
    present = {p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file()} - {MANIFEST}
    missing = set(files) - present
    extra = present - set(files)
    if missing or extra:
        raise InputError(f"manifest mismatch: missing {sorted(missing)[:3]}, unlisted {sorted(extra)[:3]}")
    for rel, digest in files.items():
        if _sha256(root / rel) != digest:
            raise InputError(f"hash mismatch for {root / rel}")
    return len(files)


def load_records(root, scheme=None) -> list:
    root = Path(root)
    out = []
    for row in read_manifest(root)["records"]:
        if scheme is None or row["scheme"] == scheme:
            out.append(read_capture(root / row["file"]))
    return out


def synchronize(rec: CaptureRecord, cfg: ExperimentConfig, ref=None):
    """Receiver noise floor, then the full pre-processing chain; returns ``(s_hat, report)``."""
    ref = ref or reference_for(cfg, rec.scheme)
    frame = IqFrame(rec.samples.astype(complex), cfg.radio.fs)
    frame = awgn(normalize_rms(frame), cfg.radio.floor_snr_db, derive_seed(rec.seed, "floor"))
    try:
        s_hat, report = preprocess(frame, ref, sync_config(cfg))
    except StageError as exc:
        raise StageError(exc.stage, exc.cause, rec.capture_id) from exc
    return s_hat.samples, report


def _sync_job(args):
    rec, cfg = args
    s, rep = synchronize(rec, cfg)
    return s.astype(np.complex64), json.loads(rep.to_json())


def _cache_key(cfg: ExperimentConfig, manifest: dict, scheme: str) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(cfg.to_dict()["radio"], sort_keys=True).encode())
    h.update(json.dumps(cfg.receiver, sort_keys=True).encode())
    h.update(json.dumps(manifest["files"], sort_keys=True).encode())
    h.update(scheme.encode())
    return h.hexdigest()[:16]


def synchronized_set(cfg: ExperimentConfig, root, scheme: str, cache_dir=None):
    """Pre-processed signals for every capture of ``scheme`` (cached on disk).

    Returns ``(records, s_hat [n, n_symbols*sps] complex64, reports)``.
    """
    manifest = read_manifest(root)
    records = load_records(root, scheme)
    if not records:
        raise InputError(f"dataset has no captures for scheme {scheme!r}")
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"shat_{scheme}_{_cache_key(cfg, manifest, scheme)}.npz"
        if cache.exists():
            with np.load(cache, allow_pickle=False) as z:
                ids = [str(v) for v in z["ids"]]
                if ids == [r.capture_id for r in records]:
                    reports = json.loads(str(z["reports"]))
                    return records, z["s_hat"], reports
    out = parallel_map(_sync_job, [(r, cfg) for r in records], cfg.threads)
    s_hat = np.stack([o[0] for o in out])
    reports = [o[1] for o in out]
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache, ids=np.array([r.capture_id for r in records]), s_hat=s_hat,
                 reports=np.array(json.dumps(reports)))
    return records, s_hat, reports


__all__ = ["generate_dataset", "verify_dataset", "load_records", "synthesize_capture",
           "synchronize", "synchronized_set", "reference_for", "sync_config", "parallel_map"]
