"""Experiment orchestration: split, representation, training and metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..core import IqFrame, derive_seed, make_rng
from ..dtp import DtpImage, make_dtp2d, make_dtp3d, write_pgm
from ..errors import ConfigurationError, InputError
from ..features import dctf, hos_features
from ..impair import awgn
from ..learn import CnnSpec, KnnClassifier, TrainConfig, forward, save_model, train
from ..sync import instantaneous_phase
from .config import ExperimentConfig
from .dataset import synchronized_set


def confusion_matrix(predictions, truths, n_classes: int) -> np.ndarray:
    """Row-normalized confusion; rows of absent classes stay zero."""
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(truths, dtype=np.int64)
    if p.shape != t.shape:
        raise InputError("predictions and truths must have equal length")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= n_classes):
        raise InputError("label out of range")
    m = np.zeros((n_classes, n_classes))
    np.add.at(m, (t, p), 1.0)
    rows = m.sum(axis=1, keepdims=True)
    return np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)


def export_pgm(image: DtpImage, path, channel: int = 0) -> None:
    if not 0 <= channel < image.channels:
        raise InputError(f"channel {channel} out of range for a {image.channels}-channel image")
    write_pgm(image.channel(channel), path)


@dataclass
class MetricsBundle:
    method: str
    device_ids: list
    report_snr_db: float
    accuracy: float
    per_snr: dict                      # snr_db -> accuracy
    confusion: np.ndarray              # at report_snr_db
    extra: dict = field(default_factory=dict)

    def accuracy_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["snr_db", "accuracy"])
        for snr in sorted(self.per_snr):
            w.writerow([f"{snr:g}", f"{self.per_snr[snr]:.6f}"])
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + list(self.device_ids))
        for dev, row in zip(self.device_ids, self.confusion):
            w.writerow([dev] + [f"{v:.6f}" for v in row])
        return buf.getvalue()

    def recall_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["device_id", "recall"])
        for i, dev in enumerate(self.device_ids):
            w.writerow([dev, f"{self.confusion[i, i]:.6f}"])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "accuracy_vs_snr.csv").write_text(self.accuracy_csv())
        (out / "confusion.csv").write_text(self.confusion_csv())
        (out / "recall.csv").write_text(self.recall_csv())
        (out / "metrics.json").write_text(json.dumps(
            {"method": self.method, "report_snr_db": self.report_snr_db, "accuracy": self.accuracy,
             "per_snr": {f"{k:g}": v for k, v in sorted(self.per_snr.items())}, **self.extra},
            indent=2, sort_keys=True))


def method_name(cfg: ExperimentConfig) -> str:
    c = cfg.classifier
    rep = c.representation
    if rep == "dtp":
        d = cfg.dtp_config()
        rep = f"dtp-{d.dtp_type}" + ("-3d" if d.symbols_per_frame else "")
    return f"{rep}+{c.kind}"


def split_captures(records, cfg: ExperimentConfig):
    """Capture-level, per-device stratified train/test split (indices into ``records``)."""
    rng = make_rng(derive_seed(cfg.seed, "split"))
    train_idx, test_idx = [], []
    for dev in cfg.device_ids:
        idx = np.array([i for i, r in enumerate(records) if r.device_id == dev])
        if idx.size < 2:
            raise InputError(f"device {dev} needs at least two captures")
        idx = idx[rng.permutation(idx.size)]
        n_train = min(idx.size - 1, max(1, int(round(cfg.split.train_fraction * idx.size))))
        train_idx += idx[:n_train].tolist()
        test_idx += idx[n_train:].tolist()
    ids_train = {records[i].capture_id for i in train_idx}
    ids_test = {records[i].capture_id for i in test_idx}
    assert not ids_train & ids_test, "train and test share capture ids"
    return sorted(train_idx), sorted(test_idx)


def represent(s: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    """Classifier input for one pre-processed signal."""
    sps = cfg.radio.sps
    c = cfg.classifier
    if c.representation == "hos":
        return hos_features(s).values
    d = cfg.dtp_config()
    if c.representation == "dctf":
        return dctf(s, lag=sps, h=d.h, w=d.w).bins
    sig = instantaneous_phase(s) if d.dtp_type == "phase" else s
    if d.symbols_per_frame:
        if c.kind == "cnn":
            raise ConfigurationError("3D DTP stacks are classified with knn (frame-averaged)")
        return make_dtp3d(sig, d, sps).to_array().astype(np.float32).mean(axis=2)
    return make_dtp2d(sig, d, sps).bins


def noisy(s: np.ndarray, snr_db: float, seed: int) -> np.ndarray:
    frame = IqFrame(np.asarray(s, dtype=complex), 1.0)
    return awgn(frame, snr_db, seed, check_rms=True).samples


def _features(s_hat, records, indices, snrs, cfg):
    xs, ys, ss, cid = [], [], [], []
    dev_index = {d: i for i, d in enumerate(cfg.device_ids)}
    for i in indices:
        # one noise draw per capture, scaled to each SNR (common random numbers)
        seed = derive_seed(cfg.seed, "awgn", records[i].capture_id)
        for snr in snrs:
            xs.append(represent(noisy(s_hat[i], snr, seed), cfg))
            ys.append(dev_index[records[i].device_id])
            ss.append(snr)
            cid.append(records[i].capture_id)
    return np.stack(xs), np.array(ys, dtype=np.int64), np.array(ss), cid


@dataclass
class Prepared:
    """Synchronized captures of one scheme plus the capture-level split."""
    scheme: str
    records: list
    s_hat: np.ndarray
    train_idx: list
    test_idx: list


def prepare(cfg: ExperimentConfig, dataset_dir, scheme=None, cache_dir=None) -> Prepared:
    scheme = scheme or cfg.schemes[0]
    records, s_hat, _ = synchronized_set(cfg, dataset_dir, scheme, cache_dir)
    unknown = {r.device_id for r in records} - set(cfg.device_ids)
    if unknown:
        raise InputError(f"dataset holds devices missing from the config: {sorted(unknown)}")
    tr, te = split_captures(records, cfg)
    return Prepared(scheme, records, s_hat, tr, te)


def fit(cfg: ExperimentConfig, prep: Prepared):
    """Train the configured classifier on the training captures at the training SNRs.

    Returns ``(model, history)``; ``history`` is None for kNN.
    """
    x, y, _, _ = _features(prep.s_hat, prep.records, prep.train_idx, cfg.split.train_snrs, cfg)
    if cfg.classifier.shuffle_labels:
        y = y[make_rng(derive_seed(cfg.seed, "shuffle")).permutation(y.size)]
    c = cfg.classifier
    if c.kind == "knn":
        return KnnClassifier(c.k).fit(x.reshape(y.size, -1).astype(float), y), None
    spec = CnnSpec.preset(prep.scheme, x.shape[1:], len(cfg.device_ids))
    tc = TrainConfig(learning_rate=c.learning_rate, momentum=c.momentum, batch_size=c.batch_size,
                     max_epochs=c.max_epochs, seed=derive_seed(cfg.seed, "train"),
                     k_folds=cfg.split.k_folds, patience=c.patience)
    return train(x, y, spec, tc, class_labels=cfg.device_ids)


def evaluate(cfg: ExperimentConfig, prep: Prepared, model, out_dir=None) -> MetricsBundle:
    """Accuracy of ``model`` on the test captures at every SNR of the grid."""
    x, y, snr, cid = _features(prep.s_hat, prep.records, prep.test_idx, cfg.snr_grid_db, cfg)
    if isinstance(model, KnnClassifier):
        pred = model.predict(x.reshape(y.size, -1).astype(float))
    else:
        pred = forward(model, x).argmax(axis=1)
    n_classes = len(cfg.device_ids)
    per_snr = {float(s): float(np.mean(pred[snr == s] == y[snr == s])) for s in cfg.snr_grid_db}
    at = snr == cfg.report_snr_db
    extra = {"scheme": prep.scheme, "n_train_captures": len(prep.train_idx),
             "n_test_captures": len(prep.test_idx)}
    bundle = MetricsBundle(method=method_name(cfg), device_ids=list(cfg.device_ids),
                           report_snr_db=cfg.report_snr_db, accuracy=per_snr[cfg.report_snr_db],
                           per_snr=per_snr, confusion=confusion_matrix(pred[at], y[at], n_classes),
                           extra=extra)
    if out_dir is not None:
        bundle.write(out_dir)
        if x.dtype == np.uint8:
            _export_samples(x, y, snr, cid, cfg, Path(out_dir) / "dtp")
    return bundle


def run_experiment(cfg: ExperimentConfig, dataset_dir, out_dir=None, scheme=None,
                   cache_dir=None) -> MetricsBundle:
    """Synchronize, split, train on the training SNRs and evaluate across the grid."""
    prep = prepare(cfg, dataset_dir, scheme, cache_dir)
    model, history = fit(cfg, prep)
    bundle = evaluate(cfg, prep, model, out_dir)
    if history is not None:
        bundle.extra.update(best_fold=history["best_fold"], best_val_acc=history["best_val_acc"],
                            learnables=model.n_learnables)
        if out_dir is not None:
            save_model(model, Path(out_dir) / "model.dtpm")
            _write_history(history["epochs"], Path(out_dir) / "history.csv")
            bundle.write(out_dir)
    return bundle


def _write_history(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "epoch", "lr", "loss", "val_acc"])
        for r in rows:
            w.writerow([r["fold"], r["epoch"], f"{r['lr']:.6g}", f"{r['loss']:.6f}", f"{r['val_acc']:.6f}"])


def _export_samples(x, y, snr, cid, cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    for k, dev in enumerate(cfg.device_ids):
        hit = np.flatnonzero((y == k) & (snr == cfg.report_snr_db))
        if hit.size == 0:
            continue
        img = DtpImage(x[hit[0]])
        for ch in range(img.channels):
            export_pgm(img, out / f"{cid[hit[0]]}_snr{cfg.report_snr_db:g}_c{ch}.pgm", ch)
        img.save(out / f"{cid[hit[0]]}_snr{cfg.report_snr_db:g}.dtp")


COMPARE_METHODS = (
    ("dtp+cnn", {"kind": "cnn", "representation": "dtp"}),
    ("dctf+cnn", {"kind": "cnn", "representation": "dctf"}),
    ("hos+knn", {"kind": "knn", "representation": "hos"}),
)


def compare_methods(cfg: ExperimentConfig, dataset_dir, out_dir=None, cache_dir=None,
                    methods=COMPARE_METHODS) -> dict:
    """Run several representation/classifier pairs on one split; returns name -> bundle."""
    results = {}
    for name, over in methods:
        sub = replace(cfg, classifier=replace(cfg.classifier, **over))
        sub_out = None if out_dir is None else Path(out_dir) / name.replace("+", "_")
        results[name] = run_experiment(sub, dataset_dir, sub_out, cache_dir=cache_dir)
    if out_dir is not None:
        with open(Path(out_dir) / "compare.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["snr_db"] + list(results))
            for snr in cfg.snr_grid_db:
                w.writerow([f"{snr:g}"] + [f"{b.per_snr[snr]:.6f}" for b in results.values()])
    return results
