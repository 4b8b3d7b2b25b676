"""A small NHWC convolutional network in plain numpy.

Each block is conv -> batchnorm -> ReLU -> conv -> batchnorm -> ReLU ->
2x2 max-pool; the head flattens into one dense layer with softmax. The
convolutions use "same" padding (for even kernels the extra row/column of
padding goes to the bottom/right) and carry no bias, since the following
batchnorm shift makes one redundant.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..core import make_rng
from ..errors import ConfigurationError, InputError, NumericError, TrainingError

BN_EPS = 1e-5
BN_DECAY = 0.9


# ---------------------------------------------------------------- layers

class Conv2D:
    kind = "conv"

    def __init__(self, kh, kw, c_in, c_out, rng, dtype):
        std = np.sqrt(2.0 / (kh * kw * c_in))
        self.params = {"W": (rng.standard_normal((kh, kw, c_in, c_out)) * std).astype(dtype)}
        self.buffers = {}
        self.kh, self.kw = kh, kw
        self.pad = ((kh - 1) // 2, kh - 1 - (kh - 1) // 2, (kw - 1) // 2, kw - 1 - (kw - 1) // 2)

    def out_shape(self, shape):
        h, w, _ = shape
        return h, w, self.params["W"].shape[3]

    def forward(self, x, train=False):
        n, h, w, c = x.shape
        pt, pb, pl, pr = self.pad
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        win = sliding_window_view(xp, (self.kh, self.kw), axis=(1, 2))  # n,h,w,c,kh,kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, -1)
        W = self.params["W"]
        self._cache = (x.shape, cols)
        return (cols @ W.reshape(-1, W.shape[3])).reshape(n, h, w, W.shape[3])

    def backward(self, dout):
        (n, h, w, c), cols = self._cache
        W = self.params["W"]
        d2 = dout.reshape(-1, W.shape[3])
        self.grads = {"W": (cols.T @ d2).reshape(W.shape)}
        dcols = (d2 @ W.reshape(-1, W.shape[3]).T).reshape(n, h, w, self.kh, self.kw, c)
        pt, pb, pl, pr = self.pad
        dxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=dout.dtype)
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
        return dxp[:, pt:pt + h, pl:pl + w, :]


class BatchNorm:
    kind = "bn"

    def __init__(self, channels, dtype):
        self.params = {"gamma": np.ones(channels, dtype=dtype), "beta": np.zeros(channels, dtype=dtype)}
        self.buffers = {"mean": np.zeros(channels, dtype=dtype), "var": np.ones(channels, dtype=dtype)}

    def out_shape(self, shape):
        return shape

    def forward(self, x, train=False, update_stats=True):
        axes = tuple(range(x.ndim - 1))
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_stats:
                b = self.buffers
                b["mean"][...] = BN_DECAY * b["mean"] + (1 - BN_DECAY) * mu
                b["var"][...] = BN_DECAY * b["var"] + (1 - BN_DECAY) * var
        else:
            mu, var = self.buffers["mean"], self.buffers["var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dout):
        xhat, inv = self._cache
        axes = tuple(range(dout.ndim - 1))
        m = dout.size // dout.shape[-1]
        self.grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        dxhat = dout * self.params["gamma"]
        return inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class ReLU:
    kind = "relu"
    params: dict = {}
    buffers: dict = {}

    def out_shape(self, shape):
        return shape

    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        self.grads = {}
        return dout * self._mask


class MaxPool2:
    kind = "pool"
    params: dict = {}
    buffers: dict = {}

    def out_shape(self, shape):
        h, w, c = shape
        return h // 2, w // 2, c

    def forward(self, x, train=False):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        v = x[:, :2 * h2, :2 * w2, :].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        v = v.reshape(n, h2, w2, c, 4)
        arg = v.argmax(axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        (n, h, w, c), arg = self._cache
        h2, w2 = h // 2, w // 2
        d = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
        np.put_along_axis(d, arg[..., None], dout[..., None], axis=-1)
        d = d.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        dx = np.zeros((n, h, w, c), dtype=dout.dtype)
        dx[:, :2 * h2, :2 * w2, :] = d
        self.grads = {}
        return dx


class Dense:
    kind = "dense"

    def __init__(self, d_in, d_out, rng, dtype, zero=False):
        std = 0.0 if zero else np.sqrt(1.0 / d_in)
        self.params = {"W": (rng.standard_normal((d_in, d_out)) * std).astype(dtype),
                       "b": np.zeros(d_out, dtype=dtype)}
        self.buffers = {}

    def out_shape(self, shape):
        return (self.params["W"].shape[1],)

    def forward(self, x, train=False):
        self._shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        self._x = flat
        return flat @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads = {"W": self._x.T @ dout, "b": dout.sum(axis=0)}
        return (dout @ self.params["W"].T).reshape(self._shape)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = logits.shape[0]
    picked = np.clip(p[np.arange(n), labels], np.finfo(p.dtype).tiny, None)
    loss = float(-np.mean(np.log(picked)))
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


# ---------------------------------------------------------------- model

PRESETS = {
    "bpsk": (((8, 8, 22), (8, 8, 22)), ((4, 4, 11), (4, 4, 11))),
    "qam4": (((5, 5, 25), (5, 5, 25)), ((4, 4, 7), (4, 4, 7))),
    "qam16": (((7, 7, 24), (7, 7, 24)), ((4, 4, 27), (4, 4, 27))),
    "qam64": (((7, 7, 24), (7, 7, 24)), ((7, 7, 23), (7, 7, 23))),
}
PRESETS["bpsk45"] = PRESETS["bpsk"]


@dataclass(frozen=True)
class CnnSpec:
    input_shape: tuple          # (h, w, c)
    n_classes: int
    blocks: tuple               # per block: two (kh, kw, filters) convolutions

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "blocks", tuple(tuple(tuple(int(v) for v in conv) for conv in blk)
                                                 for blk in self.blocks))
        if len(self.blocks) < 1:
            raise ConfigurationError("need at least one block")
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if any(len(blk) != 2 for blk in self.blocks):
            raise ConfigurationError("each block holds exactly two convolutions")
        h, w, _ = self.feature_shape
        if h < 1 or w < 1:
            raise ConfigurationError(f"input {self.input_shape} vanishes after {len(self.blocks)} pools")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def feature_shape(self) -> tuple:
        h, w, c = self.input_shape
        for blk in self.blocks:
            c = blk[-1][2]
            h, w = h // 2, w // 2
        return h, w, c

    @classmethod
    def preset(cls, scheme: str, input_shape, n_classes: int) -> "CnnSpec":
        if scheme not in PRESETS:
            raise ConfigurationError(f"no preset for scheme {scheme!r}")
        return cls(tuple(input_shape), n_classes, PRESETS[scheme])

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "n_classes": self.n_classes,
                "blocks": [[list(c) for c in blk] for blk in self.blocks]}

    @classmethod
    def from_dict(cls, d) -> "CnnSpec":
        return cls(tuple(d["input_shape"]), int(d["n_classes"]), d["blocks"])


class CnnModel:
    def __init__(self, spec: CnnSpec, seed: int = 0, dtype=np.float32, zero_head: bool = False,
                 labels=None):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.labels = list(labels) if labels is not None else list(range(spec.n_classes))
        rng = make_rng(seed)
        layers = []
        c = spec.input_shape[2]
        for blk in spec.blocks:
            for kh, kw, f in blk:
                layers += [Conv2D(kh, kw, c, f, rng, self.dtype), BatchNorm(f, self.dtype), ReLU()]
                c = f
            layers.append(MaxPool2())
        fh, fw, fc = spec.feature_shape
        layers.append(Dense(fh * fw * fc, spec.n_classes, rng, self.dtype, zero=zero_head))
        self.layers = layers

    # parameters and buffers in declaration order
    def named_params(self):
        return [(f"{i}.{k}", layer.params[k]) for i, layer in enumerate(self.layers) for k in layer.params]

    def named_buffers(self):
        return [(f"{i}.{k}", layer.buffers[k]) for i, layer in enumerate(self.layers) for k in layer.buffers]

    @property
    def n_learnables(self) -> int:
        return int(sum(p.size for _, p in self.named_params()))

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != self.spec.input_shape:
            raise InputError(f"input shape {x.shape[1:]} does not match model {self.spec.input_shape}")
        return x.astype(self.dtype, copy=False)

    def logits(self, x, train=False, update_stats=True):
        a = self._check_input(x)
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                a = layer.forward(a, train, update_stats)
            else:
                a = layer.forward(a, train)
            if not np.all(np.isfinite(a)):
                raise NumericError(f"non-finite activation after {layer.kind} layer")
        return a

    def grads(self):
        return [(f"{i}.{k}", layer.grads[k]) for i, layer in enumerate(self.layers) for k in layer.params]

    def state_hash(self) -> str:
        return hashlib.sha256(model_to_bytes(self)).hexdigest()


def scale_images(images) -> np.ndarray:
    """u8 DTP bins to [0, 1] model input."""
    a = np.asarray(images)
    return a.astype(np.float32) / 255.0 if a.dtype == np.uint8 else a


def _auto_batch(model: CnnModel, budget: int = 1 << 25) -> int:
    """Largest inference batch whose biggest im2col matrix stays within ``budget`` values."""
    h, w, c = model.spec.input_shape
    worst = 1
    for blk in model.spec.blocks:
        for kh, kw, f in blk:
            worst = max(worst, h * w * kh * kw * c)
            c = f
        h, w = h // 2, w // 2
    return int(max(1, min(256, budget // worst)))


def forward(model: CnnModel, images, batch_size: Optional[int] = None) -> np.ndarray:
    """Class probabilities in inference mode (running batchnorm statistics)."""
    x = model._check_input(scale_images(images))
    bs = batch_size or _auto_batch(model)
    out = [softmax(model.logits(x[i:i + bs])) for i in range(0, x.shape[0], bs)]
    return np.concatenate(out, axis=0)


def backward(model: CnnModel, batch, labels, update_stats: bool = False):
    """Mean cross-entropy on a training-mode pass and the gradient of every parameter."""
    labels = np.asarray(labels, dtype=np.int64)
    x = model._check_input(scale_images(batch))
    if labels.shape != (x.shape[0],) or labels.min() < 0 or labels.max() >= model.spec.n_classes:
        raise InputError("labels must be valid class indices, one per sample")
    z = model.logits(x, train=True, update_stats=update_stats)
    loss, d = softmax_xent(z, labels)
    for layer in reversed(model.layers):
        d = layer.backward(d)
    return loss, [g for _, g in model.grads()]


def sgdm_step(params, grads, velocity, lr: float, momentum: float):
    """``v <- momentum*v - lr*g``; ``p <- p + v`` (in place, also returned)."""
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise InputError("parameter, gradient and velocity shapes must agree")
        v *= momentum
        v -= lr * g
        p += v
    return params, velocity


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 40
    seed: int = 0
    k_folds: int = 3
    lr_drop_every: int = 10
    lr_drop_factor: float = 0.5
    patience: Optional[int] = None     # stop a fold after this many epochs without val gain

    def __post_init__(self):
        if self.k_folds < 2:
            raise ConfigurationError("k_folds must be >= 2")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("max_epochs and batch_size must be positive")


def stratified_folds(labels, k: int, rng) -> list:
    """Assign samples to ``k`` folds round-robin within each shuffled class."""
    labels = np.asarray(labels)
    fold = np.empty(labels.size, dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        fold[idx] = np.arange(idx.size) % k
    return [np.flatnonzero(fold == i) for i in range(k)]


def accuracy(model: CnnModel, images, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(forward(model, images).argmax(axis=1) == np.asarray(labels)))


def _fit_fold(model, x, y, val_x, val_y, cfg, rng, fold, history):
    params = [p for _, p in model.named_params()]
    velocity = [np.zeros_like(p) for p in params]
    best_acc, best_state, stale = -1.0, None, 0
    for epoch in range(cfg.max_epochs):
        lr = cfg.learning_rate * cfg.lr_drop_factor ** (epoch // cfg.lr_drop_every)
        order = rng.permutation(x.shape[0])
        losses = []
        for i in range(0, order.size, cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            if b.size < 2:
                continue  # batchnorm needs more than one sample
            try:
                loss, grads = backward(model, x[b], y[b], update_stats=True)
            except NumericError as exc:
                raise TrainingError(str(exc), epoch) from exc
            if not np.isfinite(loss):
                raise TrainingError("loss diverged", epoch)
            sgdm_step(params, grads, velocity, lr, cfg.momentum)
            losses.append(loss)
        val_acc = accuracy(model, val_x, val_y)
        history.append({"fold": fold, "epoch": epoch, "lr": lr, "loss": float(np.mean(losses)),
                        "val_acc": val_acc})
        if val_acc > best_acc:
            best_acc, best_state, stale = val_acc, model_to_bytes(model), 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    return best_acc, best_state


def train(images, labels, spec: CnnSpec, cfg: TrainConfig = TrainConfig(), class_labels=None):
    """k-fold training; returns the fold model with the best validation accuracy.

    Within each fold the epoch with the highest validation accuracy is kept.
    ``history`` lists one record per fold and epoch.
    """
    x = scale_images(images)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.size:
        raise InputError("one label per image is required")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise InputError("training needs at least two classes")
    if counts.min() < cfg.k_folds:
        raise InputError("every class needs at least k_folds samples")
    rng = make_rng(cfg.seed)
    folds = stratified_folds(y, cfg.k_folds, rng)
    history, best = [], (-1.0, None, -1)
    for k, val_idx in enumerate(folds):
        tr_idx = np.concatenate([f for j, f in enumerate(folds) if j != k])
        model = CnnModel(spec, seed=int(rng.integers(2 ** 62)), labels=class_labels)
        acc, state = _fit_fold(model, x[tr_idx], y[tr_idx], x[val_idx], y[val_idx], cfg, rng, k, history)
        if acc > best[0]:
            best = (acc, state, k)
    model = model_from_bytes(best[1])
    return model, {"epochs": history, "best_fold": best[2], "best_val_acc": best[0]}


# ---------------------------------------------------------------- persistence

_MAGIC = b"DTPM"
_VERSION = 1


def model_to_bytes(model: CnnModel) -> bytes:
    desc = {"spec": model.spec.to_dict(), "labels": model.labels,
            "tensors": [[name, list(a.shape)] for name, a in model.named_params() + model.named_buffers()]}
    head = json.dumps(desc, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                    for _, a in model.named_params() + model.named_buffers())
    return _MAGIC + struct.pack("<HI", _VERSION, len(head)) + head + body


def model_from_bytes(data: bytes) -> CnnModel:
    if data[:4] != _MAGIC:
        raise InputError("not a DTPM model file")
    version, n = struct.unpack("<HI", data[4:10])
    if version != _VERSION:
        raise InputError(f"unsupported DTPM version {version}")
    desc = json.loads(data[10:10 + n].decode("utf-8"))
    model = CnnModel(CnnSpec.from_dict(desc["spec"]), labels=desc["labels"])
    pos = 10 + n
    targets = dict(model.named_params() + model.named_buffers())
    for name, shape in desc["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        if pos + 4 * size > len(data):
            raise InputError("DTPM payload is truncated")
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        targets[name][...] = arr
        pos += 4 * size
    if pos != len(data):
        raise InputError("DTPM payload length mismatch")
    return model


def save_model(model: CnnModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> CnnModel:
    return model_from_bytes(Path(path).read_bytes())
