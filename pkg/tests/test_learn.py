import numpy as np
import pytest

from dtpauth.errors import ConfigurationError, InputError
from dtpauth.learn import (CnnModel, CnnSpec, KnnClassifier, TrainConfig, backward, forward,
                           knn_classify, load_model, model_from_bytes, model_to_bytes, save_model,
                           sgdm_step, train)
from dtpauth.learn.cnn import BatchNorm, Conv2D, Dense, MaxPool2, softmax, softmax_xent
from oracles import numeric_grad

TINY = CnnSpec((4, 4, 1), 3, (((3, 3, 2), (2, 2, 2)),))


def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(a)) + np.max(np.abs(b))))


def _layer_check(layer, x, rng):
    """Gradient of sum(out * r) w.r.t. the input and every parameter."""
    r = rng.standard_normal(layer.forward(x.copy(), True).shape)

    def f():
        return float(np.sum(layer.forward(x, True) * r))

    layer.forward(x, True)
    dx = layer.backward(r)
    assert _rel_err(dx, numeric_grad(f, x)) < 1e-4
    for k, p in layer.params.items():
        assert _rel_err(layer.grads[k], numeric_grad(f, p)) < 1e-4


def test_conv_gradients(rng):
    for kh, kw in [(3, 3), (2, 2), (4, 3)]:
        layer = Conv2D(kh, kw, 2, 3, rng, np.float64)
        _layer_check(layer, rng.standard_normal((2, 5, 4, 2)), rng)


def test_batchnorm_gradients(rng):
    layer = BatchNorm(3, np.float64)
    layer.params["gamma"][:] = rng.uniform(0.5, 2, 3)
    layer.params["beta"][:] = rng.standard_normal(3)
    x = rng.standard_normal((3, 2, 2, 3))
    r = rng.standard_normal(x.shape)

    def f():
        return float(np.sum(layer.forward(x, True, update_stats=False) * r))

    layer.forward(x, True, update_stats=False)
    dx = layer.backward(r)
    assert _rel_err(dx, numeric_grad(f, x)) < 1e-4
    for k, p in layer.params.items():
        assert _rel_err(layer.grads[k], numeric_grad(f, p)) < 1e-4


def test_dense_and_pool_gradients(rng):
    _layer_check(Dense(12, 4, rng, np.float64), rng.standard_normal((3, 2, 2, 3)), rng)
    # distinct values keep the pool argmax away from ties
    x = rng.permutation(96).reshape(2, 4, 4, 3).astype(float) / 10
    _layer_check(MaxPool2(), x, rng)


def test_softmax_xent_gradient(rng):
    z = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    _, d = softmax_xent(z, y)
    assert _rel_err(d, numeric_grad(lambda: softmax_xent(z, y)[0], z)) < 1e-4


def test_composed_network_gradients(rng):
    model = CnnModel(TINY, seed=3, dtype=np.float64)
    x = rng.uniform(0, 1, (5, 4, 4, 1))
    y = np.array([0, 1, 2, 1, 0])
    _, grads = backward(model, x, y)
    for (name, p), g in zip(model.named_params(), grads):
        num = numeric_grad(lambda: backward(model, x, y)[0], p)
        assert g.shape == p.shape
        assert _rel_err(g, num) < 1e-4, name


def test_batchnorm_training_statistics(rng):
    bn = BatchNorm(4, np.float64)
    out = bn.forward(rng.standard_normal((16, 3, 3, 4)) * 5 + 2, train=True)
    assert np.all(np.abs(out.mean(axis=(0, 1, 2))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 1, 2)) - 1) < 1e-4)
    assert np.all(bn.buffers["mean"] != 0)


def test_softmax_rows_sum_to_one(rng):
    p = softmax(rng.standard_normal((10, 5)) * 30)
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1, atol=1e-6)
    model = CnnModel(TINY, seed=1)
    probs = forward(model, rng.integers(0, 256, (7, 4, 4, 1)).astype(np.uint8))
    assert np.allclose(probs.sum(axis=1), 1, atol=1e-6)


def test_zero_head_uniform(rng):
    model = CnnModel(TINY, seed=1, zero_head=True)
    probs = forward(model, rng.uniform(0, 1, (4, 4, 4, 1)))
    assert np.allclose(probs, 1 / 3, atol=1e-7)


def test_batch_permutation_equivariance(rng):
    model = CnnModel(TINY, seed=2)
    x = rng.uniform(0, 1, (6, 4, 4, 1))
    perm = rng.permutation(6)
    assert np.allclose(forward(model, x)[perm], forward(model, x[perm]), atol=1e-6)


def test_shape_mismatch():
    with pytest.raises(InputError):
        forward(CnnModel(TINY), np.zeros((2, 5, 4, 1)))
    with pytest.raises(ConfigurationError):
        CnnSpec((2, 2, 1), 3, (((3, 3, 2), (3, 3, 2)), ((3, 3, 2), (3, 3, 2))))


def test_duplicate_sample_doubles_contribution(rng):
    model = CnnModel(CnnSpec((4, 4, 1), 2, (((2, 2, 2), (2, 2, 2)),)), seed=4, dtype=np.float64)
    # per-sample gradients are only separable without batch coupling, so use inference-mode
    # batchnorm by checking the dense head alone
    dense = model.layers[-1]
    feats = rng.standard_normal((3, 2, 2, 2))
    y = np.array([0, 1, 0])

    def head_grad(f, lab):
        loss, d = softmax_xent(dense.forward(f), lab)
        dense.backward(d)
        return dense.grads["W"] * f.shape[0]

    g1 = head_grad(feats, y)
    g2 = head_grad(np.concatenate([feats, feats[:1]]), np.concatenate([y, y[:1]]))
    single = head_grad(feats[:1], y[:1])
    assert np.allclose(g2 - g1, single, atol=1e-12)


def test_confident_prediction_loss():
    z = np.array([[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]])
    loss, d = softmax_xent(z, np.array([0, 2]))
    assert loss < 1e-6 and np.linalg.norm(d) < 1e-5


def test_sgdm_examples():
    p, g, v = [np.array([1.0, 2.0])], [np.array([0.5, -1.0])], [np.zeros(2)]
    sgdm_step(p, g, v, 0.1, 0.0)
    assert np.allclose(p[0], [0.95, 2.1])
    q, z = [np.array([3.0])], [np.zeros(1)]
    sgdm_step(q, [np.zeros(1)], z, 0.1, 0.9)
    assert q[0][0] == 3.0
    r, u = [np.array([0.0])], [np.zeros(1)]
    for _ in range(2):
        sgdm_step(r, [np.array([1.0])], u, 0.1, 0.9)
    assert r[0][0] == pytest.approx(-0.1 * (1 + 1.9))


def _toy_set(n=24, seed=0):
    rng = np.random.default_rng(seed)
    dark = rng.integers(0, 30, (n, 8, 8, 1))
    bright = rng.integers(220, 256, (n, 8, 8, 1))
    return np.concatenate([dark, bright]).astype(np.uint8), np.repeat([0, 1], n)


TOY = CnnSpec((8, 8, 1), 2, (((3, 3, 4), (3, 3, 4)),))


def test_separable_toy_training():
    x, y = _toy_set()
    model, hist = train(x, y, TOY, TrainConfig(max_epochs=5, batch_size=8, seed=1))
    assert hist["best_val_acc"] == 1.0
    assert np.mean(forward(model, x).argmax(axis=1) == y) == 1.0


def test_training_deterministic():
    x, y = _toy_set()
    cfg = TrainConfig(max_epochs=2, batch_size=8, seed=5)
    a, _ = train(x, y, TOY, cfg)
    b, _ = train(x, y, TOY, cfg)
    assert a.state_hash() == b.state_hash()


def test_shuffled_labels_near_chance():
    rng = np.random.default_rng(9)
    x = rng.integers(0, 256, (300, 8, 8, 1)).astype(np.uint8)
    y = np.repeat([0, 1, 2], 100)
    spec = CnnSpec((8, 8, 1), 3, (((3, 3, 4), (3, 3, 4)),))
    _, hist = train(x, rng.permutation(y), spec, TrainConfig(max_epochs=3, batch_size=8, seed=2))
    last = [h["val_acc"] for h in hist["epochs"] if h["epoch"] == 2]
    assert abs(np.mean(last) - 1 / 3) <= 0.10


def test_training_input_errors():
    x, y = _toy_set(2)
    with pytest.raises(InputError):
        train(x, y, TOY, TrainConfig(k_folds=3))
    with pytest.raises(InputError):
        train(x, np.zeros(4, int), TOY)


def test_dtpm_round_trip(tmp_path):
    x, y = _toy_set()
    model, _ = train(x, y, TOY, TrainConfig(max_epochs=1, batch_size=8), class_labels=["a", "b"])
    data = model_to_bytes(model)
    assert data[:4] == b"DTPM"
    save_model(model, tmp_path / "m.dtpm")
    back = load_model(tmp_path / "m.dtpm")
    assert model_to_bytes(back) == data and back.labels == ["a", "b"]
    assert np.array_equal(forward(back, x), forward(model, x))
    with pytest.raises(InputError):
        model_from_bytes(data[:-4])


def test_qam4_preset_shapes():
    spec = CnnSpec.preset("qam4", (100, 100, 1), 5)
    assert spec.feature_shape == (25, 25, 7)
    model = CnnModel(spec)
    convs = 5 * 5 * 1 * 25 + 5 * 5 * 25 * 25 + 4 * 4 * 25 * 7 + 4 * 4 * 7 * 7
    bns = 2 * (25 + 25 + 7 + 7)
    assert model.n_learnables == convs + bns + 25 * 25 * 7 * 5 + 5


def test_knn_examples():
    x = np.array([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0], [6.0, 5.0], [5.0, 6.0]])
    y = np.array([0, 0, 1, 1, 1])
    assert knn_classify(x, y, x[1], k=1) == 0
    assert knn_classify(x, y, [0.0, 0.0], k=5) == 1
    with pytest.raises(InputError):
        knn_classify([], [], [0.0], k=1)
    # tie between two labels goes to the nearer pair
    assert knn_classify(x[:4], y[:4], [4.0, 4.0], k=4) == 1


def test_knn_three_clusters():
    rng = np.random.default_rng(3)
    centres = np.array([[0, 0, 0], [10, 0, 0], [0, 10, 0]], float)
    x = np.concatenate([c + 0.3 * rng.standard_normal((60, 3)) for c in centres])
    y = np.repeat([0, 1, 2], 60)
    idx = rng.permutation(180)
    tr, te = idx[:120], idx[120:]
    pred = KnnClassifier(5).fit(x[tr], y[tr]).predict(x[te])
    assert np.mean(pred == y[te]) > 0.99
