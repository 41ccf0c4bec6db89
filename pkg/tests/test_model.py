import math
import struct

import numpy as np
import pytest

from sialab.model import (ARCHITECTURES, BadMagicError, Conv3x3, Dense, Flatten, HeaderShapeError,
                          MaxPool2, Model, ReLU, TruncatedError, VersionError, build_arch, init_weights,
                          load_model, save_model, train)
from sialab.numerics import SeededRng


def small_net(seed=0, dtype=np.float32):
    m = Model([Conv3x3(1, 4), ReLU(), MaxPool2(), Flatten((4, 4, 4)), Dense(64, 10)], (1, 8, 8), "tiny")
    init_weights(m, SeededRng(seed))
    return m.astype(dtype)


def fd_grad(model, x, y, coords, step=1e-3):
    """Central differences of the loss, evaluated in float64."""
    m64 = model.astype(np.float64)
    x = x.astype(np.float64)
    out = []
    for c in coords:
        xp, xm = x.copy(), x.copy()
        xp[c] += step
        xm[c] -= step
        out.append((m64.loss_and_input_grad(xp, y)[0] - m64.loss_and_input_grad(xm, y)[0]) / (2 * step))
    return np.array(out)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def random_coords(rng, shape, n):
    flat = rng.choice(int(np.prod(shape)), n, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def test_zero_weights_uniform_softmax():
    m = build_arch("cnn-a", (1, 8, 8), 10)
    x = SeededRng(0).uniform(size=(1, 8, 8)).astype(np.float32)
    logits, _ = m.forward(x)
    np.testing.assert_array_equal(logits, np.zeros(10))
    np.testing.assert_allclose(m.predict(x), 0.1, atol=1e-7)
    loss, g = m.loss_and_input_grad(x, 3)
    assert loss == pytest.approx(math.log(10), abs=1e-6)
    np.testing.assert_array_equal(g, 0)


def test_dense_selects_weight_column():
    m = Model([Flatten((1, 2, 2)), Dense(4, 3)], (1, 2, 2))
    dense = m.layers[1]
    dense.weight = np.arange(12, dtype=np.float32).reshape(3, 4)
    dense.bias = np.array([0.5, -1.0, 2.0], np.float32)
    x = np.zeros((1, 2, 2), np.float32)
    x[0, 1, 0] = 1.0
    np.testing.assert_array_equal(m.logits(x), dense.weight[:, 2] + dense.bias)


def test_forward_is_pure():
    m = small_net(1)
    x = SeededRng(2).uniform(size=(1, 8, 8)).astype(np.float32)
    a, _ = m.forward(x)
    b, _ = m.forward(x.copy())
    np.testing.assert_array_equal(a, b)
    ga = m.loss_and_input_grad(x, 4)[1]
    gb = m.loss_and_input_grad(x, 4)[1]
    np.testing.assert_array_equal(ga, gb)


def test_invalid_class_and_shape():
    m = small_net()
    x = np.zeros((1, 8, 8), np.float32)
    with pytest.raises(ValueError):
        m.loss_and_input_grad(x, 10)
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 9, 8), np.float32))


def test_loss_nonnegative_and_probs_normalised():
    rng = SeededRng(5)
    for arch in ARCHITECTURES:
        m = build_arch(arch, (1, 16, 16), 10)
        init_weights(m, rng.substream(hash(arch) % 97))
        x = rng.uniform(size=(6, 1, 16, 16)).astype(np.float32)
        p = m.predict(x)
        assert np.all(p >= 0) and np.all(p <= 1)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)
        losses, grads = m.loss_and_input_grad(x, np.arange(6))
        assert np.all(losses >= 0)
        assert grads.shape == x.shape


def test_batched_grad_matches_single():
    m = small_net(3)
    x = SeededRng(4).uniform(size=(3, 1, 8, 8)).astype(np.float32)
    y = np.array([1, 5, 9])
    losses, grads = m.loss_and_input_grad(x, y)
    for i in range(3):
        loss, g = m.loss_and_input_grad(x[i], y[i])
        assert loss == pytest.approx(losses[i], rel=1e-6)
        np.testing.assert_allclose(g, grads[i], rtol=1e-5, atol=1e-7)


def test_gradient_matches_finite_differences_float32():
    rng = SeededRng(11)
    m = small_net(7)
    x = rng.uniform(size=(1, 8, 8)).astype(np.float32)
    coords = random_coords(rng, x.shape, 64)
    g = m.loss_and_input_grad(x, 2)[1]
    assert rel_err(np.array([g[c] for c in coords]), fd_grad(m, x, 2, coords)) <= 1e-2


def test_gradient_matches_finite_differences_float64():
    rng = SeededRng(12)
    m = small_net(8, np.float64)
    x = rng.uniform(size=(1, 8, 8))
    coords = random_coords(rng, x.shape, 64)
    g = m.loss_and_input_grad(x, 6)[1]
    assert rel_err(np.array([g[c] for c in coords]), fd_grad(m, x, 6, coords, step=1e-5)) <= 1e-4


def test_inactive_relu_path_carries_no_gradient():
    m = Model([Flatten((1, 2, 2)), Dense(4, 2), ReLU(), Dense(2, 3)], (1, 2, 2))
    m.layers[1].weight = np.array([[1, 0, 0, 0], [0, -1, 0, 0]], np.float32)
    m.layers[1].bias = np.zeros(2, np.float32)
    m.layers[3].weight = np.ones((3, 2), np.float32) * np.array([[1], [2], [3]], np.float32)
    x = np.array([[[0.5, 0.5], [0.5, 0.5]]], np.float32)  # second hidden unit is inactive
    g = m.loss_and_input_grad(x, 0)[1]
    assert g[0, 0, 1] == 0.0
    assert g[0, 0, 0] != 0.0
    # nudging the dead input by less than its margin leaves the loss unchanged
    x2 = x.copy()
    x2[0, 0, 1] += 0.1
    assert m.loss_and_input_grad(x2, 0)[0] == m.loss_and_input_grad(x, 0)[0]


def test_maxpool_routes_to_argmax():
    pool = MaxPool2()
    x = np.array([[[[1, 5], [3, 2]]]], np.float32)
    out, cache = pool.forward(x)
    assert out[0, 0, 0, 0] == 5
    dx, _ = pool.backward(np.ones((1, 1, 1, 1), np.float32), cache)
    np.testing.assert_array_equal(dx, [[[[0, 1], [0, 0]]]])


def test_features_are_post_relu():
    m = build_arch("cnn-b", (1, 16, 16), 10)
    init_weights(m, SeededRng(0))
    feats = m.features(np.full((1, 16, 16), 0.5, np.float32))
    assert [f.shape for f in feats] == [(12, 16, 16), (12, 16, 16), (24, 8, 8), (64,)]
    assert all(np.all(f >= 0) for f in feats)


# -- training ----------------------------------------------------------------

def separable(n, rng):
    y = rng.integers(0, 2, size=n)
    x = rng.uniform(0, 0.3, size=(n, 1, 4, 4))
    x[y == 1, 0, :2] += 0.6
    return x.astype(np.float32), y


def test_zero_epochs_returns_init():
    x, y = separable(20, SeededRng(0))
    m = train(Model([Flatten((1, 4, 4)), Dense(16, 2)], (1, 4, 4)), x, y, 0, 0.1, SeededRng(3))
    ref = init_weights(Model([Flatten((1, 4, 4)), Dense(16, 2)], (1, 4, 4)), SeededRng(3).substream(0))
    np.testing.assert_array_equal(m.layers[1].weight, ref.layers[1].weight)


def test_trains_separable_set():
    x, y = separable(400, SeededRng(1))
    m = train(Model([Flatten((1, 4, 4)), Dense(16, 8), ReLU(), Dense(8, 2)], (1, 4, 4)), x, y, 10, 0.1, SeededRng(2))
    assert m.train_log.train_accuracy >= 0.99


def test_training_is_deterministic():
    x, y = separable(200, SeededRng(1))
    runs = [train(small_net_shape(), np.repeat(np.repeat(x, 2, 2), 2, 3), y, 2, 0.05, SeededRng(9)) for _ in range(2)]
    for a, b in zip(runs[0].params(), runs[1].params()):
        np.testing.assert_array_equal(a, b)


def small_net_shape():
    return Model([Conv3x3(1, 4), ReLU(), MaxPool2(), Flatten((4, 4, 4)), Dense(64, 2)], (1, 8, 8))


def test_training_rejects_bad_inputs():
    with pytest.raises(ValueError):
        train(small_net_shape(), np.zeros((0, 1, 8, 8)), np.zeros(0), 1, 0.1, SeededRng(0))
    with pytest.raises(ValueError):
        train(small_net_shape(), np.zeros((2, 1, 8, 8)), np.zeros(2), 1, 0.0, SeededRng(0))


def test_different_seeds_disagree():
    rng = SeededRng(4)
    x = rng.uniform(size=(300, 1, 8, 8)).astype(np.float32)
    y = (x[:, 0, :4].mean(axis=(1, 2)) > x[:, 0, 4:].mean(axis=(1, 2))).astype(int)
    a = train(small_net_shape(), x, y, 3, 0.05, SeededRng(1))
    b = train(Model([Flatten((1, 8, 8)), Dense(64, 16), ReLU(), Dense(16, 2)], (1, 8, 8)), x, y, 3, 0.05, SeededRng(2))
    probe = rng.uniform(size=(500, 1, 8, 8)).astype(np.float32)
    assert np.mean(a.classify(probe) == b.classify(probe)) < 1.0


# -- serialization -----------------------------------------------------------

@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_round_trip_is_bit_exact(arch, tmp_path):
    m = init_weights(build_arch(arch, (1, 16, 16), 10), SeededRng(1))
    path = tmp_path / "m.siam"
    save_model(m, path)
    back = load_model(path)
    assert back.input_shape == m.input_shape and back.num_classes == 10
    for a, b in zip(m.params(), back.params()):
        assert a.tobytes() == b.tobytes()
    save_model(back, tmp_path / "again.siam")
    assert (tmp_path / "again.siam").read_bytes() == path.read_bytes()


def test_header_layout(tmp_path):
    m = Model([Flatten((1, 2, 2)), Dense(4, 3)], (1, 2, 2))
    save_model(m, tmp_path / "m.siam")
    data = (tmp_path / "m.siam").read_bytes()
    assert data[:4] == b"SIAM"
    assert struct.unpack("<II", data[4:12]) == (1, 2)
    assert data[12] == 3 and struct.unpack("<III", data[13:25]) == (1, 2, 2)
    assert data[25] == 4 and struct.unpack("<II", data[26:34]) == (4, 3)
    assert len(data) == 34 + 4 * (12 + 3)


def test_bad_magic(tmp_path):
    p = tmp_path / "m.siam"
    save_model(small_net(), p)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        load_model(p)


def test_version_mismatch(tmp_path):
    p = tmp_path / "m.siam"
    save_model(small_net(), p)
    d = p.read_bytes()
    p.write_bytes(d[:4] + struct.pack("<I", 2) + d[8:])
    with pytest.raises(VersionError):
        load_model(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "m.siam"
    save_model(small_net(), p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(TruncatedError):
        load_model(p)


def test_header_claims_more_weights(tmp_path):
    p = tmp_path / "m.siam"
    m = Model([Flatten((1, 2, 2)), Dense(4, 3)], (1, 2, 2))
    save_model(m, p)
    d = bytearray(p.read_bytes())
    d[30:34] = struct.pack("<I", 300)  # Dense nout
    p.write_bytes(bytes(d))
    with pytest.raises(TruncatedError):
        load_model(p)


def test_inconsistent_shapes(tmp_path):
    p = tmp_path / "m.siam"
    bad = struct.pack("<4sII", b"SIAM", 1, 2)
    bad += struct.pack("<BIII", 3, 1, 2, 2)
    bad += struct.pack("<BII", 4, 5, 1) + np.zeros(6, "<f4").tobytes()
    p.write_bytes(bad)
    with pytest.raises(HeaderShapeError):
        load_model(p)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_shipped_architectures_small_step(arch):
    # a 1e-5 step keeps almost every coordinate clear of ReLU/MaxPool kinks
    rng = SeededRng(21)
    m = init_weights(build_arch(arch, (1, 16, 16), 10), rng.substream(1)).astype(np.float64)
    for _ in range(3):
        x = rng.uniform(size=(1, 16, 16))
        coords = random_coords(rng, x.shape, 100)
        g = m.loss_and_input_grad(x, 4)[1]
        assert rel_err(np.array([g[c] for c in coords]), fd_grad(m, x, 4, coords, step=1e-5)) <= 1e-4
