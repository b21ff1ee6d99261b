import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripletvoice.errors import (
    BadMagic,
    NoCachedActivations,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
    WidthTooSmall,
)
from tripletvoice.net import (
    SGD,
    NetConfig,
    build,
    decode_checkpoint,
    encode_checkpoint,
    forward,
    load_checkpoint,
    save_checkpoint,
)

# zero patch through the default W=16 net, init_seed 0, float32; recorded once
GOLDEN_HEAD = [0.3081047832965851, -0.0854186862707138, -0.11978712677955627, -0.2068793922662735]
GOLDEN_SUM = -6.053231023717672
GOLDEN_NORM = 5.865214694397295


def tiny(width=16, seed=3):
    return build(NetConfig(input_width=width, channels=(2, 3, 4, 4), init_seed=seed), dtype=np.float64)


@pytest.mark.parametrize("width, blocks", [(40, 5), (45, 5), (60, 5), (80, 5), (20, 4), (30, 4), (32, 5), (31, 4)])
def test_depth_rule(width, blocks):
    assert NetConfig(input_width=width).n_blocks == blocks


def test_width_trace_and_bounds():
    assert NetConfig(input_width=20).width_trace() == [20, 10, 5, 2, 1]
    with pytest.raises(WidthTooSmall):
        NetConfig(input_width=15)
    with pytest.raises(ValueError):
        NetConfig(input_width=40, n_blocks=4)


def test_param_shapes():
    shapes = dict(NetConfig(input_width=40).param_shapes())
    assert shapes["conv0.weight"] == (3, 3, 1, 16)
    assert shapes["conv4.weight"] == (3, 3, 128, 256)
    assert shapes["dense.weight"] == (256, 1024)
    assert shapes["dense.bias"] == (1024,)


def test_zero_patch_golden():
    net = build(NetConfig(input_width=16, init_seed=0))
    e = forward(net, np.zeros((16, 256))).values.astype(np.float64)
    assert e.shape == (1024,)
    np.testing.assert_allclose(e[:4], GOLDEN_HEAD, rtol=1e-5, atol=1e-6)
    assert e.sum() == pytest.approx(GOLDEN_SUM, rel=1e-5)
    assert np.linalg.norm(e) == pytest.approx(GOLDEN_NORM, rel=1e-5)


def test_determinism_and_local_sensitivity():
    net = build(NetConfig(input_width=16, init_seed=0))
    x = np.random.default_rng(0).standard_normal((16, 256))
    np.testing.assert_array_equal(net.forward(x), net.forward(x))
    y = x.copy()
    y[3, 7] += 1e-6
    assert np.linalg.norm(net.forward(x) - net.forward(y)) < 1e-2


def test_batch_equals_single():
    net = tiny()
    x = np.random.default_rng(1).standard_normal((3, 16, 256))
    batch = net.forward(x)
    for i in range(3):
        np.testing.assert_allclose(net.forward(x[i]), batch[i : i + 1], rtol=1e-12, atol=1e-12)


def test_shape_errors():
    net = tiny()
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 20, 256)))
    with pytest.raises(NoCachedActivations):
        net.backward(np.zeros((1, 1024)))


def test_backward_linearity():
    net = tiny()
    x = np.random.default_rng(2).standard_normal((2, 16, 256))
    up = np.random.default_rng(3).standard_normal((2, 1024))
    net.forward(x, training=True)
    zero = net.backward(np.zeros_like(up))
    assert all(not np.any(g) for g in zero.values())
    net.forward(x, training=True)
    g1 = net.backward(up)
    net.forward(x, training=True)
    g2 = net.backward(2 * up)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


def test_backward_matches_small_step_differences():
    """Elementwise central differences at a step small enough to avoid ReLU/max kinks."""
    net = tiny()
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 16, 256))
    up = rng.standard_normal((2, 1024))
    net.forward(x, training=True)
    grads = net.backward(up)

    def f():
        return float(np.sum(up * net.forward(x)))

    eps = 1e-6
    for name, p in net.params.items():
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            assert fd == pytest.approx(grads[name].reshape(-1)[i], rel=1e-3, abs=1e-6), name


def test_sgd_closed_forms():
    p = {"w": np.array([1.0])}
    SGD(0.1).step(p, {"w": np.array([2.0])})
    assert p["w"][0] == pytest.approx(0.8)

    p = {"w": np.array([1.0])}
    SGD(0.0).step(p, {"w": np.array([5.0])})
    assert p["w"][0] == 1.0

    p = {"w": np.array([0.0])}
    opt = SGD(0.1, momentum=0.9)
    opt.step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(-0.1)
    opt.step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(-0.29)  # second decrease 0.19


def test_checkpoint_round_trip(tmp_path):
    net = build(NetConfig(input_width=40, init_seed=5))
    x = np.random.default_rng(0).standard_normal((2, 40, 256))
    path = tmp_path / "m.tlfv"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.config == net.config
    np.testing.assert_array_equal(back.forward(x), net.forward(x))
    assert encode_checkpoint(back) == path.read_bytes()
    with pytest.raises(ShapeMismatch):
        back.forward(np.zeros((1, 30, 256)))


def test_checkpoint_errors():
    blob = encode_checkpoint(tiny().astype(np.float32))
    with pytest.raises(BadMagic):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(VersionMismatch):
        decode_checkpoint(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(ValueError):
        decode_checkpoint(blob + b"\x00")


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_truncated_checkpoint(data):
    blob = encode_checkpoint(tiny().astype(np.float32))
    cut = data.draw(st.integers(0, len(blob) - 1))
    with pytest.raises((TruncatedFile, BadMagic)):
        decode_checkpoint(blob[:cut])
