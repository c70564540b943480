import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modelab.errors import CheckpointFormatError, InvalidLabel, NearZeroEmbedding, ShapeMismatch
from modelab.models import (ConditionalGenerator, DiscriminatorPool, FeatureExtractor, Mlp,
                            decompose, decompose_batch, generate, identity_generator,
                            init_params, load_mlp, read_checkpoint, save_mlp, select)
from modelab.tensor import Tape, Tensor, backward, finite_diff, tsum


def test_decompose_examples():
    d = decompose([3.0, 4.0])
    assert d.r == 5.0 and np.allclose(d.theta, [0.6, 0.8], atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    d = decompose(u)
    assert d.r == 1.0 and np.array_equal(d.theta, u)
    with pytest.raises(NearZeroEmbedding):
        decompose([1e-12, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=6))
def test_decompose_reconstructs(values):
    e = np.array(values)
    if np.linalg.norm(e) <= 1e-6:
        return
    d = decompose(e)
    assert abs(np.linalg.norm(d.theta) - 1.0) <= 1e-9
    assert d.r >= 0
    assert np.allclose(d.r * d.theta, e, atol=1e-9, rtol=0)


def test_decompose_batch_gradient():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3)) + 0.5
    w = rng.normal(size=(4, 3))
    e = Tensor(x, requires_grad=True)

    def loss():
        r, theta = decompose_batch(e)
        return tsum(r) + tsum(theta * w)

    with Tape():
        grads = backward(loss())
    numeric = finite_diff(loss, [e], 1e-6)[e]
    assert np.allclose(grads[e], numeric, rtol=1e-5, atol=1e-7)
    r, theta = decompose_batch(x)
    assert np.allclose(np.linalg.norm(theta.data, axis=1), 1.0, atol=1e-9)


def test_select_examples():
    pool = DiscriminatorPool(4, [1, 8, 1])
    assert select(pool, [0, 0, 1, 0]) == 2
    assert select(pool, [1, 0, 0, 0]) == 0
    for bad in ([0.5, 0.5, 0, 0], [0, 0, 0, 0], [1, 1, 0, 0], [0, 1, 0]):
        with pytest.raises(InvalidLabel):
            select(pool, bad)
    assert len({tuple(m.layer_dims) for m in pool.members}) == 1 and len(pool) == 4


def test_parameter_count():
    dims = [6, 64, 64, 64, 2]
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    assert Mlp(dims).parameter_count() == expected
    with pytest.raises(ShapeMismatch):
        Mlp([3])


def test_generate_zero_final_layer():
    g = ConditionalGenerator(2, 4)
    init_params(g.net, 0)
    g.params[-2].data[...] = 0.0
    g.params[-1].data[...] = 0.0
    out = generate(g, np.random.default_rng(0).normal(size=(5, 2)), [0, 1, 0, 0])
    assert np.array_equal(out.data, np.zeros((5, 2)))


def test_generate_deterministic_and_shaped():
    def run():
        g = ConditionalGenerator(3, 4)
        init_params(g.net, 42)
        return generate(g, [0.1, -0.2, 0.3], [0, 0, 0, 1]).data

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()
    assert a.shape == (1, 3)
    g = ConditionalGenerator(3, 4)
    init_params(g.net, 1)
    x = np.ones((2, 3))
    for k in range(4):
        assert g(x, [k, k]).shape == (2, 3)
    with pytest.raises(ShapeMismatch):
        g(np.ones((2, 2)), [0, 0])
    with pytest.raises(InvalidLabel):
        generate(g, x, [0, 1, 1, 0])


def test_identity_generator_is_exact():
    g = identity_generator(2, 4)
    x = np.random.default_rng(3).normal(size=(50, 2)) * 4
    for k in range(4):
        assert np.allclose(g(x, np.full(50, k)).data, x, atol=1e-12)


def test_init_same_seed():
    a, b = Mlp([3, 5, 2]), Mlp([3, 5, 2])
    init_params(a, 9)
    init_params(b, 9)
    assert a.flat().tobytes() == b.flat().tobytes()


def test_init_normal_std():
    m = Mlp([400, 250])
    init_params(m, 0, "normal")
    w = m.params[0].data
    assert w.size == 100000
    assert abs(w.std() - 0.02) <= 0.05 * 0.02
    assert np.all(m.params[1].data == 0.0)


def test_init_uniform_bounds():
    m = Mlp([7, 30, 12, 1])
    init_params(m, 5, "uniform-fan-in")
    for i in range(0, len(m.params), 2):
        bound = 1.0 / np.sqrt(m.params[i].shape[0])
        assert np.all(np.abs(m.params[i].data) <= bound)
        assert np.all(np.abs(m.params[i + 1].data) <= bound)
    with pytest.raises(ValueError):
        init_params(m, 0, "xavier")


def test_extractor_features_are_decomposed():
    ex = FeatureExtractor(2, 3)
    init_params(ex.net, 0)
    x = np.random.default_rng(1).normal(size=(6, 2))
    r, theta = ex.features(x)
    e = ex(x).data
    assert np.allclose(r.data[:, 0], np.linalg.norm(e, axis=1))
    assert np.allclose(r.data * theta.data, e, atol=1e-9)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    m = Mlp([2, 8, 3])
    init_params(m, 13)
    path = tmp_path / "m.bin"
    save_mlp(path, m)
    blob = path.read_bytes()
    # header written independently of the reader
    assert blob[:4] == b"MLAB"
    assert struct.unpack_from("<II3I", blob, 4) == (1, 3, 2, 8, 3)
    values = np.frombuffer(blob[24:], dtype="<f8")
    assert values.tobytes() == m.flat().astype("<f8").tobytes()
    loaded = load_mlp(path)
    assert loaded.flat().tobytes() == m.flat().tobytes()
    assert loaded.layer_dims == [2, 8, 3]
    dims, params = read_checkpoint(path)
    assert dims == [2, 8, 3] and params.size == m.parameter_count()


def test_checkpoint_errors(tmp_path):
    m = Mlp([2, 4, 1])
    path = tmp_path / "m.bin"
    save_mlp(path, m)
    blob = path.read_bytes()
    for name, data in {"magic": b"XXXX" + blob[4:], "short": blob[:-8],
                       "version": blob[:4] + struct.pack("<I", 2) + blob[8:],
                       "empty": b""}.items():
        bad = tmp_path / name
        bad.write_bytes(data)
        with pytest.raises(CheckpointFormatError):
            read_checkpoint(bad)
