import math

import numpy as np
import pytest

from semfl import tensor as T
from semfl.errors import DimensionError, IngestionError, ParameterError
from semfl.model import Architecture, ChannelSpec, SCModel, init_params, load_model, save_model, transmit

from conftest import central_diff, rel_err
from oracles import naive_ce, naive_conv, naive_matmul

SMALL = Architecture(image_shape=(1, 8, 8), conv_channels=(3, 4), semantic_dim=5, hidden_dim=6, num_classes=3)


def leaky(v, s):
    return np.where(v > 0, v, s * v)


def randomized(arch, seed):
    """Random weights and biases (init_params leaves biases at zero)."""
    p = init_params(arch, seed)
    return p.with_values(p.values + np.random.default_rng(seed + 1).normal(scale=0.1, size=len(p)))


def oracle_encode(arch, p, x):
    h = x
    for i in range(len(arch.conv_channels)):
        w, b = p.view(f"sem_enc.conv{i}.weight"), p.view(f"sem_enc.conv{i}.bias")
        h = leaky(naive_conv(h, w) + b[:, None, None], arch.act_slope)
    return naive_matmul(h.reshape(-1), p.view("chan_enc.weight"), p.view("chan_enc.bias")), h


def oracle_decode(arch, p, y):
    h = leaky(naive_matmul(y, p.view("chan_dec.weight"), p.view("chan_dec.bias")), arch.act_slope)
    return naive_matmul(h, p.view("sem_dec.weight"), p.view("sem_dec.bias"))


def test_default_architecture():
    arch = Architecture()
    assert arch.feature_shape == (16, 12, 12)
    assert arch.num_params == 38738
    assert len(init_params(arch, 0)) == arch.num_params


def test_architecture_invariants():
    with pytest.raises(ParameterError):
        Architecture(num_classes=1)
    with pytest.raises(ParameterError):
        Architecture(image_shape=(1, 4, 4), conv_channels=(2,), semantic_dim=16)
    with pytest.raises(DimensionError):
        Architecture(image_shape=(1, 4, 4), conv_channels=(2, 2, 2))


def test_channel_spec_validation():
    with pytest.raises(ParameterError):
        ChannelSpec(gain=0.0)
    with pytest.raises(ParameterError):
        ChannelSpec(noise_std=-0.1)


def test_encode_length(rng):
    model = SCModel(SMALL)
    p = randomized(SMALL, 0)
    Q, A = model.encode(rng.random((1, 8, 8)), p)
    assert Q.shape == (5,)
    assert A.shape == SMALL.feature_shape


def test_encode_zero_input_zero_bias():
    model = SCModel(SMALL)
    Q, _ = model.encode(np.zeros((1, 8, 8)), init_params(SMALL, 3))
    assert np.array_equal(Q.data, np.zeros(5))


def test_encode_matches_composed_oracle(rng):
    model = SCModel(SMALL)
    p = randomized(SMALL, 7)
    x = rng.random((1, 8, 8))
    Q, A = model.encode(x, p)
    q_ref, a_ref = oracle_encode(SMALL, p, x)
    assert rel_err(Q.data, q_ref) < 1e-12
    assert rel_err(A.data, a_ref) < 1e-12


def test_encode_rejects_wrong_shape():
    with pytest.raises(DimensionError):
        SCModel(SMALL).encode(np.zeros((1, 7, 8)), init_params(SMALL, 0))


def test_transmit_identity_and_scaling():
    X = np.array([2.0, 4.0])
    assert np.array_equal(transmit(X, ChannelSpec(1.0, 0.0), 0).data, X)
    assert np.array_equal(transmit(X, ChannelSpec(0.5, 0.0), 0).data, [1.0, 2.0])


def test_transmit_noise_std_monte_carlo():
    Y = transmit(np.zeros(100_000), ChannelSpec(1.0, 0.1), 11).data
    assert abs(Y.std() - 0.1) / 0.1 < 0.03


def test_transmit_deterministic_and_noise_constant_in_backward(rng):
    X = rng.normal(size=4)
    chan = ChannelSpec(0.7, 0.3)
    assert np.array_equal(transmit(X, chan, 5).data, transmit(X, chan, 5).data)
    tape = T.Tape()
    xv = tape.variable(X)
    g = tape.grad_of(transmit(xv, chan, 5).sum(), xv)
    assert np.allclose(g, 0.7, rtol=0, atol=1e-15)


def test_decode_shape_zero_and_oracle(rng):
    model = SCModel(SMALL)
    p0 = init_params(SMALL, 0)
    assert model.decode(rng.normal(size=5), p0).shape == (3,)
    assert np.array_equal(model.decode(np.zeros(5), p0).data, np.zeros(3))
    p = randomized(SMALL, 4)
    y = rng.normal(size=5)
    assert rel_err(model.decode(y, p).data, oracle_decode(SMALL, p, y)) < 1e-12
    with pytest.raises(DimensionError):
        model.decode(np.zeros(4), p)


def test_forward_loss_matches_composition(rng):
    model = SCModel(SMALL)
    p = randomized(SMALL, 9)
    x = rng.random((1, 8, 8))
    chan = ChannelSpec(0.8, 0.2)
    q, _ = oracle_encode(SMALL, p, x)
    y = 0.8 * q + np.random.default_rng(21).normal(size=5) * 0.2
    ref = naive_ce(oracle_decode(SMALL, p, y), 2)
    assert rel_err(model.forward_loss(x, 2, p, chan, 21), ref) < 1e-12


def test_forward_loss_uniform_and_saturated():
    arch = Architecture(image_shape=(1, 8, 8), conv_channels=(2,), semantic_dim=3, hidden_dim=4)
    model = SCModel(arch)
    p = init_params(arch, 0)
    zero_head = p.values.copy()
    start = p.offsets["sem_dec.weight"][0]
    zero_head[start:] = 0.0
    sym = p.with_values(zero_head)
    assert model.forward_loss(np.ones((1, 8, 8)), 0, sym, ChannelSpec(), 0) == pytest.approx(math.log(2), abs=1e-12)
    big = zero_head.copy()
    b0, b1, _ = p.offsets["sem_dec.bias"]
    big[b0:b1] = [1000.0, 0.0]
    assert model.forward_loss(np.ones((1, 8, 8)), 0, p.with_values(big), ChannelSpec(), 0) < 1e-12


def test_noiseless_channel_equals_direct_network(rng):
    model = SCModel(SMALL)
    p = randomized(SMALL, 2)
    x = rng.random((1, 8, 8))
    logits, Q, _ = model.forward(x, p, ChannelSpec(1.0, 0.0), 0)
    assert np.array_equal(logits.data, model.decode(Q.data, p).data)


def test_forward_deterministic(rng):
    model = SCModel(SMALL)
    p = randomized(SMALL, 2)
    x = rng.random((4, 1, 8, 8))
    chan = ChannelSpec(1.0, 0.5)
    a = model.logits(x, p, chan, 3)
    b = model.logits(x, p, chan, 3)
    assert a.tobytes() == b.tobytes()


def test_loss_gradient_fd(rng):
    arch = Architecture(image_shape=(1, 6, 6), conv_channels=(2, 2), semantic_dim=3, hidden_dim=4)
    model = SCModel(arch)
    p = randomized(arch, 1)
    x, y = rng.random((3, 1, 6, 6)), np.array([0, 1, 1])
    chan = ChannelSpec(0.9, 0.1)
    _, grad = model.loss_and_grad(p, x, y, chan, np.random.default_rng(4))

    def f(v):
        tape_free, _, _ = model.forward(x, p.with_values(v), chan, np.random.default_rng(4))
        return float(T.softmax_cross_entropy(tape_free, y).data)

    assert rel_err(grad, central_diff(f, p.values)) < 1e-6


def test_per_sample_grads_and_squared_sum(rng):
    model = SCModel(SMALL)
    p = randomized(SMALL, 5)
    x, y = rng.random((4, 1, 8, 8)), np.array([0, 1, 2, 1])
    chan = ChannelSpec(1.0, 0.0)
    per = model.per_sample_grads(p, x, y, chan, np.random.default_rng(0))
    sq = model.squared_grad_sum(p, x, y, chan, np.random.default_rng(0))
    for i in range(4):
        _, g = model.loss_and_grad(p, x[i:i + 1], y[i:i + 1], chan, np.random.default_rng(0))
        assert rel_err(per[i], g) < 1e-12
    assert rel_err(sq, np.square(per).sum(axis=0)) < 1e-12


def test_batched_evaluation_independent_of_chunking(rng):
    import semfl.model as M
    model = SCModel(SMALL)
    p = randomized(SMALL, 5)
    x = rng.random((10, 1, 8, 8))
    chan = ChannelSpec(1.0, 0.3)
    ref = model.logits(x, p, chan, 8)
    old = M.EVAL_CHUNK
    try:
        M.EVAL_CHUNK = 3
        chunked = model.logits(x, p, chan, 8)
    finally:
        M.EVAL_CHUNK = old
    assert rel_err(ref, chunked) < 1e-12


def test_save_load_round_trip(tmp_path):
    p = randomized(SMALL, 6)
    save_model(tmp_path / "m.scm", p, SMALL)
    q, arch = load_model(tmp_path / "m.scm")
    assert arch == SMALL
    assert q.manifest == p.manifest
    assert np.array_equal(q.values, p.values.astype(np.float32).astype(np.float64))
    save_model(tmp_path / "m2.scm", q, arch)
    assert (tmp_path / "m.scm").read_bytes() == (tmp_path / "m2.scm").read_bytes()


def test_save_format_header(tmp_path):
    p = init_params(SMALL, 0)
    save_model(tmp_path / "m.scm", p, SMALL)
    blob = (tmp_path / "m.scm").read_bytes()
    head, body = blob.split(b"\n\n", 1)
    lines = head.decode().splitlines()
    assert lines[1] == "sem_enc.conv0.weight 3,1,3,3"
    assert len(body) == 4 * len(p)
    assert np.array_equal(np.frombuffer(body, "<f4"), p.values.astype("<f4"))


def test_load_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.scm"
    bad.write_bytes(b"no header terminator")
    with pytest.raises(IngestionError):
        load_model(bad)
    p = init_params(SMALL, 0)
    save_model(tmp_path / "t.scm", p, SMALL)
    (tmp_path / "t.scm").write_bytes((tmp_path / "t.scm").read_bytes()[:-4])
    with pytest.raises(IngestionError):
        load_model(tmp_path / "t.scm")
