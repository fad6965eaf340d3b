import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import scalar_routing
from vigicaps.autodiff import Tape, Tensor, grad_check_params, ops
from vigicaps.checkpoint import Checkpoint, load_checkpoint, read_sections, save_checkpoint
from vigicaps.errors import FormatError, InvalidConfig, ShapeMismatch
from vigicaps.model import (ModelConfig, ModelParams, RoutingState, clip_predictions,
                            dynamic_routing, dynamic_routing_reference, forward, lower_capsules,
                            lstm_cell, lstm_layer, lstm_layer_reference, lstm_stack, predict,
                            regression_head)
from vigicaps.training import Standardizer, TrainConfig

TINY = ModelConfig(input_dim=12, hidden_units=16, grid=(4, 4), cells=6, capsule_channels=2,
                   capsule_dim=3, higher_capsules=2, higher_dim=4)


def zeros(*shape):
    return Tensor(np.zeros(shape))


def test_config_validation():
    assert ModelConfig().n_lower == 980
    assert ModelConfig(hidden_units=16, grid=(4, 4), cells=3, capsule_channels=1).n_lower == 4
    with pytest.raises(InvalidConfig):
        ModelConfig(cells=14)
    with pytest.raises(InvalidConfig):
        ModelConfig(grid=(16, 15))
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_lstm_cell_zero_weights_halves_cell():
    M, D = 4, 3
    c_prev = np.array([[0.8, -2.0, 0.0, 5.0]])
    h, c = lstm_cell(np.ones((1, D)), np.ones((1, M)), c_prev, zeros(D, 4 * M), zeros(M, 4 * M),
                     zeros(4 * M))
    assert np.array_equal(c.data, 0.5 * c_prev)
    assert np.allclose(h.data, 0.5 * np.tanh(0.5 * c_prev))
    h0, c0 = lstm_cell(np.ones((1, D)), np.ones((1, M)), np.zeros((1, M)), zeros(D, 4 * M),
                       zeros(M, 4 * M), zeros(4 * M))
    assert not np.any(h0.data) and not np.any(c0.data)


def test_lstm_cell_saturated_gates():
    M, D = 3, 2
    rng = np.random.default_rng(0)
    c_prev = rng.standard_normal((2, M))
    b = np.zeros(4 * M)
    b[:M], b[M:2 * M] = -20.0, 20.0
    _, c = lstm_cell(rng.standard_normal((2, D)), np.zeros((2, M)), c_prev, zeros(D, 4 * M),
                     zeros(M, 4 * M), Tensor(b))
    assert np.allclose(c.data, c_prev, atol=1e-6)
    _, c = lstm_cell(rng.standard_normal((2, D)), np.zeros((2, M)), np.zeros((2, M)),
                     zeros(D, 4 * M), zeros(M, 4 * M), Tensor(b))
    assert np.allclose(c.data, 0.0, atol=1e-8)
    with pytest.raises(ShapeMismatch):
        lstm_cell(np.zeros((1, D + 1)), np.zeros((1, M)), np.zeros((1, M)), zeros(D, 4 * M),
                  zeros(M, 4 * M), zeros(4 * M))


def test_fused_lstm_layer_matches_reference():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((3, 5, 4)), requires_grad=True)
    Wx = Tensor(rng.standard_normal((4, 12)) * 0.5, requires_grad=True)
    Wh = Tensor(rng.standard_normal((3, 12)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(12), requires_grad=True)
    w = rng.standard_normal((3, 5, 3))
    grads = []
    for layer in (lstm_layer, lstm_layer_reference):
        for p in (x, Wx, Wh, b):
            p.grad = None
        out = layer(x, Wx, Wh, b)
        ops.sum(out * w).backward()
        grads.append([out.data] + [p.grad.copy() for p in (x, Wx, Wh, b)])
    for a, r in zip(*grads):
        assert np.allclose(a, r, atol=1e-12)
    assert grad_check_params(lambda: ops.sum(lstm_layer(x, Wx, Wh, b) * w), [x, Wx, Wh, b]) < 1e-6


def test_lstm_stack_shapes_and_order():
    cfg = ModelConfig(input_dim=20)
    params = ModelParams.init(cfg, np.random.default_rng(2))
    x = np.random.default_rng(3).standard_normal((2, 15, 20))
    out = lstm_stack(Tensor(x), params.constants(), training=False)
    assert out.shape == (2, 15, 256)
    rev = lstm_stack(Tensor(x[:, ::-1]), params.constants(), training=False)
    assert not np.allclose(out.data, rev.data[:, ::-1])
    for t in params.tensors.values():
        t.data[...] = 0.0
    assert not np.any(lstm_stack(Tensor(np.zeros((1, 15, 20))), params, False).data)


def test_lower_capsules_counts_and_zero():
    cfg = ModelConfig(hidden_units=16, grid=(4, 4), cells=3, capsule_channels=1)
    params = ModelParams.init(cfg, np.random.default_rng(0))
    u = lower_capsules(Tensor(np.random.default_rng(1).standard_normal((2, 3, 16))),
                       params["caps.kernel"], params["caps.bias"], cfg)
    assert u.shape == (2, 4, 3)
    full = ModelConfig()
    p = ModelParams.init(full, np.random.default_rng(0))
    u0 = lower_capsules(Tensor(np.zeros((1, 15, 256))), p["caps.kernel"], p["caps.bias"], full)
    assert u0.shape == (1, 980, 3) and not np.any(u0.data)


def test_lower_capsule_wiring():
    """Capsule (channel k, position) is the d-vector of channel k's conv at that position."""
    cfg = ModelConfig(hidden_units=16, grid=(4, 4), cells=6, capsule_channels=2)
    rng = np.random.default_rng(4)
    h = rng.standard_normal((1, 6, 16))
    kern = rng.standard_normal((6, 3, 3, 3))
    bias = rng.standard_normal(6)
    u = lower_capsules(Tensor(h), Tensor(kern), Tensor(bias), cfg).data
    maps = h.reshape(6, 4, 4)
    k, r, c = 1, 1, 0
    s = np.array([np.sum(maps[3 * k:3 * k + 3, r:r + 3, c:c + 3] * kern[3 * k + m]) + bias[3 * k + m]
                  for m in range(3)])
    idx = k * 4 + r * 2 + c
    assert np.allclose(u[0, idx], ops.squash_forward(s), atol=1e-12)


def _routing_inputs(seed, B=2, N=5, K=3, d=3, H=4):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.standard_normal((B, N, d)), requires_grad=True),
            Tensor(rng.standard_normal((N, K, d, H)), requires_grad=True))


def test_routing_single_higher_capsule():
    u, W = _routing_inputs(0, K=1)
    state = RoutingState()
    v = dynamic_routing(u, W, 3, state=state)
    assert all(np.array_equal(c, np.ones_like(c)) for c in state.couplings)
    uh = np.einsum("bnd,nkdh->bkh", u.data, W.data)
    assert np.allclose(v.data, ops.squash_forward(uh), atol=1e-12)


def test_routing_one_iteration_uniform():
    u, W = _routing_inputs(1, K=4)
    state = RoutingState()
    v = dynamic_routing(u, W, 1, state=state)
    assert np.all(state.couplings[0] == 0.25)
    s = np.einsum("bnd,nkdh->bkh", u.data, W.data) / 4
    assert np.allclose(state.s, s, atol=1e-12) and np.allclose(v.data, ops.squash_forward(s))


def test_routing_scalar_oracle_two_by_two():
    u = np.array([[0.5, -1.0], [1.5, 0.25]])
    W = np.array([[[[1.0, 0.5], [-0.5, 2.0]], [[0.2, -1.0], [1.0, 0.0]]],
                  [[[0.0, 1.0], [1.0, 1.0]], [[-2.0, 0.5], [0.3, -0.7]]]])
    v = dynamic_routing(Tensor(u[None]), Tensor(W), 2).data[0]
    assert np.allclose(v, scalar_routing(u.tolist(), W.tolist(), 2), atol=1e-12, rtol=0)


@pytest.mark.parametrize("iters", [1, 2, 3])
@pytest.mark.parametrize("route_gradients", [True, False])
def test_fused_routing_matches_reference(iters, route_gradients):
    u, W = _routing_inputs(2)
    w = np.random.default_rng(5).standard_normal((2, 3, 4))
    ops.sum(dynamic_routing(u, W, iters, route_gradients) * w).backward()
    got = [u.grad.copy(), W.grad.copy()]
    u.grad = W.grad = None
    ref = dynamic_routing_reference(u, W, iters)
    assert np.allclose(ref.data, dynamic_routing(u, W, iters).data, atol=1e-13)
    if route_gradients:
        ops.sum(ref * w).backward()
        assert np.allclose(got[0], u.grad, atol=1e-12) and np.allclose(got[1], W.grad, atol=1e-12)
    u.grad = W.grad = None
    err = grad_check_params(lambda: ops.sum(dynamic_routing(u, W, iters, route_gradients) * w),
                            [u, W])
    if route_gradients:
        assert err < 1e-6
    else:
        assert iters == 1 or err > 1e-6  # stopped gradients are not the true derivative


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.permutations(range(4)))
def test_routing_permutation_equivariant(seed, perm):
    u, W = _routing_inputs(seed, K=4)
    v = dynamic_routing(u, W, 3).data
    vp = dynamic_routing(u, Tensor(W.data[:, list(perm)]), 3).data
    assert np.allclose(vp, v[:, list(perm)], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_routing_norms_below_one(seed, scale):
    u, W = _routing_inputs(seed)
    v = dynamic_routing(Tensor(u.data * scale), W, 3).data
    assert np.all(np.linalg.norm(v, axis=-1) < 1)


def test_regression_head():
    v = Tensor(np.random.default_rng(0).standard_normal((3, 10, 16)))
    assert not np.any(regression_head(v, zeros(160, 1), zeros(1)).data)
    assert np.all(np.abs(regression_head(v, zeros(160, 1), Tensor([20.0])).data - 1) <= 1e-8)
    big = Tensor(np.random.default_rng(1).standard_normal((160, 1)) * 1e3)
    assert np.all(np.abs(regression_head(v, big, zeros(1)).data) <= 1)
    with pytest.raises(ShapeMismatch):
        regression_head(v, zeros(150, 1), zeros(1))


def test_forward_eval_deterministic_and_embeddings():
    params = ModelParams.init(TINY, np.random.default_rng(0))
    X = np.random.default_rng(1).standard_normal((5, 6, 12))
    emb = {}
    a = predict(params, X, embeddings=emb)
    assert np.array_equal(a, predict(params, X)) and a.shape == (5,)
    # batch size changes BLAS blocking, so only rounding-level agreement is expected
    assert np.allclose(a, predict(params, X, batch_size=2), rtol=0, atol=1e-12)
    assert emb["u"].shape == (5, 8, 3) and emb["v"].shape == (5, 2, 4)
    assert np.all((clip_predictions(a) >= 0) & (clip_predictions(a) <= 1))


def test_training_forward_updates_batchnorm_only_in_training():
    params = ModelParams.init(TINY, np.random.default_rng(0))
    X = np.random.default_rng(1).standard_normal((4, 6, 12))
    forward(X, params, training=False)
    assert params.bn["bn0"].steps == 0
    forward(X, params, training=True, tape=Tape())
    assert params.bn["bn0"].steps == 1


def test_full_tiny_model_gradients():
    params = ModelParams.init(TINY, np.random.default_rng(0))
    X = np.random.default_rng(1).standard_normal((3, 6, 12))
    y = np.array([0.1, 0.5, 0.9])
    picked = [params["lstm0.Wh"], params["route.W"], params["caps.kernel"], params["bn1.gamma"]]

    def loss():
        d = forward(X, params, training=True) - y
        return ops.mean(d * d)
    assert grad_check_params(loss, picked) < 1e-6


def test_checkpoint_roundtrip(tmp_path):
    params = ModelParams.init(TINY, np.random.default_rng(0))
    X = np.random.default_rng(1).standard_normal((4, 6, 12))
    forward(X, params, training=True)
    std = Standardizer(np.arange(12.0), np.full(12, 2.0))
    ids = [("P01", 3), ("P01", 4), ("P01", 5), ("P02", 0)]
    path, cfg = save_checkpoint(tmp_path / "f.bin", Checkpoint(params, std, TrainConfig(), "P01/1",
                                                               "eeg", ids))
    back = load_checkpoint(path)
    assert back.params.config == TINY and back.fold == "P01/1" and back.modality == "eeg"
    assert back.test_ids == ids
    assert np.array_equal(predict(back.params, X), predict(params, X))
    assert np.array_equal(back.standardizer.mean, std.mean)
    raw = path.read_bytes()
    assert raw[:8] == b"VGCAPSCK" and int.from_bytes(raw[8:12], "little") == 1
    assert "hidden_units = 16" in cfg.read_text()
    assert read_sections(path)["route.W"].shape == (8, 2, 3, 4)


def test_checkpoint_corruption_detected(tmp_path):
    params = ModelParams.init(TINY, np.random.default_rng(0))
    std = Standardizer(np.zeros(12), np.ones(12))
    path, _ = save_checkpoint(tmp_path / "f.bin", Checkpoint(params, std, TrainConfig()))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"garbage!")
    with pytest.raises(FormatError):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.bin")
