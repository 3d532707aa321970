from __future__ import annotations

import numpy as np
import pytest

from oscar_sim.numerics import (
    AdamState,
    MlpSpec,
    NumericsError,
    RngStream,
    Tensor,
    adam_init,
    adam_step,
    concat,
    forward_backward,
    init_params,
    logprob_input_grad,
    mlp_forward,
    param_count,
    param_digest,
    softmax_cross_entropy,
)

# ---------------------------------------------------------------------------
# finite-difference oracle, kept independent of the tape


def _loss_value(spec: MlpSpec, params: dict, inputs: np.ndarray, targets: np.ndarray) -> float:
    out = mlp_forward(spec, params, inputs)
    if spec.head == "mse":
        return float(np.mean((out - targets) ** 2))
    zmax = out.max(axis=1, keepdims=True)
    logp = (out - zmax) - np.log(np.exp(out - zmax).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(out.shape[0]), targets].mean())


def _fd_grad(spec, params, inputs, targets, name, h=1e-4):
    grad = np.zeros_like(params[name])
    flat = grad.reshape(-1)
    for i in range(flat.size):
        bumped = {k: v.copy() for k, v in params.items()}
        bumped[name].reshape(-1)[i] += h
        up = _loss_value(spec, bumped, inputs, targets)
        bumped[name].reshape(-1)[i] -= 2 * h
        down = _loss_value(spec, bumped, inputs, targets)
        flat[i] = (up - down) / (2 * h)
    return grad


def _random_net(stream: RngStream, spec: MlpSpec) -> dict:
    # full-rank random params in float64, including the output layer
    params = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        params[f"w{i}"] = stream.normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
        params[f"b{i}"] = stream.normal((fan_out,)) * 0.1
    return params


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def test_gradients_match_finite_differences_two_layer_net():
    stream = RngStream(11, "gradcheck")
    spec = MlpSpec(in_dim=5, hidden=(7,), out_dim=3, head="mse")
    params = _random_net(stream, spec)
    inputs = stream.normal((4, 5))
    targets = stream.normal((4, 3))
    _, grads = forward_backward(spec, params, inputs, targets)
    for name in params:
        fd = _fd_grad(spec, params, inputs, targets, name)
        assert _relative_error(grads[name], fd) < 1e-4


def test_gradients_match_finite_differences_softmax_head():
    stream = RngStream(12, "gradcheck-ce")
    spec = MlpSpec(in_dim=6, hidden=(8, 5), out_dim=4, head="softmax_ce")
    params = _random_net(stream, spec)
    inputs = stream.normal((5, 6))
    labels = stream.integers(0, 4, 5)
    _, grads = forward_backward(spec, params, inputs, labels)
    for name in params:
        fd = _fd_grad(spec, params, inputs, labels, name)
        assert _relative_error(grads[name], fd) < 1e-4


def test_input_gradient_matches_finite_differences():
    stream = RngStream(13, "gradcheck-input")
    spec = MlpSpec(in_dim=4, hidden=(6,), out_dim=3, head="softmax_ce")
    params = _random_net(stream, spec)
    inputs = stream.normal((3, 4))
    labels = np.array([0, 2, 1])
    grad = logprob_input_grad(spec, params, inputs, labels)

    def logp_sum(x):
        out = mlp_forward(spec, params, x)
        zmax = out.max(axis=1, keepdims=True)
        logp = (out - zmax) - np.log(np.exp(out - zmax).sum(axis=1, keepdims=True))
        return float(logp[np.arange(3), labels].sum())

    h = 1e-4
    fd = np.zeros_like(inputs)
    for i in range(inputs.size):
        bumped = inputs.copy()
        bumped.reshape(-1)[i] += h
        up = logp_sum(bumped)
        bumped.reshape(-1)[i] -= 2 * h
        down = logp_sum(bumped)
        fd.reshape(-1)[i] = (up - down) / (2 * h)
    assert _relative_error(grad, fd) < 1e-4


def test_concat_gradient_routes_to_both_parts():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.full((2, 2), 2.0), requires_grad=True)
    w = Tensor(np.arange(10.0).reshape(5, 2))
    out = concat([a, b]).matmul(w).sum()
    out.backward()
    expected = w.data.sum(axis=1)
    assert np.allclose(a.grad, np.tile(expected[:3], (2, 1)))
    assert np.allclose(b.grad, np.tile(expected[3:], (2, 1)))


def test_scalar_square_loss_and_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    loss = x * x
    loss.backward()
    assert float(loss.data) == pytest.approx(9.0)
    assert float(x.grad) == pytest.approx(6.0)


def test_mse_at_exact_targets_is_zero_with_zero_gradients():
    stream = RngStream(14, "zero-mse")
    spec = MlpSpec(in_dim=3, hidden=(4,), out_dim=2, head="mse")
    params = _random_net(stream, spec)
    inputs = stream.normal((6, 3))
    targets = mlp_forward(spec, params, inputs)
    loss, grads = forward_backward(spec, params, inputs, targets)
    assert loss == 0.0
    for g in grads.values():
        assert np.all(g == 0.0)


def test_float32_networks_produce_float32_gradients():
    stream = RngStream(15, "dtype")
    spec = MlpSpec(in_dim=3, hidden=(4,), out_dim=2)
    params = init_params(spec, stream, dtype=np.float32)
    inputs = stream.normal((5, 3)).astype(np.float32)
    targets = stream.normal((5, 2)).astype(np.float32)
    loss, grads = forward_backward(spec, params, inputs, targets)
    assert all(g.dtype == np.float32 for g in grads.values())
    assert isinstance(loss, float)


def test_non_finite_forward_is_reported_with_layer_name():
    spec = MlpSpec(in_dim=2, hidden=(2,), out_dim=1)
    params = {
        "w0": np.array([[np.inf, 0.0], [0.0, 1.0]]),
        "b0": np.zeros(2),
        "w1": np.zeros((2, 1)),
        "b1": np.zeros(1),
    }
    with pytest.raises(NumericsError, match="dense0"):
        forward_backward(spec, params, np.ones((1, 2)), np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# Adam


def test_adam_three_steps_match_hand_computed_recurrence():
    # f(x) = (x - 5)^2 from x0 = 0, gradient 2(x - 5)
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x = 0.0
    m = v = 0.0
    expected = []
    for t in range(1, 4):
        g = 2.0 * (x - 5.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        expected.append(x)

    params = {"x": np.array([0.0])}
    state = adam_init(params)
    got = []
    for _ in range(3):
        g = {"x": 2.0 * (params["x"] - 5.0)}
        params, state = adam_step(params, g, state, lr=lr, beta1=b1, beta2=b2, eps=eps)
        got.append(float(params["x"][0]))
    assert got == pytest.approx(expected, abs=1e-6)


def test_adam_first_step_magnitude():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.3, -0.7, 2.0])}
    params2, _ = adam_step(params, grads, adam_init(params), lr=1e-3)
    delta = params2["w"] - params["w"]
    expected = -1e-3 * grads["w"] / (np.abs(grads["w"]) + 1e-8)
    assert delta == pytest.approx(expected, rel=1e-6)


def test_adam_first_step_is_invariant_to_gradient_scale():
    params = {"w": np.array([0.2, -0.4])}
    grads = {"w": np.array([0.25, -1.5])}
    base, _ = adam_step(params, grads, adam_init(params), lr=1e-3)
    scaled, _ = adam_step(params, {"w": grads["w"] * 100.0}, adam_init(params), lr=1e-3)
    d1 = base["w"] - params["w"]
    d2 = scaled["w"] - params["w"]
    assert np.sign(d1) == pytest.approx(np.sign(d2))
    assert d2 == pytest.approx(d1, rel=1e-4)


def test_adam_does_not_mutate_inputs():
    params = {"w": np.array([1.0])}
    grads = {"w": np.array([2.0])}
    state = adam_init(params)
    adam_step(params, grads, state)
    assert params["w"][0] == 1.0
    assert state.t == 0
    assert state.m["w"][0] == 0.0


def test_adam_rejects_mismatched_names():
    params = {"w": np.zeros(2)}
    with pytest.raises(NumericsError):
        adam_step(params, {"q": np.zeros(2)}, adam_init(params))


# ---------------------------------------------------------------------------
# RNG


def test_same_seed_and_label_give_identical_sequences():
    a = RngStream(42, "train").normal(64)
    b = RngStream(42, "train").normal(64)
    assert np.array_equal(a, b)


def test_different_labels_diverge():
    a = RngStream(42, "a").normal(64)
    b = RngStream(42, "b").normal(64)
    assert not np.array_equal(a, b)


def test_stream_is_pure_function_of_counter():
    s = RngStream(7, "x")
    first = s.uniform(10)
    s2 = RngStream(7, "x")
    s2.uniform(4)
    assert np.array_equal(s2.uniform(6), first[4:])


def test_advancing_counter_changes_values():
    s = RngStream(7, "x")
    v1 = s.uniform()
    v2 = s.uniform()
    assert v1 != v2


def test_normal_moments_over_1e5_draws():
    z = RngStream(123, "moments").normal(100_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.02


def test_uniform_bounds_and_integers_range():
    s = RngStream(5, "u")
    u = s.uniform(10_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    ints = s.integers(3, 9, 10_000)
    assert ints.min() == 3 and ints.max() == 8


def test_permutation_is_a_permutation():
    s = RngStream(5, "perm")
    p = s.permutation(50)
    assert np.array_equal(np.sort(p), np.arange(50))


# ---------------------------------------------------------------------------
# init and determinism


def test_init_variance_and_zero_output_head():
    stream = RngStream(99, "init")
    spec = MlpSpec(in_dim=256, hidden=(512, 512), out_dim=128)
    params = init_params(spec, stream)
    for i, (fan_in, _) in enumerate(spec.layer_dims()[:-1]):
        var = params[f"w{i}"].astype(np.float64).var()
        assert var == pytest.approx(2.0 / fan_in, rel=0.2)
        assert np.all(params[f"b{i}"] == 0)
    assert np.all(params["w2"] == 0)
    assert np.all(params["b2"] == 0)


def test_param_count_for_classifier_shape():
    spec = MlpSpec(in_dim=256, hidden=(128, 64), out_dim=8, head="softmax_ce")
    params = init_params(spec, RngStream(1, "count"))
    assert param_count(params) == 256 * 128 + 128 + 128 * 64 + 64 + 64 * 8 + 8


def test_training_is_bitwise_deterministic():
    def run() -> str:
        stream = RngStream(2024, "det/init")
        data_stream = RngStream(2024, "det/data")
        spec = MlpSpec(in_dim=8, hidden=(16,), out_dim=4)
        params = init_params(spec, stream)
        state = adam_init(params)
        for _ in range(20):
            x = data_stream.normal((16, 8)).astype(np.float32)
            y = data_stream.normal((16, 4)).astype(np.float32)
            _, grads = forward_backward(spec, params, x, y)
            params, state = adam_step(params, grads, state)
        return param_digest(params)

    assert run() == run()
