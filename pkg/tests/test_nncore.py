import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentrefine.errors import ConfigError, ContractError, DivergenceError
from latentrefine.nncore import (
    AdamState,
    Mlp,
    Param,
    Tape,
    adam_step,
    assign_params,
    bce_with_logits,
    load_params,
    save_params,
)

from oracles import adam_reference, finite_difference_grads, max_relative_error, mlp_forward_reference


def test_forward_zero_network_maps_to_zero():
    mlp = Mlp([2, 4, 2], np.random.default_rng(0))
    for p in mlp.parameters():
        p.value[:] = 0.0
    x = np.random.default_rng(1).standard_normal((5, 2))
    assert np.all(mlp.forward_array(x) == 0.0)


def test_forward_identity_single_layer():
    mlp = Mlp([2, 2], np.random.default_rng(0))
    mlp.weights[0].value[:] = np.eye(2)
    mlp.biases[0].value[:] = 0.0
    out = mlp.forward_array(np.array([[0.3, -0.7]]))
    np.testing.assert_allclose(out, [[0.3, -0.7]], atol=0)


def test_forward_matches_reference_oracle():
    rng = np.random.default_rng(42)
    mlp = Mlp([2, 16, 1], rng)
    x = rng.standard_normal((32, 2))
    expected = mlp_forward_reference(
        [w.value for w in mlp.weights], [b.value for b in mlp.biases], x
    )
    got = mlp.forward_array(x)
    assert np.abs(got - expected).max() < 1e-12

    tape = Tape()
    node = mlp.forward(tape, x)
    assert np.abs(node.value - expected).max() < 1e-12


def test_forward_shape_mismatch_is_config_error():
    mlp = Mlp([2, 4, 1], np.random.default_rng(0))
    with pytest.raises(ConfigError):
        mlp.forward_array(np.zeros((3, 5)))


def test_backward_square():
    tape = Tape()
    x = tape.leaf(np.array(3.0))
    loss = x * x
    tape.backward(loss)
    assert float(x.grad) == pytest.approx(6.0, abs=1e-12)


def test_backward_sigmoid_quarter():
    tape = Tape()
    x = tape.leaf(np.array(0.0))
    loss = x.sigmoid()
    tape.backward(loss)
    assert float(x.grad) == pytest.approx(0.25, abs=1e-12)


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ContractError):
        tape.backward(x * 2.0)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    mlp = Mlp([2, 8, 8, 1], rng)
    x = rng.standard_normal((16, 2))
    y = rng.standard_normal((16, 1))

    tape = Tape()
    out = mlp.forward(tape, x)
    diff = out - y
    loss = (diff * diff).mean()
    tape.backward(loss)
    grads = tape.grads_for(mlp.parameters())

    def loss_value():
        d = mlp.forward_array(x) - y
        return float((d * d).mean())

    fd = finite_difference_grads(loss_value, [p.value for p in mlp.parameters()])
    for got, expected in zip(grads, fd):
        assert max_relative_error(got, expected) < 1e-4


def test_leaky_relu_slope_used_in_backward():
    slope = 0.2
    mlp = Mlp([1, 1, 1], np.random.default_rng(0), hidden_slope=slope)
    mlp.weights[0].value[:] = 1.0
    mlp.weights[1].value[:] = 1.0
    x = np.array([[-2.0]])  # negative pre-activation

    tape = Tape()
    out = mlp.forward(tape, x)
    tape.backward(out.sum())
    grads = tape.grads_for(mlp.parameters())

    def value():
        return float(mlp.forward_array(x).sum())

    fd = finite_difference_grads(value, [p.value for p in mlp.parameters()])
    for got, expected in zip(grads, fd):
        assert max_relative_error(got, expected) < 1e-4
    # d out / d w0 = slope * x because the hidden unit is in the negative branch
    assert float(grads[0]) == pytest.approx(slope * -2.0, rel=1e-9)


_primitives = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "exp": lambda a, b: (a * 0.3).exp() + b,
    "log": lambda a, b: (a * a + 1.0).log() + b,
    "sigmoid": lambda a, b: a.sigmoid() * b,
    "softplus": lambda a, b: a.softplus() + b,
    "tanh": lambda a, b: a.tanh() * b,
    "leaky": lambda a, b: a.leaky_relu(0.1) + b,
    "matmul": lambda a, b: a @ b,
    "clip": lambda a, b: (a * 3.0).clip(-1.0, 1.0) + b,
}


@settings(max_examples=20, deadline=None)
@given(
    name=st.sampled_from(sorted(_primitives)),
    seed=st.integers(0, 2**31 - 1),
)
def test_primitive_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.2, 1.5, size=(3, 3))
    b = rng.uniform(0.2, 1.5, size=(3, 3))
    op = _primitives[name]

    tape = Tape()
    na, nb = tape.leaf(a.copy()), tape.leaf(b.copy())
    out = op(na, nb)
    loss = (out * out).sum()
    tape.backward(loss)

    arrays = [a.copy(), b.copy()]

    def value():
        t = Tape()
        v = op(t.leaf(arrays[0]), t.leaf(arrays[1]))
        return float((v * v).sum().value)

    fd = finite_difference_grads(value, arrays)
    assert max_relative_error(na.grad, fd[0]) < 1e-4
    if nb.grad is not None:
        assert max_relative_error(nb.grad, fd[1]) < 1e-4


def test_broadcast_bias_gradient():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 4))
    b = rng.standard_normal(4)
    tape = Tape()
    nb = tape.leaf(b.copy())
    out = tape.leaf(x) + nb
    tape.backward((out * out).sum())
    arrays = [b.copy()]

    def value():
        return float(((x + arrays[0]) ** 2).sum())

    fd = finite_difference_grads(value, arrays)
    assert max_relative_error(nb.grad, fd[0]) < 1e-4


def test_param_used_twice_accumulates():
    p = Param(np.array([2.0]))
    tape = Tape()
    n1 = tape.param(p)
    n2 = tape.param(p)
    loss = (n1 * n2).sum()  # loss = p^2, dloss/dp = 2p = 4
    tape.backward(loss)
    grad = tape.grads_for([p])[0]
    assert float(grad) == pytest.approx(4.0, abs=1e-12)


def test_bce_with_logits_matches_direct_formula():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((50, 1)) * 3
    labels = (rng.random((50, 1)) > 0.5).astype(float)
    tape = Tape()
    node = bce_with_logits(tape.leaf(logits), labels)
    p = 1.0 / (1.0 + np.exp(-logits))
    direct = -(labels * np.log(p) + (1 - labels) * np.log(1 - p)).mean()
    assert float(node.value) == pytest.approx(direct, rel=1e-12)


# -- Adam ---------------------------------------------------------------------


def test_adam_first_step_sign_update():
    for g0 in (5.0, -0.3, 1e-6):
        p = Param(np.array([1.0]))
        state = AdamState.for_params([p], alpha0=0.01)
        adam_step(state, [p], [np.array([g0])])
        assert float(p.value - 1.0) == pytest.approx(-0.01 * np.sign(g0), rel=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = Param(np.array([1.0, -2.0]))
    state = AdamState.for_params([p], alpha0=0.1)
    adam_step(state, [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_three_steps_match_scalar_recurrence():
    alpha, beta1, beta2, eps = 0.1, 0.9, 0.999, 1e-8
    p = Param(np.array([1.0]))
    state = AdamState.for_params([p], alpha0=alpha, beta1=beta1, beta2=beta2, eps=eps)
    for _ in range(3):
        adam_step(state, [p], [2.0 * p.value])  # grad of theta^2
    expected = adam_reference(1.0, lambda t: 2.0 * t, alpha, beta1, beta2, eps, 3)
    assert float(p.value) == pytest.approx(expected, abs=1e-10)


def test_adam_rejects_non_finite_gradient():
    p = Param(np.array([1.0]))
    state = AdamState.for_params([p])
    with pytest.raises(DivergenceError):
        adam_step(state, [p], [np.array([np.nan])])


def test_adam_lr_schedule_is_exponential_in_epochs():
    state = AdamState.for_params([Param(np.zeros(1))], alpha0=1e-3, gamma=0.9)
    for _ in range(5):
        state.end_epoch()
    assert state.effective_lr() == pytest.approx(1e-3 * 0.9**5, rel=1e-12)


def test_adam_decoupled_weight_decay_shrinks_params_without_gradient_path():
    p = Param(np.array([10.0]))
    state = AdamState.for_params([p], alpha0=0.1, weight_decay=0.5)
    adam_step(state, [p], [np.zeros(1)])
    # zero gradient: only the decay term acts
    assert float(p.value) == pytest.approx(10.0 - 0.1 * 0.5 * 10.0, rel=1e-12)


def test_training_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(123)
        mlp = Mlp([2, 8, 1], rng)
        state = AdamState.for_params(mlp.parameters(), alpha0=1e-2)
        x = rng.standard_normal((64, 2))
        y = rng.standard_normal((64, 1))
        for _ in range(5):
            tape = Tape()
            d = mlp.forward(tape, x) - y
            tape.backward((d * d).mean())
            adam_step(state, mlp.parameters(), tape.grads_for(mlp.parameters()))
        return [p.value.copy() for p in mlp.parameters()]

    a, b = run(), run()
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa, pb)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    mlp = Mlp([2, 6, 2], rng)
    path = tmp_path / "net.npz"
    save_params(path, mlp.parameters(), meta={"note": "roundtrip"})
    arrays, meta = load_params(path)
    assert meta == {"note": "roundtrip"}
    other = Mlp([2, 6, 2], np.random.default_rng(99))
    assign_params(other.parameters(), arrays)
    x = rng.standard_normal((4, 2))
    np.testing.assert_array_equal(mlp.forward_array(x), other.forward_array(x))


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    mlp = Mlp([2, 6, 2], np.random.default_rng(0))
    path = tmp_path / "net.npz"
    save_params(path, mlp.parameters())
    arrays, _ = load_params(path)
    wrong = Mlp([2, 7, 2], np.random.default_rng(0))
    with pytest.raises(ConfigError):
        assign_params(wrong.parameters(), arrays)


def test_mlp_parameter_count():
    mlp = Mlp([2, 48, 48, 48, 2], np.random.default_rng(0))
    expected = (2 * 48 + 48) + 2 * (48 * 48 + 48) + (48 * 2 + 2)
    assert mlp.n_parameters() == expected
