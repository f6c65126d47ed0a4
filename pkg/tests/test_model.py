import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from plugfed.dataset import Dataset, concat, make_separable
from plugfed.model import (
    Backend,
    Curvature,
    Hyperparams,
    ModelParams,
    NewtonSolveError,
    ce_gradient,
    ce_hessian,
    ce_loss,
    damped_solve,
    forward,
    init_params,
    load_params,
    logits,
    newton_step,
    param_count,
    predict,
    predict_batch,
    predict_proba,
    save_params,
    soft_ce_gradient,
    soft_ce_loss,
    softmax,
    train,
    train_ce,
    zero_params,
)

SR = Backend.SOFTMAX_REG
TC = Backend.TINY_CONV


def toy(n=12, m=3, c=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, m)), rng.integers(0, c, size=n), tuple(f"c{i}" for i in range(c)))


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    assert np.allclose(softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)


def test_softmax_log_two():
    assert np.allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_shift_invariance():
    z = np.array([0.3, -1.2, 2.0])
    assert np.allclose(softmax(z), softmax(z + 100), atol=1e-15)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax([0.0, np.inf])


@given(st.lists(st.floats(-700, 700), min_size=1, max_size=8))
def test_softmax_matches_direct_evaluation(z):
    p = softmax(z)
    assert abs(p.sum() - 1) < 1e-9
    assert np.allclose(p, oracles.softmax_rows([z])[0], atol=1e-12)


# ---------------------------------------------------------------- params


def test_param_counts():
    assert param_count(SR, 3, 8) == 27
    k = 128
    assert param_count(TC, 3, 8) == 2 * k + 2 * (k * k + k) + 8 * k * 3 + 3
    assert param_count(TC, 3, 100, head="gap") == 2 * k + 2 * (k * k + k) + k * 3 + 3


def test_params_validate_layout_and_values():
    with pytest.raises(ValueError):
        ModelParams(SR, np.zeros(5), 2, 3)
    with pytest.raises(ValueError):
        ModelParams(SR, np.array([np.nan] * 8), 2, 3)


def test_init_is_seeded_and_bounded():
    a = init_params(SR, 4, 10, seed=3)
    assert np.array_equal(a.weights, init_params(SR, 4, 10, seed=3).weights)
    assert np.all(np.abs(a.weights) <= 0.05)
    assert init_params(TC, 2, 80, channels=4).head == "gap"
    assert init_params(TC, 2, 64, channels=4).head == "flatten"


# ---------------------------------------------------------------- forward / predict


@pytest.mark.parametrize("backend", [SR, TC])
def test_zero_weights_give_uniform_output(backend):
    p = zero_params(backend, 4, 5, channels=4)
    assert np.allclose(forward(p, np.arange(5.0)), 0.25, atol=1e-15)


def test_large_row_selects_class():
    c, m, j = 3, 4, 2
    w = np.zeros((c, m + 1))
    w[1, j] = 50.0
    x = np.zeros(m)
    x[j] = 1.0
    assert forward(ModelParams(SR, w.ravel(), c, m), x)[1] > 1 - 1e-12


def test_forward_length_mismatch():
    with pytest.raises(ValueError):
        forward(zero_params(SR, 2, 3), np.zeros(4))


def test_predict_argmax_and_tie_rule():
    w = np.zeros((3, 2))
    w[:, 1] = np.log([0.1, 0.7, 0.2])
    p = ModelParams(SR, w.ravel(), 3, 1)
    assert predict(p, [0.0]) == 1
    assert predict(zero_params(SR, 3, 1), [5.0]) == 0


@pytest.mark.parametrize("backend", [SR, TC])
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_forward_is_a_distribution_and_predict_is_shift_invariant(backend, seed, shift):
    c, m = 3, 5
    p = init_params(backend, c, m, seed=seed, channels=4, scale=1.0)
    x = np.random.default_rng(seed).normal(size=(6, m)) * 10
    probs = predict_proba(p, x)
    assert np.all(probs > 0)
    assert np.allclose(probs.sum(axis=1), 1, atol=1e-9)
    z = logits(p, x)
    assert (np.argmax(z + shift, axis=1) == predict_batch(p, x)).all()
    assert (np.argmax(np.tanh(z / 100), axis=1) == predict_batch(p, x)).all()


# ---------------------------------------------------------------- loss


def test_uniform_loss_is_log_c():
    ds = toy(n=9, m=3, c=4, seed=1)
    ds = Dataset(ds.features, np.arange(9) % 4, ds.class_names)
    assert ce_loss(zero_params(SR, 4, 3), ds) == pytest.approx(math.log(4), abs=1e-12)
    assert abs(ce_loss(zero_params(SR, 4, 3), ds) - 1.386294) < 1e-6


def test_confident_correct_model_has_near_zero_loss():
    ds = make_separable(3, 8, 60, seed=0)
    w = np.zeros((3, 9))
    w[:, :8] = 40 * np.eye(8)[:3]
    assert ce_loss(ModelParams(SR, w.ravel(), 3, 8), ds) < 1e-6


@pytest.mark.parametrize("backend", [SR, TC])
def test_duplicating_the_dataset_changes_nothing(backend):
    ds = toy(seed=2)
    p = init_params(backend, 2, 3, seed=1, channels=4, scale=0.5)
    twice = concat([ds, ds])
    assert ce_loss(p, twice) == pytest.approx(ce_loss(p, ds), rel=1e-14)
    assert np.allclose(ce_gradient(p, twice), ce_gradient(p, ds), rtol=1e-12, atol=1e-15)


def test_soft_targets_reduce_to_hard_labels():
    ds = toy(seed=3)
    p = init_params(SR, 2, 3, seed=2, scale=1.0)
    assert soft_ce_loss(p, ds.features, ds.one_hot()) == ce_loss(p, ds)
    with pytest.raises(ValueError):
        soft_ce_loss(p, ds.features, np.ones((len(ds), 3)) / 3)


# ---------------------------------------------------------------- derivatives


@pytest.mark.parametrize("backend", [SR, TC])
@given(seed=st.integers(0, 10_000))
def test_gradient_matches_finite_differences(backend, seed):
    ds = toy(n=7, m=3, c=3, seed=seed)
    p = init_params(backend, 3, 3, seed=seed, channels=3, scale=0.8)
    g = ce_gradient(p, ds)
    fd = oracles.central_diff(lambda w: ce_loss(p.with_weights(w), ds), p.weights, h=1e-6)
    assert oracles.rel_err(g, fd) < 1e-6


@given(seed=st.integers(0, 10_000))
def test_soft_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 3))
    t = rng.dirichlet(np.ones(3), size=6)
    p = init_params(SR, 3, 3, seed=seed, scale=1.0)
    g = soft_ce_gradient(p, x, t)
    fd = oracles.central_diff(lambda w: soft_ce_loss(p.with_weights(w), x, t), p.weights)
    assert oracles.rel_err(g, fd) < 1e-6


@given(seed=st.integers(0, 10_000))
def test_hessian_matches_finite_differences_of_gradient(seed):
    ds = toy(n=10, m=3, c=2, seed=seed)
    p = init_params(SR, 2, 3, seed=seed, scale=1.0)
    h = ce_hessian(p, ds).values
    cols = [
        oracles.central_diff(lambda w, j=j: ce_gradient(p.with_weights(w), ds)[j], p.weights, h=1e-5)
        for j in range(p.size)
    ]
    assert oracles.rel_err(h, np.array(cols)) < 1e-5


@given(seed=st.integers(0, 10_000), c=st.integers(2, 4), m=st.integers(1, 4))
def test_hessian_matches_kronecker_oracle(seed, c, m):
    ds = toy(n=8, m=m, c=c, seed=seed)
    p = init_params(SR, c, m, seed=seed, scale=1.0)
    h = ce_hessian(p, ds).values
    assert np.max(np.abs(h - h.T)) == 0
    assert oracles.rel_err(h, oracles.softmax_reg_hessian(p.weights, ds.features, c)) < 1e-12
    assert np.linalg.eigvalsh(h).min() >= -1e-8


@given(seed=st.integers(0, 10_000))
def test_conv_curvature_matches_finite_difference_diagonal(seed):
    # logits are piecewise linear in any single weight, so the Gauss-Newton
    # diagonal equals the true Hessian diagonal away from ReLU kinks
    ds = toy(n=5, m=3, c=2, seed=seed)
    p = init_params(TC, 2, 3, seed=seed, channels=3, scale=0.8)
    curv = ce_hessian(p, ds)
    assert curv.diagonal
    h = 1e-5
    diag = np.empty(p.size)
    for j in range(p.size):
        e = np.zeros(p.size)
        e[j] = h
        gp = ce_gradient(p.with_weights(p.weights + e), ds)[j]
        gm = ce_gradient(p.with_weights(p.weights - e), ds)[j]
        diag[j] = (gp - gm) / (2 * h)
    assert oracles.rel_err(curv.values, diag) < 1e-5
    assert np.all(curv.values >= 0)


def test_dense_hessian_cap():
    p = zero_params(SR, 10, 30)
    with pytest.raises(ValueError, match="cap"):
        ce_hessian(p, toy(n=3, m=30, c=10), dense_cap=100)


def test_gradient_vanishes_at_separable_optimum():
    ds = make_separable(3, 8, 300, seed=2)
    p = train_ce(init_params(SR, 3, 8, seed=0), ds, Hyperparams(learning_rate=1.0, damping=0.0), epochs=60)
    assert np.linalg.norm(ce_gradient(p, ds)) < 1e-6


# ---------------------------------------------------------------- Newton step


def test_newton_exact_on_one_dimensional_quadratic():
    # f(t) = (t - 3)^2 at t = 0: g = -6, H = 2
    assert newton_step(np.array([0.0]), np.array([-6.0]), np.array([[2.0]]), 1.0, 0.0)[0] == pytest.approx(3.0, abs=1e-12)


def test_zero_step_size_is_identity():
    p = init_params(SR, 2, 3, seed=1)
    assert newton_step(p, np.ones(p.size), np.eye(p.size), 0.0) is p


def test_damped_newton_step_decreases_uniform_loss():
    ds = toy(n=9, m=3, c=4, seed=1)
    p = zero_params(SR, 4, 3)
    after = newton_step(p, ce_gradient(p, ds), ce_hessian(p, ds), 1.0, 1e-3)
    assert ce_loss(after, ds) < ce_loss(p, ds)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.floats(0.1, 2))
def test_large_damping_is_scaled_gradient_descent(g, eta):
    g = np.array(g)
    n = g.size
    a = np.random.default_rng(n).normal(size=(n, n))
    h = a @ a.T
    step = newton_step(np.zeros(n), g, h, eta, 1e6)
    expected = -(eta / 1e6) * g
    assert np.allclose(step, expected, rtol=1e-2, atol=1e-2 * np.abs(expected).max() + 1e-300)


def test_damping_escalates_on_indefinite_curvature():
    h = np.diag([1.0, -1e-3])
    s = damped_solve(h, np.array([1.0, 1.0]), 0.0)
    assert np.all(np.isfinite(s))


def test_hopeless_curvature_raises():
    with pytest.raises(NewtonSolveError):
        damped_solve(np.diag([1.0, -1e9]), np.ones(2), 0.0)
    with pytest.raises(NewtonSolveError):
        damped_solve(Curvature(np.array([1.0, -1e9]), diagonal=True), np.ones(2), 0.0)


def test_diagonal_curvature_divides_elementwise():
    s = damped_solve(Curvature(np.array([2.0, 4.0]), diagonal=True), np.array([2.0, 2.0]), 0.0)
    assert s.tolist() == [1.0, 0.5]


# ---------------------------------------------------------------- training


def test_separable_toy_fits_within_ten_newton_steps():
    ds = make_separable(3, 8, 300, seed=0)
    p = init_params(SR, 3, 8, seed=0)
    hyper = Hyperparams(learning_rate=1.0)
    for step in range(1, 11):
        p = train_ce(p, ds, hyper, epochs=1)
        if (predict_batch(p, ds.features) == ds.labels).all():
            break
    assert (predict_batch(p, ds.features) == ds.labels).all()


def test_optimizer_defaults():
    assert Hyperparams().method == "newton"
    assert Hyperparams().eta == 0.5
    conv = Hyperparams(backend=TC)
    assert conv.method == "sgd"
    assert conv.eta == 0.1
    assert Hyperparams(learning_rate=0.3, optimizer="sgd").eta == 0.3


def test_sgd_training_is_seeded_and_lowers_loss():
    ds = make_separable(3, 8, 90, seed=4)
    p = init_params(TC, 3, 8, seed=1, channels=4)
    hyper = Hyperparams(backend=TC, local_epochs=5, batch_size=16)
    a = train_ce(p, ds, hyper, seed=9)
    b = train_ce(p, ds, hyper, seed=9)
    assert np.array_equal(a.weights, b.weights)
    assert ce_loss(a, ds) < ce_loss(p, ds)


def test_training_with_zero_step_size_is_identity():
    ds = toy()
    p = init_params(SR, 2, 3, seed=5)
    assert train(p, ds.features, ds.one_hot(), Hyperparams(learning_rate=0.0)) is p


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("backend", [SR, TC])
def test_checkpoint_round_trip_is_exact(tmp_path, backend):
    p = init_params(backend, 3, 6, seed=11, channels=5, scale=1 / 3)
    save_params(p, tmp_path / "m.json")
    back = load_params(tmp_path / "m.json")
    assert back.same_layout(p)
    assert np.array_equal(back.weights, p.weights)


def test_checkpoint_rejects_foreign_json(tmp_path):
    (tmp_path / "x.json").write_text('{"weights": []}')
    with pytest.raises(ValueError):
        load_params(tmp_path / "x.json")
