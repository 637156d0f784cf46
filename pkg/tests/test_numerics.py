import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnscene import numerics as nx
from attnscene.errors import ConsistencyError, DimensionError, NumericError, ParameterError


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        lp = f()
        flat[i] = keep - eps
        lm = f()
        flat[i] = keep
        gflat[i] = (lp - lm) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, tol=1e-4):
    assert np.max(nx.relative_error(analytic, numeric)) < tol


# -- conv ---------------------------------------------------------------------


def test_conv_ones_hand_example():
    x = np.ones((1, 4, 4, 1))
    out, _ = nx.conv2d(x, np.ones((1, 1, 3, 3)))
    expected = np.array([[4, 6, 6, 4],
                         [6, 9, 9, 6],
                         [6, 9, 9, 6],
                         [4, 6, 6, 4]], dtype=float)
    np.testing.assert_array_equal(out[0, :, :, 0], expected)


@pytest.mark.parametrize("channels", [1, 3, 8])
def test_conv_identity_kernel(channels):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 6, channels))
    kernel = np.zeros((channels, channels, 1, 1))
    kernel[np.arange(channels), np.arange(channels)] = 1.0
    out, _ = nx.conv2d(x, kernel)
    np.testing.assert_allclose(out, x, atol=1e-12)


@pytest.mark.parametrize("channels", [1, 2, 6])
def test_conv_matches_direct_loops(channels):
    rng = np.random.default_rng(channels)
    x = rng.normal(size=(2, 5, 7, channels))
    k = rng.normal(size=(3, channels, 3, 3))
    out, _ = nx.conv2d(x, k)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 7, 3))
    for i in range(5):
        for j in range(7):
            patch = xp[:, i:i + 3, j:j + 3, :]  # B,3,3,C
            ref[:, i, j, :] = np.einsum("bhwc,ochw->bo", patch, k)
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 4, 4, 2\).*\(1, 3, 3, 3\)"):
        nx.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((1, 3, 3, 3)))


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(DimensionError):
        nx.conv2d(np.zeros((1, 2, 2, 1)), np.zeros((1, 1, 5, 5)), padding=0)


@pytest.mark.parametrize("channels", [1, 5])
def test_conv_gradients(channels):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 4, 5, channels))
    k = rng.normal(size=(3, channels, 3, 3))
    w = rng.normal(size=(2, 4, 5, 3))
    out, cache = nx.conv2d(x, k)
    dx, dk = nx.conv2d_backward(w, cache)
    f = lambda: float(np.sum(nx.conv2d(x, k)[0] * w))
    assert_grad_close(dx, numeric_grad(f, x))
    assert_grad_close(dk, numeric_grad(f, k))


def test_conv_skips_input_gradient_on_request():
    x = np.ones((1, 3, 3, 1))
    out, cache = nx.conv2d(x, np.ones((2, 1, 3, 3)))
    dx, dk = nx.conv2d_backward(np.ones_like(out), cache, need_input_grad=False)
    assert dx is None and dk.shape == (2, 1, 3, 3)


# -- pooling ------------------------------------------------------------------


def test_maxpool_two_by_two():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    out, _ = nx.maxpool2d(x, (2, 2))
    assert out.shape == (1, 1, 1, 1) and out.item() == 4.0


def test_maxpool_floor_divides_625_to_312():
    out, _ = nx.maxpool2d(np.zeros((1, 4, 625, 1)), (2, 2))
    assert out.shape == (1, 2, 312, 1)


def test_maxpool_ties_route_gradient_to_first_element():
    x = np.full((1, 4, 4, 2), 3.0)
    out, cache = nx.maxpool2d(x, (2, 2))
    dx = nx.maxpool2d_backward(np.ones_like(out), cache)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    for c in range(2):
        np.testing.assert_array_equal(dx[0, :, :, c], expected)


def test_maxpool_window_larger_than_input():
    with pytest.raises(DimensionError):
        nx.maxpool2d(np.zeros((1, 1, 4, 1)), (2, 1))


def test_maxpool_gradient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 4, 6, 3))
    w = rng.normal(size=(2, 2, 3, 3))
    _, cache = nx.maxpool2d(x, (2, 2))
    dx = nx.maxpool2d_backward(w, cache)
    f = lambda: float(np.sum(nx.maxpool2d(x, (2, 2))[0] * w))
    assert_grad_close(dx, numeric_grad(f, x))


# -- batch norm ---------------------------------------------------------------


def test_batchnorm_train_output_standardised():
    # with eps = 1e-5 the variance lands within 1e-5 of 1 only when the batch
    # variance is well above eps, hence the wide input distribution
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=(8, 5, 6, 4))
    y, _ = nx.batchnorm(x, np.ones(4), np.zeros(4), nx.BatchNormStats.initial(4), train=True)
    flat = y.reshape(-1, 4)
    np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=1e-5)
    np.testing.assert_allclose(flat.var(axis=0), 1.0, atol=1e-5)


def test_batchnorm_eval_with_initial_stats():
    x = np.random.default_rng(1).normal(size=(2, 3, 3, 2))
    y, _ = nx.batchnorm(x, np.ones(2), np.zeros(2), nx.BatchNormStats.initial(2), train=False)
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_running_stats_momentum():
    x = np.random.default_rng(2).normal(1.0, 2.0, size=(4, 3, 3, 2))
    stats = nx.BatchNormStats.initial(2)
    nx.batchnorm(x, np.ones(2), np.zeros(2), stats, train=True, momentum=0.1)
    flat = x.reshape(-1, 2)
    np.testing.assert_allclose(stats.mean, 0.1 * flat.mean(axis=0))
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * flat.var(axis=0))


@pytest.mark.parametrize("train,relu", [(True, False), (True, True), (False, False)])
def test_batchnorm_gradients(train, relu):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 4))
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    w = rng.normal(size=x.shape)
    stats = nx.BatchNormStats(rng.normal(size=4), rng.uniform(0.5, 2, size=4))

    def f():
        return float(np.sum(nx.batchnorm(x, gamma, beta, stats, train, update_stats=False, relu=relu)[0] * w))

    _, cache = nx.batchnorm(x, gamma, beta, stats, train, update_stats=False, relu=relu)
    dx, dg, db = nx.batchnorm_backward(w, cache)
    assert_grad_close(dx, numeric_grad(f, x))
    assert_grad_close(dg, numeric_grad(f, gamma))
    assert_grad_close(db, numeric_grad(f, beta))


# -- LSTM ---------------------------------------------------------------------


def lstm_weights(rng, q, h, scale=0.5):
    return (rng.normal(size=(q, 4 * h)) * scale, rng.normal(size=(h, 4 * h)) * scale, rng.normal(size=4 * h) * scale)


def test_bilstm_zero_weights_give_zero_states():
    q, h = 3, 4
    zeros = (np.zeros((q, 4 * h)), np.zeros((h, 4 * h)), np.zeros(4 * h))
    out, _ = nx.bilstm(np.random.default_rng(0).normal(size=(2, 5, q)), zeros, zeros)
    assert out.shape == (2, 5, 8)
    np.testing.assert_array_equal(out, 0.0)


def test_bilstm_single_step_halves_share_input():
    rng = np.random.default_rng(1)
    params = lstm_weights(rng, 3, 4)
    out, _ = nx.bilstm(rng.normal(size=(1, 1, 3)), params, params)
    np.testing.assert_allclose(out[0, 0, :4], out[0, 0, 4:])


def test_bilstm_empty_sequence():
    params = lstm_weights(np.random.default_rng(0), 3, 2)
    with pytest.raises(DimensionError):
        nx.bilstm(np.zeros((1, 0, 3)), params, params)


def test_lstm_matches_reference_cell():
    rng = np.random.default_rng(2)
    q, h, T = 3, 2, 4
    Wx, Wh, b = lstm_weights(rng, q, h)
    x = rng.normal(size=(1, T, q))
    hs, _ = nx.lstm(x, Wx, Wh, b)
    sig = lambda z: 1 / (1 + np.exp(-z))
    hv, cv = np.zeros(h), np.zeros(h)
    for t in range(T):
        z = x[0, t] @ Wx + hv @ Wh + b
        i, f, g, o = sig(z[:h]), sig(z[h:2 * h]), np.tanh(z[2 * h:3 * h]), sig(z[3 * h:])
        cv = f * cv + i * g
        hv = o * np.tanh(cv)
        np.testing.assert_allclose(hs[0, t], hv, atol=1e-12)


def test_bilstm_gradients_three_steps_hidden_four():
    rng = np.random.default_rng(5)
    q, h = 3, 4
    fwd, bwd = lstm_weights(rng, q, h), lstm_weights(rng, q, h)
    x = rng.normal(size=(2, 3, q))
    w = rng.normal(size=(2, 3, 2 * h))
    f = lambda: float(np.sum(nx.bilstm(x, fwd, bwd)[0] * w))
    _, cache = nx.bilstm(x, fwd, bwd)
    dx, dfwd, dbwd = nx.bilstm_backward(w, cache)
    assert_grad_close(dx, numeric_grad(f, x))
    for analytic, arrays_ in ((dfwd, fwd), (dbwd, bwd)):
        for a, p in zip(analytic, arrays_):
            assert_grad_close(a, numeric_grad(f, p))


# -- softmax, loss, dropout ---------------------------------------------------


@pytest.mark.parametrize("temperature,expected", [
    (1.0, [0.731059, 0.268941]),
    (0.2, [0.993307, 0.006693]),
])
def test_softmax_hand_values(temperature, expected):
    np.testing.assert_allclose(nx.softmax(np.array([1.0, 0.0]), temperature), expected, atol=5e-7)


@pytest.mark.parametrize("temperature", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(temperature):
    with pytest.raises(ParameterError):
        nx.softmax(np.zeros(3), temperature)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
       st.floats(0.05, 5.0), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(z, temperature, shift):
    p = nx.softmax(z, temperature)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-9
    np.testing.assert_allclose(nx.softmax(z + shift, temperature), p, atol=1e-12)


@given(st.integers(1, 10), st.floats(0.1, 3.0))
def test_softmax_equal_logits_uniform(n, temperature):
    np.testing.assert_allclose(nx.softmax(np.full(n, 1.7), temperature), 1.0 / n)


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(2, 5))
    w = rng.normal(size=(2, 5))
    p = nx.softmax(z, 0.3)
    f = lambda: float(np.sum(nx.softmax(z, 0.3) * w))
    assert_grad_close(nx.softmax_backward(w, p, 0.3), numeric_grad(f, z))


def test_cross_entropy_values():
    assert nx.cross_entropy(np.eye(4)[2], 2) == 0.0
    assert nx.cross_entropy(np.full(9, 1 / 9), 4) == pytest.approx(2.19722, abs=1e-5)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        nx.cross_entropy(np.full(3, 1 / 3), 3)


def test_softmax_cross_entropy_gradient_is_probs_minus_onehot():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 4))
    y = np.array([0, 3, 1])
    loss, probs, dz = nx.softmax_cross_entropy(z, y)
    np.testing.assert_allclose(dz, (probs - np.eye(4)[y]) / 3)
    f = lambda: nx.softmax_cross_entropy(z, y)[0]
    assert_grad_close(dz, numeric_grad(f, z))


@pytest.mark.parametrize("train", [True, False])
def test_dropout_rate_zero_is_identity(train):
    x = np.arange(6.0)
    y, _ = nx.dropout(x, 0.0, train, np.random.default_rng(0))
    np.testing.assert_array_equal(y, x)


def test_dropout_eval_identity():
    x = np.arange(6.0)
    np.testing.assert_array_equal(nx.dropout(x, 0.7, False)[0], x)


def test_dropout_statistics():
    x = np.ones(10**6)
    y, _ = nx.dropout(x, 0.5, True, np.random.default_rng(123))
    kept = y != 0
    assert abs(kept.mean() - 0.5) < 0.01
    np.testing.assert_array_equal(y[kept], 2.0)


@pytest.mark.parametrize("rate", [1.0, 1.5])
def test_dropout_rejects_rate_one(rate):
    with pytest.raises(ParameterError):
        nx.dropout(np.ones(3), rate, True, np.random.default_rng(0))


def test_check_finite():
    with pytest.raises(NumericError, match="somewhere"):
        nx.check_finite(np.array([1.0, np.nan]), "somewhere")


# -- parameters and Adam ------------------------------------------------------


def store(**values):
    ps = nx.ParamStore()
    for k, v in values.items():
        ps.add(k, np.asarray(v, dtype=float))
    return ps


def test_paramstore_order_and_uniqueness():
    ps = store(zeta=[1.0], alpha=[2.0], mid=[3.0])
    assert list(ps) == ["alpha", "mid", "zeta"]
    with pytest.raises(ConsistencyError):
        ps.add("mid", np.zeros(1))


def test_paramstore_gradient_shape_checked():
    ps = store(w=np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        ps.accumulate("w", np.zeros((3, 2)))
    ps.accumulate("w", np.ones((2, 3)))
    ps.accumulate("w", np.ones((2, 3)))
    np.testing.assert_array_equal(ps.grad("w"), 2.0)


def test_adam_zero_gradient_is_identity():
    ps = store(w=[1.0, -2.0], b=[0.5])
    state = nx.AdamState()
    for name in ps:
        ps.accumulate(name, np.zeros_like(ps[name]))
    nx.adam_step(ps, state, 0.001)
    np.testing.assert_array_equal(ps["w"], [1.0, -2.0])
    np.testing.assert_array_equal(ps["b"], [0.5])


def test_adam_first_step_hand_value():
    ps = store(w=[0.0])
    state = nx.AdamState()
    ps.accumulate("w", np.array([1.0]))
    nx.adam_step(ps, state, 0.001)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert ps["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert state.t == 1 and ps.grad("w") is None


def test_adam_missing_gradient():
    ps = store(w=[0.0], b=[0.0])
    ps.accumulate("w", np.array([1.0]))
    with pytest.raises(ConsistencyError, match="b"):
        nx.adam_step(ps, nx.AdamState(), 0.001)


def test_adam_deterministic_and_lr_zero():
    def run(lr):
        ps = store(w=[0.3, -0.1])
        state = nx.AdamState()
        for g in ([1.0, 2.0], [-0.5, 0.1]):
            ps.accumulate("w", np.array(g))
            nx.adam_step(ps, state, lr)
        return ps["w"], state

    (a, sa), (b, sb) = run(0.01), run(0.01)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(sa.m["w"], sb.m["w"])
    assert np.all(sa.v["w"] >= 0)
    np.testing.assert_array_equal(run(0.0)[0], [0.3, -0.1])


# -- finite-difference checker ------------------------------------------------


def test_finite_diff_quadratic():
    theta = np.random.default_rng(0).normal(size=(3, 4))
    ps = store(theta=theta)
    report = nx.finite_diff_check(lambda: float(np.sum(ps["theta"] ** 2)), ps, {"theta": 2 * theta})
    assert report.max_rel_err["theta"] < 1e-8
    assert report.passed and report.coords_checked["theta"] == 12


def test_finite_diff_reports_wrong_gradient():
    theta = np.ones(5)
    ps = store(theta=theta)
    report = nx.finite_diff_check(lambda: float(np.sum(ps["theta"] ** 2)), ps, {"theta": 3 * theta})
    assert not report.passed and report.failures() == ["theta"]
    assert "FAIL" in report.lines()[0]


def test_finite_diff_subsamples_and_restores():
    theta = np.arange(100.0)
    ps = store(theta=theta)
    report = nx.finite_diff_check(lambda: float(np.sum(ps["theta"] ** 2)), ps, {"theta": 2 * theta},
                                  max_coords=7)
    assert report.coords_checked["theta"] == 7
    np.testing.assert_array_equal(ps["theta"], theta)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_attention_style_softmax_gradient_random_shapes(b, m, t, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=0.3, size=(b, m, t))  # unsaturated, so gradients stay well above roundoff
    w = rng.normal(size=(b, m, t))
    f = lambda: float(np.sum(nx.softmax(z, 0.2) * w))
    assert_grad_close(nx.softmax_backward(w, nx.softmax(z, 0.2), 0.2), numeric_grad(f, z))
