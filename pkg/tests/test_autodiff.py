import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qosforecast import autodiff as ad
from qosforecast.errors import CorruptFile, DomainError, MissingGrad, NotScalar, ShapeMismatch, VersionMismatch

finite = st.floats(-50, 50, allow_nan=False)


def leaf(x):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- primitive values ---------------------------------------------------------

def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ad.softmax(ad.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_logsumexp_large_inputs_do_not_overflow():
    out = ad.logsumexp(ad.Tensor([1000.0, 1000.0])).item()
    assert out == pytest.approx(1000 + math.log(2), abs=1e-12)


def test_dropout_zero_p_train_is_identity():
    x = ad.Tensor(np.arange(6.0))
    out = ad.dropout(x, 0.0, True, ad.make_rng(0))
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_eval_is_identity():
    x = ad.Tensor(np.arange(6.0))
    assert ad.dropout(x, 0.5, False, None) is x


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError):
        ad.dropout(ad.Tensor([1.0]), 1.0, True, ad.make_rng(0))


def test_dropout_expectation_matches_eval():
    x = np.linspace(0.1, 1.0, 5)
    rng = ad.make_rng(7)
    draws = np.stack([ad.dropout(ad.Tensor(x), 0.2, True, rng).data for _ in range(10_000)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - x) < 3 * se + 1e-12)


def test_log_of_nonpositive_raises():
    with pytest.raises(DomainError):
        ad.log(ad.Tensor([1.0, 0.0]))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_lstm_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.lstm(ad.Tensor(np.ones((1, 4, 3))), ad.Tensor(np.ones((3, 8))), ad.Tensor(np.zeros(8)))


# -- backward -----------------------------------------------------------------

def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0])
    ad.backward(ad.sum_(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_constant_function_gives_zero():
    x = leaf([1.0, 2.0])
    y = leaf([3.0])
    loss = ad.sum_(y * 2.0) + ad.sum_(x) * 0.0
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_accumulates_without_zero_grad():
    x = leaf([1.0, 2.0])
    ad.backward(ad.sum_(x * x))
    ad.backward(ad.sum_(x * x))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    ad.zero_grad([x])
    assert x.grad is None


def test_backward_requires_scalar():
    with pytest.raises(NotScalar):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_shared_subexpression_gradient():
    x = leaf([3.0])
    y = x * x
    ad.backward(ad.sum_(y + y * x))  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(6 + 27)


# -- finite-difference checks -------------------------------------------------

def test_grad_check_quadratic_is_exact():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = leaf([[0.3, -0.7]])
    rep = ad.grad_check(lambda: ad.sum_(x * ad.matmul(x, A)), {"x": x})
    assert rep.max_rel_error < 1e-10


@pytest.mark.parametrize("op", [ad.tanh, ad.sigmoid, ad.softplus, ad.exp, ad.softmax,
                                ad.log_softmax, ad.logsumexp, ad.square])
def test_pointwise_and_rowwise_grads(op):
    rng = np.random.default_rng(1)
    x = leaf(rng.normal(size=(3, 4)))
    w = rng.normal(size=op(ad.Tensor(x.data)).shape)
    rep = ad.grad_check(lambda: ad.sum_(op(x) * w), {"x": x})
    assert rep.passed, rep.failures


def test_structural_op_grads():
    rng = np.random.default_rng(2)
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 4)))
    c = leaf(rng.uniform(0.5, 2.0, size=(2, 4)))

    def f():
        m = ad.matmul(a, b)
        z = ad.concat([m, c], axis=1)[:, 1:6]
        z = ad.reshape(z, (5, 2)) / ad.reshape(c[:, :1] + 1.0, (1, 2))
        return ad.mean(ad.relu(z)) + ad.sum_(ad.log(c[:, :1] * 2.0) - ad.power(c[:, 1:2], 1.5))

    assert ad.grad_check(f, {"a": a, "b": b, "c": c}).passed


def test_clamp_gradient_masks_outside():
    x = leaf([-2.0, 0.5, 3.0])
    ad.backward(ad.sum_(ad.clamp(x, 0.0, 1.0)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def lstm_from_primitives(x, W, b, reverse=False):
    """Reference LSTM composed from recorded primitives (gate order i, f, g, o)."""
    B, T, F = x.shape
    H = W.shape[1] // 4
    h = ad.Tensor(np.zeros((B, H)))
    c = ad.Tensor(np.zeros((B, H)))
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        z = ad.matmul(ad.concat([x[:, t, :], h], axis=1), W) + b
        i, f = ad.sigmoid(z[:, :H]), ad.sigmoid(z[:, H:2 * H])
        g, o = ad.tanh(z[:, 2 * H:3 * H]), ad.sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        h = o * ad.tanh(c)
    return h


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_lstm_matches_composed_cell(reverse):
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(2, 5, 3)))
    W = leaf(rng.normal(scale=0.5, size=(3 + 4, 16)))
    b = leaf(rng.normal(scale=0.1, size=16))
    fused = ad.lstm(x, W, b, reverse=reverse)
    ref = lstm_from_primitives(x, W, b, reverse=reverse)
    np.testing.assert_allclose(fused.data, ref.data, rtol=1e-13, atol=1e-14)
    wts = rng.normal(size=fused.shape)
    ad.backward(ad.sum_(fused * wts))
    fused_grads = [p.grad.copy() for p in (x, W, b)]
    ad.zero_grad([x, W, b])
    ad.backward(ad.sum_(ref * wts))
    for g_fused, p in zip(fused_grads, (x, W, b)):
        np.testing.assert_allclose(g_fused, p.grad, rtol=1e-10, atol=1e-12)


def test_lstm_cell_grad_check():
    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(3, 6, 2)))
    W = leaf(rng.normal(scale=0.5, size=(2 + 3, 12)))
    b = leaf(rng.normal(scale=0.1, size=12))
    rep = ad.grad_check(lambda: ad.sum_(ad.square(ad.lstm(x, W, b))), {"x": x, "W": W, "b": b})
    assert rep.max_rel_error < 1e-4


# -- properties ---------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(ad.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(s >= 0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_logsumexp_at_least_max(x):
    assert np.all(ad.logsumexp(ad.Tensor(x)).data >= x.max(axis=-1))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_row_stable_matmul_is_row_invariant(n, k, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, 7))
    with ad.row_stable():
        full = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
        rows = [ad.matmul(ad.Tensor(a[i:i + 1]), ad.Tensor(b)).data for i in range(n)]
    np.testing.assert_array_equal(full, np.concatenate(rows))


# -- adam ---------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    p = leaf([0.0, 0.0])
    p.grad = np.array([3.0, -0.02])
    ad.adam_step({"p": p}, ad.AdamState())
    np.testing.assert_allclose(p.data, [-1e-3, 1e-3], rtol=1e-5)


def test_adam_zero_grad_is_fixed_point():
    p = leaf([1.5])
    p.grad = np.zeros(1)
    state = ad.AdamState()
    ad.adam_step({"p": p}, state)
    assert p.data[0] == 1.5
    assert state.step_count == 1


def test_adam_missing_grad():
    with pytest.raises(MissingGrad):
        ad.adam_step({"p": leaf([1.0])}, ad.AdamState())


def test_adam_runs_are_bit_identical():
    def run():
        rng = ad.make_rng(11, 3)
        p = leaf(rng.normal(size=4))
        state = ad.AdamState()
        for _ in range(20):
            ad.zero_grad([p])
            ad.backward(ad.sum_(ad.square(p - 1.0) * ad.Tensor(rng.normal(size=4))))
            ad.adam_step({"p": p}, state)
        return p.data
    np.testing.assert_array_equal(run(), run())


def test_make_rng_streams_are_independent_and_reproducible():
    assert ad.make_rng(1, 2).random() == ad.make_rng(1, 2).random()
    assert ad.make_rng(1, 2).random() != ad.make_rng(1, 3).random()


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi]), "c": np.zeros((0, 2))}
    ad.save_params(params, tmp_path / "p.bin")
    back = ad.load_params(tmp_path / "p.bin")
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
        assert back[k].shape == params[k].shape


def test_checkpoint_detects_corruption(tmp_path):
    ad.save_params({"a": np.ones(4)}, tmp_path / "p.bin")
    blob = bytearray((tmp_path / "p.bin").read_bytes())
    blob[-1] ^= 0xFF
    with pytest.raises(CorruptFile):
        ad.decode_params(bytes(blob))
    with pytest.raises(CorruptFile):
        ad.decode_params(b"nope")


def test_checkpoint_version_mismatch():
    blob = bytearray(ad.encode_params({"a": np.ones(2)}))
    blob[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(VersionMismatch):
        ad.decode_params(bytes(blob))
