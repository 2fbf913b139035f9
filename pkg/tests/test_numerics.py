import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gazereg.gradcheck import kl_identity_error, kl_oracle
from gazereg.numerics import (
    GradientCheckError,
    InvalidInputError,
    ShapeError,
    finite_diff_check,
    is_simplex,
    kl_div,
    kl_div_rows,
    kl_grad_wrt_logits,
    log_softmax,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
logit_vectors = arrays(np.float64, st.integers(1, 70), elements=finite)


def simplices(min_size=1, max_size=70):
    return arrays(np.float64, st.integers(min_size, max_size), elements=st.floats(0, 10)).filter(
        lambda a: a.sum() > 1e-3
    ).map(lambda a: a / a.sum())


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(softmax(np.zeros(4)), [0.25] * 4)


def test_softmax_survives_huge_logits():
    out = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        softmax([])
    with pytest.raises(InvalidInputError):
        softmax([0.0, np.nan])
    with pytest.raises(InvalidInputError):
        softmax([np.inf, 0.0])


@given(logit_vectors)
def test_softmax_is_a_simplex(z):
    assert is_simplex(softmax(z))


@given(logit_vectors, finite)
def test_softmax_shift_invariant(z, c):
    np.testing.assert_allclose(softmax(z + c), softmax(z), rtol=1e-9, atol=1e-15)


@given(logit_vectors)
def test_log_softmax_matches_log_of_softmax(z):
    s = softmax(z)
    mask = s > 1e-300
    np.testing.assert_allclose(log_softmax(z)[mask], np.log(s[mask]), rtol=1e-9, atol=1e-12)


def test_kl_examples():
    assert kl_div([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-15)
    assert kl_div([0.5, 0.5], [1.0, 0.0]) == np.inf


def test_kl_zero_times_log_zero_convention():
    # the zero entry of p contributes nothing even though q is also zero there
    assert kl_div([1.0, 0.0], [1.0, 0.0]) == 0.0


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        kl_div([1.0], [0.5, 0.5])
    with pytest.raises(ShapeError):
        kl_div_rows(np.ones((2, 3)) / 3, np.ones((2, 4)) / 4)


@given(simplices(2, 40), st.data())
def test_kl_nonnegative_and_zero_on_diagonal(p, data):
    q = data.draw(simplices(p.size, p.size))
    assert kl_div(p, q) >= -1e-12
    assert kl_div(p, p) == pytest.approx(0.0, abs=1e-12)


@given(simplices(2, 40), st.data())
def test_kl_rows_agrees_with_scalar(p, data):
    z = data.draw(arrays(np.float64, p.size, elements=st.floats(-5, 5)))
    q = softmax(z)
    assert kl_div_rows(p[None], q[None])[0] == pytest.approx(kl_div(p, q), rel=1e-12, abs=1e-12)


def test_kl_grad_example():
    np.testing.assert_allclose(kl_grad_wrt_logits([1.0, 0.0], [0.0, 0.0]), [-0.5, 0.5])


def test_kl_grad_shape_mismatch():
    with pytest.raises(ShapeError):
        kl_grad_wrt_logits([1.0, 0.0], [0.0, 0.0, 0.0])


@given(simplices(2, 64), st.data())
def test_kl_grad_sums_to_zero(g, data):
    z = data.draw(arrays(np.float64, g.size, elements=st.floats(-10, 10)))
    assert abs(kl_grad_wrt_logits(g, z).sum()) < 1e-12


def test_kl_grad_matches_finite_differences_at_64_patches():
    # extended-precision oracle; see kl_oracle for why
    assert kl_identity_error(n_pairs=100, n=64, seed=3) < 1e-5


def test_kl_oracle_agrees_with_float64_kl():
    rng = np.random.default_rng(0)
    g = rng.dirichlet(np.ones(16))
    z = rng.normal(size=16)
    assert float(kl_oracle(g, z)) == pytest.approx(kl_div(g, softmax(z)), rel=1e-12)


def test_finite_diff_check_on_quadratic():
    a = np.array([1.0, -2.0, 3.0])
    err = finite_diff_check(lambda x: float(np.sum(a * x**2)), 2 * a * np.ones(3), np.ones(3))
    assert err < 1e-8


def test_finite_diff_check_detects_wrong_gradient():
    err = finite_diff_check(lambda x: float(np.sum(x**2)), np.ones(3), np.ones(3))
    assert err > 0.4


def test_finite_diff_check_names_bad_coordinate():
    def f(x):
        # finite everywhere except when coordinate 1 moves above 1
        return float(x[0] + (np.inf if x[1] > 1.0 else x[1]))

    with pytest.raises(GradientCheckError, match="coordinate 1"):
        finite_diff_check(f, np.ones(2), np.array([0.0, 1.0]))


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(InvalidInputError):
        finite_diff_check(lambda x: 0.0, np.zeros(1), np.zeros(1), step=0.0)


@settings(max_examples=30)
@given(simplices(2, 20))
def test_is_simplex_accepts_normalized(p):
    assert is_simplex(p)


def test_is_simplex_rejects():
    assert not is_simplex([0.5, 0.6])
    assert not is_simplex([1.5, -0.5])
    assert not is_simplex([])
