import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcold.errors import ConfigError
from fedcold.numerics import (
    Adam,
    affine,
    finite_diff_grad_check,
    sample_gaussian,
    sample_laplace,
    sigmoid,
    softmax_rows,
    stream_rng,
)


def naive_affine(x, w, b):
    """Independent triple-loop oracle for x @ w + b."""
    n, k = x.shape
    k2, m = w.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += x[i, l] * w[l, j]
            out[i, j] = acc + b[j]
    return out


def test_affine_matches_triple_loop_oracle():
    rng = stream_rng(11, "test-affine")
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    b = rng.standard_normal(2)
    expected = naive_affine(x, w, b)
    got = affine(x, w, b)
    assert np.max(np.abs(got - expected)) < 1e-12


def test_affine_single_row():
    rng = stream_rng(12, "test-affine-row")
    x = rng.standard_normal(4)
    w = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)
    got = affine(x, w, b)
    assert got.shape == (3,)
    assert np.allclose(got, naive_affine(x[None, :], w, b)[0], atol=1e-12)


def test_affine_shape_mismatch_rejected():
    with pytest.raises(ConfigError):
        affine(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(ConfigError):
        affine(np.zeros((2, 3)), np.zeros((3, 2)), np.zeros(5))


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = stream_rng(13, "test-softmax")
    m = rng.standard_normal((5, 7)) * 3
    s = softmax_rows(m)
    assert np.allclose(np.sum(s, axis=1), 1.0, atol=1e-12)
    shifted = softmax_rows(m + 123.456)
    assert np.allclose(s, shifted, atol=1e-12)


def test_softmax_rows_extreme_values_stay_finite():
    m = np.array([[1000.0, -1000.0, 0.0]])
    s = softmax_rows(m)
    assert np.all(np.isfinite(s))
    assert abs(np.sum(s) - 1.0) < 1e-12


@given(
    st.lists(
        st.lists(st.floats(-50, 50), min_size=2, max_size=6),
        min_size=1,
        max_size=5,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1),
    st.floats(-100, 100),
)
@settings(max_examples=50, deadline=None)
def test_softmax_shift_invariance_property(rows, shift):
    m = np.array(rows)
    assert np.allclose(softmax_rows(m), softmax_rows(m + shift), atol=1e-9)
    assert np.allclose(np.sum(softmax_rows(m), axis=1), 1.0, atol=1e-9)


def test_gaussian_moments():
    rng = stream_rng(0, "moments-gauss")
    x = sample_gaussian(rng, 1000, 1000)
    assert abs(np.mean(x)) < 0.02
    assert abs(np.var(x) - 1.0) < 0.02


def test_laplace_variance_matches_scale():
    rng = stream_rng(0, "moments-laplace")
    for scale in (0.5, 2.0):
        x = sample_laplace(rng, scale, 1000, 1000)
        expected = 2.0 * scale * scale
        assert abs(np.var(x) - expected) / expected < 0.02
        assert abs(np.mean(x)) < 0.05 * scale


def test_laplace_rejects_nonpositive_scale():
    rng = stream_rng(0, "laplace-bad")
    with pytest.raises(ConfigError):
        sample_laplace(rng, 0.0, 2, 2)
    with pytest.raises(ConfigError):
        sample_laplace(rng, -1.0, 2, 2)


def test_stream_rng_reproducible_and_independent():
    a1 = stream_rng(42, "alpha").standard_normal(100_000)
    a2 = stream_rng(42, "alpha").standard_normal(100_000)
    b = stream_rng(42, "beta").standard_normal(100_000)
    assert np.array_equal(a1, a2)
    r = np.corrcoef(a1, b)[0, 1]
    assert abs(r) < 0.02


def test_stream_rng_distinct_paths_differ():
    x = stream_rng(7, "clients", 3, 5).standard_normal(8)
    y = stream_rng(7, "clients", 3, 6).standard_normal(8)
    z = stream_rng(8, "clients", 3, 5).standard_normal(8)
    assert not np.array_equal(x, y)
    assert not np.array_equal(x, z)


def test_sigmoid_values_and_stability():
    assert abs(sigmoid(0.0) - 0.5) < 1e-15
    assert sigmoid(800.0) == 1.0
    assert sigmoid(-800.0) == pytest.approx(0.0, abs=1e-300)
    x = np.array([-5.0, 0.0, 5.0])
    assert np.allclose(sigmoid(x), 1.0 / (1.0 + np.exp(-x)), atol=1e-12)


def test_grad_check_quadratic():
    rng = stream_rng(3, "quad")
    p0 = rng.standard_normal(6)

    def loss_fn(params):
        p = params["p"]
        return float(np.sum(p * p)), {"p": 2.0 * p}

    report = finite_diff_grad_check(loss_fn, {"p": p0}, h=1e-5, tolerance=1e-8)
    assert report.passed
    assert report.max_rel_error < 1e-8
    assert report.n_checked == 6


def test_grad_check_detects_wrong_gradient():
    def loss_fn(params):
        p = params["p"]
        return float(np.sum(p * p)), {"p": 3.0 * p}  # wrong on purpose

    report = finite_diff_grad_check(
        loss_fn, {"p": np.ones(3)}, h=1e-5, tolerance=1e-4
    )
    assert not report.passed


def test_grad_check_h_range_enforced():
    def loss_fn(params):
        return 0.0, {"p": np.zeros(1)}

    with pytest.raises(ConfigError):
        finite_diff_grad_check(loss_fn, {"p": np.zeros(1)}, h=1e-7)
    with pytest.raises(ConfigError):
        finite_diff_grad_check(loss_fn, {"p": np.zeros(1)}, h=1e-3)


def test_adam_reduces_quadratic_loss():
    params = {"p": np.array([5.0, -3.0, 2.0])}
    opt = Adam(lr=0.1)
    for _ in range(300):
        g = {"p": 2.0 * params["p"]}
        opt.step(params, g)
    assert np.sum(params["p"] ** 2) < 1e-4
