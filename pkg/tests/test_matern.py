import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm
from scipy.special import gamma as gamma_fn, kv

from ikfcg.dlm import dense_covariance
from ikfcg.matern import (
    MaternParams,
    SortedInputs,
    build_dlm,
    correlation,
    kernel,
    kernel_matrix,
    sample_path,
    stationary_covariance,
    transition,
)


def bessel_matern(nu, range_, d):
    # general Matérn in the sqrt(2 nu) d / range parameterization
    d = np.asarray(d, dtype=float)
    a = np.sqrt(2 * nu) * d / range_
    out = np.ones_like(a)
    nz = a > 0
    out[nz] = 2 ** (1 - nu) / gamma_fn(nu) * a[nz] ** nu * kv(nu, a[nz])
    return out


@pytest.mark.parametrize("nu", [0.5, 2.5])
def test_closed_form_matches_bessel_form(nu):
    d = np.linspace(0, 4, 50)
    np.testing.assert_allclose(correlation(nu, 0.7, d), bessel_matern(nu, 0.7, d), rtol=1e-10, atol=1e-14)


def test_kernel_values():
    p = MaternParams(2.0, 1.0, 0.5)
    assert kernel(p, 0.0) == 2.0
    assert kernel(p, 1.0) == pytest.approx(2.0 * np.exp(-1.0))
    a = np.sqrt(5.0)
    assert kernel(MaternParams(1.0, 1.0, 2.5), 1.0) == pytest.approx((1 + a + a * a / 3) * np.exp(-a))


def drift(range_):
    lam = np.sqrt(5.0) / range_
    return np.array([[0, 1, 0], [0, 0, 1], [-lam**3, -3 * lam**2, -3 * lam]])


@pytest.mark.parametrize("range_", [0.1, 1.0, 7.0])
def test_transition_is_matrix_exponential(range_):
    p = MaternParams(1.0, range_, 2.5)
    deltas = np.array([0.0, 0.01, 0.3, 2.0])
    for G, dt in zip(transition(p, deltas), deltas):
        np.testing.assert_allclose(G, expm(drift(range_) * dt), rtol=1e-10, atol=1e-12)


def test_stationary_covariance_solves_lyapunov():
    p = MaternParams(1.5, 0.8, 2.5)
    A, P = drift(0.8), stationary_covariance(p)
    R = A @ P + P @ A.T
    # only the driven component carries diffusion
    R[2, 2] = 0.0
    np.testing.assert_allclose(R, 0.0, atol=1e-9 * np.abs(P).max())
    assert np.all(np.linalg.eigvalsh(P) > 0)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 1000),
    n=st.integers(1, 60),
    nu=st.sampled_from([0.5, 2.5]),
    range_=st.floats(0.05, 5.0),
    var=st.floats(0.1, 10.0),
)
def test_state_space_covariance_equals_kernel_matrix(seed, n, nu, range_, var):
    rng = np.random.default_rng(seed)
    p = MaternParams(var, range_, nu)
    x = np.sort(rng.uniform(0, 3, n))
    np.testing.assert_allclose(dense_covariance(build_dlm(p, x)), kernel_matrix(p, x),
                               rtol=1e-8, atol=1e-10 * var)


def test_repeated_inputs_have_zero_state_noise():
    p = MaternParams(1.0, 0.5, 2.5)
    x = np.array([0.0, 0.2, 0.2, 0.2, 1.0])
    spec = build_dlm(p, x)
    assert np.all(spec.W[2:4] == 0.0)
    assert np.array_equal(spec.G[2], np.eye(3))
    np.testing.assert_allclose(dense_covariance(spec), kernel_matrix(p, x), atol=1e-12)


def test_build_dlm_rejects_unsorted_and_negative_nugget():
    p = MaternParams(1.0, 1.0)
    with pytest.raises(ValueError):
        build_dlm(p, np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        build_dlm(p, np.array([0.0, 1.0]), nugget=-1.0)


def test_parameter_validation():
    with pytest.raises(ValueError):
        MaternParams(0.0, 1.0)
    with pytest.raises(ValueError):
        MaternParams(1.0, -1.0)
    with pytest.raises(ValueError):
        MaternParams(1.0, 1.0, 1.5)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=40))
def test_sorted_inputs_permutation(values):
    s = SortedInputs.from_unordered(values)
    x = np.asarray(values)
    assert np.array_equal(s.values, x[s.perm])
    assert np.all(np.diff(s.values) >= 0)
    assert np.array_equal(s.values[s.rank], x)


@pytest.mark.parametrize("nu", [0.5, 2.5])
def test_sample_path_covariance(nu):
    p = MaternParams(2.0, 0.7, nu)
    x = np.array([0.3, -1.0, 0.31, 2.0, 0.3])
    draws = sample_path(p, x, np.random.default_rng(5), size=100_000)
    assert draws.shape == (100_000, 5)
    # standard error of a covariance entry is about sqrt(2) * 2 / sqrt(1e5)
    np.testing.assert_allclose(np.cov(draws.T), kernel_matrix(p, x), atol=0.05)
    np.testing.assert_array_equal(draws[:, 0], draws[:, 4])


def test_kernel_matrix_cap(monkeypatch):
    monkeypatch.setenv("IKFCG_ORACLE_CAP", "5")
    with pytest.raises(ValueError):
        kernel_matrix(MaternParams(1.0, 1.0), np.zeros(6))


def test_reference_values():
    assert kernel(MaternParams(1.0, 1.0, 0.5), 1.0) == pytest.approx(0.367879, abs=1e-6)
    assert kernel(MaternParams(1.0, 0.1, 2.5), 0.1) == pytest.approx(0.5240, abs=5e-5)
    assert kernel_matrix(MaternParams(4.0, 1.0), [0.3]).tolist() == [[4.0]]


def test_exponential_dlm_by_hand():
    spec = build_dlm(MaternParams(1.0, 1.0, 0.5), np.array([0.0, np.log(2.0)]))
    assert spec.G[1, 0, 0] == pytest.approx(0.5)
    assert spec.W[1, 0, 0] == pytest.approx(0.75)
    assert spec.W[0, 0, 0] == 1.0


@settings(max_examples=50, deadline=None)
@given(range_=st.floats(0.01, 10.0), delta=st.floats(0.0, 50.0), var=st.floats(0.01, 100.0))
def test_state_noise_is_psd(range_, delta, var):
    p = MaternParams(var, range_, 2.5)
    spec = build_dlm(p, np.array([0.0, delta]))
    assert np.linalg.eigvalsh(spec.W[1]).min() >= -1e-10 * var * max(1.0, (np.sqrt(5) / range_) ** 4)


def test_kernel_matrix_permutation_consistency(rng):
    p = MaternParams(1.3, 0.4, 2.5)
    x = rng.uniform(-1, 1, 30)
    s = SortedInputs.from_unordered(x)
    P = np.eye(30)[:, s.perm]  # x = P @ sorted
    np.testing.assert_allclose(kernel_matrix(p, x), P @ kernel_matrix(p, s.values) @ P.T)
    K = kernel_matrix(p, x)
    assert np.array_equal(K, K.T)
    assert K[3, 7] == kernel(p, abs(x[3] - x[7]))
