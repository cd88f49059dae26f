"""Dense-oracle equivalence checks at small sizes.

Every check compares a linear-cost computation with the same quantity built
from an explicit covariance matrix and reports the largest scaled error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dlm import DlmSpec, dense_covariance, kf_forward, whiten
from .ikf import IkfOperator
from .matern import MaternParams, SortedInputs, build_dlm, kernel_matrix
from .structured import (
    CgConfig,
    Interaction,
    SparseLoadings,
    StructuredCov,
    cg_solve,
    dense_predict,
    predict,
)


@dataclass(frozen=True)
class Check:
    name: str
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error <= self.tol)


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def random_dlm(rng: np.random.Generator, n: int, q: int, max_radius: float = 1.2,
               noise: str = "mixed") -> DlmSpec:
    """Random DLM with SPD ``W_t`` and spectral radius of ``G_t`` at most ``max_radius``.

    ``noise`` is ``"zero"`` (all ``V_t = 0``), ``"positive"`` (uniform on
    [0.01, 1]) or ``"mixed"`` (each ``V_t`` zero with probability 1/2).
    """
    F = rng.standard_normal((n, q))
    G = rng.standard_normal((n, q, q))
    radius = np.abs(np.linalg.eigvals(G)).max(axis=1)
    G *= (rng.uniform(0.2, max_radius, n) / radius)[:, None, None]
    B = rng.standard_normal((n, q, q))
    W = B @ B.transpose(0, 2, 1) / q + 0.05 * np.eye(q)
    V = rng.uniform(0.01, 1.0, n)
    if noise == "zero":
        V[:] = 0.0
    elif noise == "mixed":
        V[rng.random(n) < 0.5] = 0.0
    elif noise != "positive":
        raise ValueError(f"unknown noise mode {noise!r}")
    return DlmSpec(F=F, G=G, W=W, V=V)


def _perturbed(op: IkfOperator, delta: float, rng) -> IkfOperator:
    if delta:
        t = int(rng.integers(op.n))
        Q = op.Q.copy()
        Q[t] += delta
        op.sqrtQ = np.sqrt(Q)
    return op


def _scaled(a, b, scale) -> float:
    return float(np.abs(a - b).max() / max(scale, 1e-300))


def check_sigma_matvec(seed: int, n_cases: int = 20, n_max: int = 300, perturb: float = 0.0) -> Check:
    worst = 0.0
    for case in range(n_cases):
        rng = rng_for(seed, 1, case)
        q = int(rng.integers(1, 4))
        n = int(rng.integers(2, n_max + 1))
        spec = random_dlm(rng, n, q)
        op = _perturbed(IkfOperator(spec), perturb, rng)
        S = dense_covariance(spec)
        u = rng.standard_normal(n)
        scale = np.abs(S).sum(axis=1).max() * np.abs(u).max()
        worst = max(worst, _scaled(op.sigma_matvec(u), S @ u, scale))
    return Check("sigma_matvec", worst, 1e-8)


def check_cholesky(seed: int, n: int = 200, n_entries: int = 200, perturb: float = 0.0) -> Check:
    rng = rng_for(seed, 2)
    spec = random_dlm(rng, n, 3, max_radius=1.0, noise="positive")
    op = _perturbed(IkfOperator(spec), perturb, rng)
    L = np.linalg.cholesky(dense_covariance(spec))
    rows = rng.integers(1, n + 1, n_entries)
    cols = np.array([rng.integers(1, r + 1) for r in rows])
    got = np.array([op.cholesky_entry(int(r), int(c)) for r, c in zip(rows, cols)])
    want = L[rows - 1, cols - 1]
    return Check("cholesky_entry", _scaled(got, want, np.abs(L).max()), 1e-8)


def check_roundtrips(seed: int, n: int = 300) -> Check:
    rng = rng_for(seed, 3)
    spec = random_dlm(rng, n, 2, max_radius=1.0, noise="positive")
    op = IkfOperator(spec)
    u = rng.standard_normal(n)
    back = op.ltri_transpose_solve(op.ltri_transpose_matvec(u))
    white = whiten(spec, kf_forward(spec, op.ltri_matvec(u)), op.ltri_matvec(u))
    err = max(np.abs(back - u).max(), np.abs(white - u).max())
    return Check("triangular_roundtrip", float(err), 1e-8)


def check_jitter_invariance(seed: int, n: int = 500, gamma: float = 0.1) -> Check:
    """Noise-free Matérn covariance through the jittered filter."""
    rng = rng_for(seed, 4)
    params = MaternParams(1.0, gamma, 2.5)
    inputs = SortedInputs.from_unordered(rng.uniform(0.0, 1.0, n))
    spec = build_dlm(params, inputs)
    u = rng.standard_normal(n)
    want = kernel_matrix(params, inputs.values) @ u
    err = 0.0
    for v in (0.01, 0.1, 1.0):
        got = IkfOperator(spec, jitter=v).sigma_matvec(u)
        err = max(err, float(np.abs(got - want).max()))
    return Check("jitter_invariance", err, 1e-5)


def random_structured(rng, n_rows: int = 150, n_inputs: int = 120, n_factors: int = 2,
                      nugget: float = 0.05) -> StructuredCov:
    its = []
    for _ in range(n_factors):
        params = MaternParams(rng.uniform(0.5, 2.0), rng.uniform(0.2, 1.0), [0.5, 2.5][int(rng.integers(2))])
        inputs = SortedInputs.from_unordered(rng.uniform(-1.0, 1.0, n_inputs))
        nnz = 3 * n_rows
        A = SparseLoadings.from_triplets(rng.integers(0, n_rows, nnz), rng.integers(0, n_inputs, nnz),
                                         rng.uniform(-1.0, 1.0, nnz), n_rows, n_inputs)
        its.append(Interaction.build(params, inputs, A))
    return StructuredCov(its, nugget, n_rows)


def check_cg(seed: int, n_cases: int = 5) -> Check:
    worst = 0.0
    cfg = CgConfig(rel_tol=1e-12, max_iter=5000)
    for case in range(n_cases):
        rng = rng_for(seed, 5, case)
        cov = random_structured(rng)
        y = rng.standard_normal(cov.n_rows)
        want = np.linalg.solve(cov.dense(), y)
        got = cg_solve(cov, y, cfg).x
        worst = max(worst, _scaled(got, want, np.abs(want).max()))
    return Check("cg_vs_dense", worst, 1e-6)


def check_predictive(seed: int, n_cases: int = 3) -> Check:
    worst = 0.0
    cfg = CgConfig(rel_tol=1e-12, max_iter=5000)
    for case in range(n_cases):
        rng = rng_for(seed, 6, case)
        cov = random_structured(rng)
        y = rng.standard_normal(cov.n_rows)
        d_star = np.linspace(-1.0, 1.0, 25)
        got = predict(cov, y, 0, d_star, cfg)
        want = dense_predict(cov, y, 0, d_star)
        scale = cov.interactions[0].params.variance
        worst = max(worst, _scaled(got.mean, want.mean, scale), _scaled(got.variance, want.variance, scale))
    return Check("predictive_vs_dense", worst, 1e-6)


def check_quadratic_form(seed: int, n_cases: int = 5) -> Check:
    worst = 0.0
    cfg = CgConfig(rel_tol=1e-12, max_iter=5000)
    for case in range(n_cases):
        rng = rng_for(seed, 7, case)
        cov = random_structured(rng)
        y = rng.standard_normal(cov.n_rows)
        want = y @ np.linalg.solve(cov.dense(), y)
        got = y @ cg_solve(cov, y, cfg).x
        worst = max(worst, abs(got - want) / abs(want))
    return Check("quadratic_form", float(worst), 1e-6)


def run_all(seed: int = 0, perturb: float = 0.0) -> list[Check]:
    """All suites; ``perturb`` adds that amount to one ``Q_t`` of the IKF checks."""
    return [
        check_sigma_matvec(seed, perturb=perturb),
        check_cholesky(seed, perturb=perturb),
        check_roundtrips(seed),
        check_jitter_invariance(seed),
        check_cg(seed),
        check_predictive(seed),
        check_quadratic_form(seed),
    ]
