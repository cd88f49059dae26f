"""Covariance ``Sigma_y = sum_j A_j Sigma_j A_j' + Lambda`` as an operator.

Each ``Sigma_j`` is the covariance of a latent function at sorted inputs and
is applied with the inverse Kalman filter; ``A_j`` are sparse loadings whose
columns are already permuted to sorted-input order.  Conjugate gradients
on top of the operator give the Gaussian-process predictive distribution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .dlm import oracle_cap
from .ikf import IkfOperator
from .matern import MaternParams, SortedInputs, build_dlm, correlation, kernel_matrix

log = logging.getLogger(__name__)

Z95 = 1.959963984540054


@dataclass(frozen=True)
class SparseLoadings:
    """Sparse ``n_rows x n_cols`` loading matrix in sorted-input coordinates."""

    matrix: sp.csr_matrix

    @classmethod
    def from_triplets(cls, rows, cols, values, n_rows: int, n_cols: int) -> "SparseLoadings":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
            raise ValueError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= n_cols):
            raise ValueError("column index out of range")
        m = sp.csr_matrix((np.asarray(values, dtype=float), (rows, cols)), shape=(n_rows, n_cols))
        return cls(m)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def permuted(self, inputs: SortedInputs) -> "SparseLoadings":
        """Reorder columns from original order to sorted-input order."""
        return SparseLoadings(self.matrix[:, inputs.perm].tocsr())

    def rows(self, mask) -> "SparseLoadings":
        """Keep the selected rows; the others become zero."""
        keep = sp.diags(np.asarray(mask, dtype=float))
        return SparseLoadings((keep @ self.matrix).tocsr())

    def matvec(self, x) -> np.ndarray:
        return self.matrix @ x

    def rmatvec(self, u) -> np.ndarray:
        return self.matrix.T @ u


@dataclass(frozen=True)
class Interaction:
    """One latent function: its kernel, sorted inputs, operator and loadings."""

    params: MaternParams
    inputs: SortedInputs
    loadings: SparseLoadings
    operator: IkfOperator

    @classmethod
    def build(cls, params: MaternParams, inputs: SortedInputs, loadings: SparseLoadings,
              jitter: float | None = None) -> "Interaction":
        if loadings.n_cols != len(inputs):
            raise ValueError("loadings must have one column per input")
        op = IkfOperator(build_dlm(params, inputs), jitter=jitter)
        return cls(params, inputs, loadings, op)


@dataclass(frozen=True)
class StructuredCov:
    """``sum_j A_j Sigma_j A_j' + diag(nugget)``.

    ``nugget`` is a positive scalar or a positive vector of length ``n_rows``.
    """

    interactions: tuple
    nugget: float | np.ndarray
    n_rows: int

    def __post_init__(self):
        object.__setattr__(self, "interactions", tuple(self.interactions))
        nug = np.asarray(self.nugget, dtype=float)
        if nug.ndim == 1 and nug.shape != (self.n_rows,):
            raise ValueError("nugget vector must have one entry per row")
        if np.any(nug <= 0):
            raise ValueError("nugget must be positive")
        for it in self.interactions:
            if it.loadings.n_rows != self.n_rows:
                raise ValueError("all loadings must share n_rows")
            if it.operator.n != it.loadings.n_cols:
                raise ValueError("operator size does not match loadings")

    def matvec(self, u) -> np.ndarray:
        return sigma_y_matvec(self, u)

    def with_loadings(self, loadings) -> "StructuredCov":
        """Same kernels and operators with replaced loadings (e.g. a row subset)."""
        its = [Interaction(it.params, it.inputs, a, it.operator)
               for it, a in zip(self.interactions, loadings)]
        return StructuredCov(its, self.nugget, self.n_rows)

    def dense(self) -> np.ndarray:
        """Dense assembly from kernel matrices (oracle scale only)."""
        n = self.n_rows
        if n > oracle_cap():
            raise ValueError(f"n_rows={n} exceeds the dense oracle cap {oracle_cap()}")
        out = np.zeros((n, n))
        for it in self.interactions:
            A = it.loadings.matrix.toarray()
            out += A @ kernel_matrix(it.params, it.inputs.values) @ A.T
        out[np.diag_indices(n)] += self.nugget
        return out


@dataclass(frozen=True)
class CgConfig:
    """Stopping rules for :func:`cg_solve`.

    Posterior variances subtract a quadratic form from the prior variance, so
    their solves use the tighter ``variance_rel_tol``.
    """

    rel_tol: float = 1e-6
    max_iter: int = 1000
    record_residuals: bool = False
    variance_rel_tol: float = 1e-10

    def __post_init__(self):
        if not (0 < self.rel_tol < 1 and 0 < self.variance_rel_tol < 1):
            raise ValueError("tolerances must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    rel_residual: float
    converged: bool
    residuals: list = field(default_factory=list)


@dataclass(frozen=True)
class PredictiveResult:
    d_star: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    converged: np.ndarray

    @property
    def ci_lower(self) -> np.ndarray:
        return self.mean - Z95 * np.sqrt(self.variance)

    @property
    def ci_upper(self) -> np.ndarray:
        return self.mean + Z95 * np.sqrt(self.variance)


def sigma_y_matvec(cov: StructuredCov, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (cov.n_rows,):
        raise ValueError(f"expected a vector of length {cov.n_rows}")
    out = cov.nugget * u
    for it in cov.interactions:
        uj = it.loadings.rmatvec(u)
        xj = it.operator.sigma_matvec(uj)
        out = out + it.loadings.matvec(xj)
    return out


def cg_solve(cov, rhs, cfg: CgConfig = CgConfig(), x0=None) -> CgResult:
    """Unpreconditioned conjugate gradients for ``cov x = rhs``.

    ``cov`` is a :class:`StructuredCov` or anything with ``matvec``/``n_rows``,
    or a dense SPD array.  Stops when ``||r|| <= rel_tol ||rhs||``; running out
    of iterations returns the last iterate with ``converged=False``.
    """
    if isinstance(cov, np.ndarray):
        mat = cov
        matvec = lambda v: mat @ v  # noqa: E731
    else:
        matvec = cov.matvec
    b = np.asarray(rhs, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CgResult(np.zeros_like(b), 0, 0.0, True, [0.0] if cfg.record_residuals else [])
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = r @ r
    history = []
    rel = np.sqrt(rr) / bnorm
    if cfg.record_residuals:
        history.append(rel)
    it = 0
    while rel > cfg.rel_tol and it < cfg.max_iter:
        Ap = matvec(p)
        pAp = p @ Ap
        if not np.isfinite(pAp):
            raise FloatingPointError("non-finite value in conjugate gradient iterate")
        if pAp <= 0:
            raise FloatingPointError("operator is not positive definite")
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
        rel = np.sqrt(rr) / bnorm
        if cfg.record_residuals:
            history.append(rel)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite value in conjugate gradient iterate")
    converged = rel <= cfg.rel_tol
    if not converged:
        log.debug("CG stopped after %d iterations at relative residual %.3g", it, rel)
    return CgResult(x, it, float(rel), bool(converged), history)


def cross_covariance(it: Interaction, d_star) -> np.ndarray:
    """``sigma^2 c(|d_s - d*|)`` for sorted inputs (rows) and test inputs (cols)."""
    d_star = np.atleast_1d(np.asarray(d_star, dtype=float))
    p = it.params
    return p.variance * correlation(p.roughness, p.range, it.inputs.values[:, None] - d_star[None, :])


def _chunks(n, size):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def predictive_mean(cov: StructuredCov, w, j: int, d_star, chunk: int = 64) -> np.ndarray:
    """``k(d*)' A_j' w`` given ``w = Sigma_y^{-1} y``."""
    it = cov.interactions[j]
    d_star = np.atleast_1d(np.asarray(d_star, dtype=float))
    uj = it.loadings.rmatvec(w)
    out = np.empty(d_star.size)
    for sl in _chunks(d_star.size, chunk):
        out[sl] = uj @ cross_covariance(it, d_star[sl])
    return out


def predict(cov: StructuredCov, y, j: int, test_inputs, cfg: CgConfig = CgConfig(),
            w=None, variance: bool = True) -> PredictiveResult:
    """Posterior mean and variance of latent function ``j`` at ``test_inputs``.

    One CG solve gives ``Sigma_y^{-1} y`` (reused if ``w`` is passed) and one
    more per test input gives the variance.
    """
    it = cov.interactions[j]
    d_star = np.atleast_1d(np.asarray(test_inputs, dtype=float))
    if w is None:
        res = cg_solve(cov, y, cfg)
        w = res.x
        mean_ok = res.converged
    else:
        mean_ok = True
    mean = predictive_mean(cov, w, j, d_star)
    prior = it.params.variance
    var = np.full(d_star.size, np.nan)
    converged = np.full(d_star.size, mean_ok)
    if variance:
        var_cfg = replace(cfg, rel_tol=min(cfg.rel_tol, cfg.variance_rel_tol),
                          max_iter=max(cfg.max_iter, 5000))
        for i, ds in enumerate(d_star):
            kj = cross_covariance(it, ds)[:, 0]
            rhs = it.loadings.matvec(kj)
            sol = cg_solve(cov, rhs, var_cfg)
            var[i] = prior - rhs @ sol.x
            converged[i] = converged[i] and sol.converged
        var = _clamp_variance(var, prior)
    if not converged.all():
        log.warning("predict: %d of %d solves did not converge", (~converged).sum(), converged.size)
    return PredictiveResult(d_star=d_star, mean=mean, variance=var, converged=converged)


def _clamp_variance(var, prior):
    floor = -1e-10 * prior
    if np.any(var < floor):
        raise FloatingPointError(f"negative predictive variance {var.min():.3g}")
    return np.maximum(var, 0.0)


def dense_predict(cov: StructuredCov, y, j: int, test_inputs) -> PredictiveResult:
    """Predictive distribution by dense assembly in original input order."""
    d_star = np.atleast_1d(np.asarray(test_inputs, dtype=float))
    n = cov.n_rows
    if n > oracle_cap():
        raise ValueError(f"n_rows={n} exceeds the dense oracle cap {oracle_cap()}")
    S = np.zeros((n, n))
    for k, it in enumerate(cov.interactions):
        # undo the column permutation: A_j and inputs in original order
        A = it.loadings.matrix.toarray()[:, it.inputs.rank]
        d_u = it.inputs.values[it.inputs.rank]
        S += A @ kernel_matrix(it.params, d_u) @ A.T
        if k == j:
            R = A @ kernel_matrix(it.params, d_u, d_star)
    S[np.diag_indices(n)] += cov.nugget
    it = cov.interactions[j]
    chol = np.linalg.cholesky(S)
    Z = np.linalg.solve(chol, R)
    wy = np.linalg.solve(chol, np.asarray(y, dtype=float))
    mean = Z.T @ wy
    var = _clamp_variance(it.params.variance - np.sum(Z * Z, axis=0), it.params.variance)
    return PredictiveResult(d_star=d_star, mean=mean, variance=var,
                            converged=np.ones(d_star.size, dtype=bool))


def dense_log_likelihood(cov: StructuredCov, y) -> float:
    """``log N(y; 0, Sigma_y)`` through a dense Cholesky factorization."""
    y = np.asarray(y, dtype=float)
    S = cov.dense()
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ValueError("assembled covariance is not positive definite") from exc
    z = np.linalg.solve(chol, y)
    n = y.size
    return float(-0.5 * n * np.log(2 * np.pi) - np.sum(np.log(np.diag(chol))) - 0.5 * z @ z)
