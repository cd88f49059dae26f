"""Matérn kernels with roughness 0.5 and 2.5 and their state-space form."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dlm import DlmSpec, oracle_cap

SUPPORTED_ROUGHNESS = (0.5, 2.5)


@dataclass(frozen=True)
class MaternParams:
    variance: float
    range: float
    roughness: float = 2.5

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        if not self.range > 0:
            raise ValueError("range must be positive")
        if self.roughness not in SUPPORTED_ROUGHNESS:
            raise ValueError(f"roughness must be one of {SUPPORTED_ROUGHNESS}")

    @property
    def state_dim(self) -> int:
        return 1 if self.roughness == 0.5 else 3


@dataclass(frozen=True)
class SortedInputs:
    """Nondecreasing inputs plus the map back to the original order.

    ``values[s] == original[perm[s]]``.
    """

    values: np.ndarray
    perm: np.ndarray

    @classmethod
    def from_unordered(cls, d) -> "SortedInputs":
        d = np.asarray(d, dtype=float).ravel()
        perm = np.argsort(d, kind="stable")
        return cls(values=d[perm], perm=perm)

    @property
    def rank(self) -> np.ndarray:
        """Sorted position of every original entry (inverse of ``perm``)."""
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv

    def __len__(self):
        return self.values.size


def correlation(roughness: float, range_: float, d) -> np.ndarray:
    d = np.abs(np.asarray(d, dtype=float))
    if roughness == 0.5:
        return np.exp(-d / range_)
    if roughness == 2.5:
        a = np.sqrt(5.0) * d / range_
        return (1.0 + a + a * a / 3.0) * np.exp(-a)
    raise ValueError(f"roughness must be one of {SUPPORTED_ROUGHNESS}")


def kernel(params: MaternParams, d):
    """Covariance ``sigma^2 c(d)`` at distance ``d >= 0``."""
    out = params.variance * correlation(params.roughness, params.range, d)
    return float(out) if np.ndim(out) == 0 else out


def kernel_matrix(params: MaternParams, a, b=None) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    b = a if b is None else np.asarray(b, dtype=float).ravel()
    cap = oracle_cap()
    if a.size > cap or b.size > cap:
        raise ValueError(f"kernel_matrix size exceeds the oracle cap {cap}")
    return kernel(params, np.abs(a[:, None] - b[None, :]))


def stationary_covariance(params: MaternParams) -> np.ndarray:
    s2 = params.variance
    if params.roughness == 0.5:
        return np.array([[s2]])
    lam = np.sqrt(5.0) / params.range
    return s2 * np.array(
        [
            [1.0, 0.0, -lam**2 / 3.0],
            [0.0, lam**2 / 3.0, 0.0],
            [-lam**2 / 3.0, 0.0, lam**4],
        ]
    )


def transition(params: MaternParams, delta) -> np.ndarray:
    """State transition ``exp(A delta)`` for a batch of nonnegative steps.

    For roughness 2.5 the drift ``A`` is a companion matrix with the triple
    eigenvalue ``-lam``, so ``(A + lam I)^3 = 0`` and the exponential is a
    quadratic polynomial in ``N = A + lam I``.
    """
    delta = np.asarray(delta, dtype=float)
    if params.roughness == 0.5:
        return np.exp(-delta / params.range)[:, None, None]
    lam = np.sqrt(5.0) / params.range
    A = np.array(
        [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-(lam**3), -3 * lam**2, -3 * lam]]
    )
    N1 = A + lam * np.eye(3)
    N2 = N1 @ N1
    e = np.exp(-lam * delta)[:, None, None]
    dd = delta[:, None, None]
    return e * (np.eye(3) + dd * N1 + 0.5 * dd * dd * N2)


def build_dlm(params: MaternParams, inputs: SortedInputs | np.ndarray, nugget: float = 0.0) -> DlmSpec:
    """DLM whose observation covariance is the kernel matrix on sorted inputs.

    ``W_t = P - G_t P G_t'`` with ``P`` the stationary state covariance, and
    ``W_1 = P``.  Repeated inputs give ``G_t = I`` and ``W_t = 0``.
    """
    values = inputs.values if isinstance(inputs, SortedInputs) else np.asarray(inputs, dtype=float)
    if values.size < 1:
        raise ValueError("need at least one input")
    delta = np.diff(values)
    if np.any(delta < 0):
        raise ValueError("inputs must be nondecreasing")
    if nugget < 0:
        raise ValueError("nugget must be nonnegative")
    n, q = values.size, params.state_dim
    P = stationary_covariance(params)
    G = np.empty((n, q, q))
    G[0] = np.eye(q)
    G[1:] = transition(params, delta)
    W = np.empty((n, q, q))
    W[0] = P
    W[1:] = P - G[1:] @ P @ G[1:].transpose(0, 2, 1)
    W[1:] = 0.5 * (W[1:] + W[1:].transpose(0, 2, 1))
    W[1:][delta == 0] = 0.0
    F = np.zeros((n, q))
    F[:, 0] = 1.0
    return DlmSpec(F=F, G=G, W=W, V=np.full(n, float(nugget)))


def sample_path(params: MaternParams, x, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Exact draws of ``z(x)`` from the zero-mean GP, in the order of ``x``.

    Runs the state recursion forward on the sorted inputs, so the cost is
    linear in ``len(x)``.  With ``size`` the result has shape ``(size, n)``.
    """
    inputs = SortedInputs.from_unordered(x)
    spec = build_dlm(params, inputs)
    n, q = spec.n_steps, spec.state_dim
    # eigh tolerates the singular W_t of repeated inputs
    vals, vecs = np.linalg.eigh(spec.W)
    roots = vecs * np.sqrt(np.clip(vals, 0.0, None))[:, None, :]
    m = 1 if size is None else size
    eps = rng.standard_normal((n, q, m))
    state = np.zeros((q, m))
    path = np.empty((m, n))
    for t in range(n):
        state = spec.G[t] @ state + roots[t] @ eps[t]
        path[:, t] = state[0]
    out = np.empty_like(path)
    out[:, inputs.perm] = path
    return out[0] if size is None else out
