"""Dynamic linear models and the forward Kalman filter.

A DLM with scalar observations is

    y_t     = F_t theta_t + v_t,          v_t ~ N(0, V_t)
    theta_t = G_t theta_{t-1} + w_t,      w_t ~ N(0, W_t)

with theta_1 ~ N(0, W_1).  All per-step system matrices are stored as
stacked arrays so that the recursions can run in compiled loops.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numba import njit

DEFAULT_ORACLE_CAP = 4000


def oracle_cap() -> int:
    """Largest size allowed for dense oracle constructions (env ``IKFCG_ORACLE_CAP``)."""
    return int(os.environ.get("IKFCG_ORACLE_CAP", DEFAULT_ORACLE_CAP))


@dataclass(frozen=True)
class DlmSpec:
    """Per-step system matrices of a DLM.

    Attributes
    ----------
    F : ndarray, shape (N, q)
        Observation row vectors.
    G : ndarray, shape (N, q, q)
        State transition matrices; ``G[0]`` is never used.
    W : ndarray, shape (N, q, q)
        State noise covariances; ``W[0]`` is the initial state covariance.
    V : ndarray, shape (N,)
        Observation noise variances.
    """

    F: np.ndarray
    G: np.ndarray
    W: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        F = np.ascontiguousarray(self.F, dtype=float)
        G = np.ascontiguousarray(self.G, dtype=float)
        W = np.ascontiguousarray(self.W, dtype=float)
        V = np.ascontiguousarray(self.V, dtype=float)
        if F.ndim != 2:
            raise ValueError("F must have shape (N, q)")
        n, q = F.shape
        if n < 1 or q < 1:
            raise ValueError("need N >= 1 and q >= 1")
        if G.shape != (n, q, q) or W.shape != (n, q, q):
            raise ValueError(f"G and W must have shape {(n, q, q)}")
        if V.shape != (n,):
            raise ValueError(f"V must have shape {(n,)}")
        if np.any(V < 0) or not np.all(np.isfinite(V)):
            raise ValueError("noise variances V must be finite and nonnegative")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "V", V)

    @property
    def n_steps(self) -> int:
        return self.F.shape[0]

    @property
    def state_dim(self) -> int:
        return self.F.shape[1]

    def check(self) -> None:
        """Raise ``ValueError`` if some ``W_t`` is not symmetric PSD."""
        W = self.W
        scale = np.abs(W).max(axis=(1, 2))
        asym = np.abs(W - W.transpose(0, 2, 1)).max(axis=(1, 2))
        if np.any(asym > 1e-12 * np.maximum(scale, 1e-300)):
            raise ValueError("W_t must be symmetric")
        trace = np.trace(W, axis1=1, axis2=2)
        eig_min = np.linalg.eigvalsh(0.5 * (W + W.transpose(0, 2, 1)))[:, 0]
        if np.any(eig_min < -1e-10 * np.abs(trace)):
            raise ValueError("W_t must be positive semidefinite")

    def with_noise(self, V) -> "DlmSpec":
        """Copy of this spec with observation variances replaced by ``V``."""
        V = np.broadcast_to(np.asarray(V, dtype=float), (self.n_steps,))
        return DlmSpec(self.F, self.G, self.W, V.copy())


@dataclass(frozen=True)
class KfCache:
    """Kalman filter output for every step (arrays indexed by t - 1)."""

    b: np.ndarray  # (N, q) one-step state predictive means
    B: np.ndarray  # (N, q, q) one-step state predictive covariances
    f: np.ndarray  # (N,) observation predictive means
    Q: np.ndarray  # (N,) observation predictive variances
    K: np.ndarray  # (N, q) Kalman gains
    m: np.ndarray  # (N, q) filtered means
    C: np.ndarray  # (N, q, q) filtered covariances


@njit(cache=True)
def _kf_forward(F, G, W, V, y, b, B, f, Q, K, m, C):
    n, q = F.shape
    for t in range(n):
        if t == 0:
            for i in range(q):
                b[0, i] = 0.0
                for j in range(q):
                    B[0, i, j] = W[0, i, j]
        else:
            # b_t = G_t m_{t-1};  B_t = G_t C_{t-1} G_t' + W_t
            for i in range(q):
                s = 0.0
                for j in range(q):
                    s += G[t, i, j] * m[t - 1, j]
                b[t, i] = s
            for i in range(q):
                for j in range(q):
                    s = 0.0
                    for k in range(q):
                        gc = 0.0
                        for l in range(q):
                            gc += G[t, i, l] * C[t - 1, l, k]
                        s += gc * G[t, j, k]
                    B[t, i, j] = s + W[t, i, j]
            for i in range(q):
                for j in range(i + 1, q):
                    avg = 0.5 * (B[t, i, j] + B[t, j, i])
                    B[t, i, j] = avg
                    B[t, j, i] = avg
        # f_t = F_t b_t;  Q_t = F_t B_t F_t' + V_t
        ft = 0.0
        for i in range(q):
            ft += F[t, i] * b[t, i]
        qt = V[t]
        for i in range(q):
            bf = 0.0
            for j in range(q):
                bf += B[t, i, j] * F[t, j]
            K[t, i] = bf
            qt += F[t, i] * bf
        if not qt > 1e-300:
            return t
        f[t] = ft
        Q[t] = qt
        for i in range(q):
            K[t, i] /= qt
        innov = y[t] - ft
        for i in range(q):
            m[t, i] = b[t, i] + K[t, i] * innov
        # C_t = B_t - Q_t K_t K_t'
        for i in range(q):
            for j in range(q):
                C[t, i, j] = B[t, i, j] - qt * K[t, i] * K[t, j]
        for i in range(q):
            for j in range(i + 1, q):
                avg = 0.5 * (C[t, i, j] + C[t, j, i])
                C[t, i, j] = avg
                C[t, j, i] = avg
    return -1


def kf_forward(spec: DlmSpec, y=None) -> KfCache:
    """Run the Kalman filter with ``b_1 = 0`` and ``B_1 = W_1``.

    ``y`` defaults to zeros; the second-order quantities ``B``, ``Q``, ``K``
    and ``C`` do not depend on it.

    Raises
    ------
    FloatingPointError
        If some innovation variance ``Q_t`` is not positive.  Add noise (or
        use the jittered operator in :mod:`ikfcg.ikf`) in that case.
    """
    n, q = spec.n_steps, spec.state_dim
    if y is None:
        y = np.zeros(n)
    else:
        y = np.ascontiguousarray(y, dtype=float)
        if y.shape != (n,):
            raise ValueError(f"y must have length {n}")
    b = np.empty((n, q))
    B = np.empty((n, q, q))
    f = np.empty(n)
    Q = np.empty(n)
    K = np.empty((n, q))
    m = np.empty((n, q))
    C = np.empty((n, q, q))
    bad = _kf_forward(spec.F, spec.G, spec.W, spec.V, y, b, B, f, Q, K, m, C)
    if bad >= 0:
        raise FloatingPointError(
            f"innovation variance Q_{bad + 1} is not positive; the model is "
            "singular, add jitter"
        )
    return KfCache(b=b, B=B, f=f, Q=Q, K=K, m=m, C=C)


def whiten(spec: DlmSpec, cache: KfCache, y) -> np.ndarray:
    """Return ``L^{-1} y`` where ``L L' = cov(y)``.

    ``cache`` must come from ``kf_forward(spec, y)``; the standardized
    innovations are ``(y_t - f_t) / sqrt(Q_t)``.
    """
    y = np.asarray(y, dtype=float)
    return (y - cache.f) / np.sqrt(cache.Q)


def dense_covariance(spec: DlmSpec) -> np.ndarray:
    """Dense ``cov(y_{1:N})`` by propagating state cross-covariances.

    Test oracle; O(q^2 N^2) time and O(N^2) memory, capped by
    :func:`oracle_cap`.
    """
    n, q = spec.n_steps, spec.state_dim
    if n > oracle_cap():
        raise ValueError(f"N={n} exceeds the dense oracle cap {oracle_cap()}")
    F, G, W = spec.F, spec.G, spec.W
    # cols[:, s] = cov(theta_t, y_s) for the current t and every s <= t
    cols = np.zeros((q, n))
    P = W[0].copy()
    out = np.empty((n, n))
    for t in range(n):
        if t > 0:
            P = G[t] @ P @ G[t].T + W[t]
            cols[:, :t] = G[t] @ cols[:, :t]
        cols[:, t] = P @ F[t]
        row = F[t] @ cols[:, : t + 1]
        out[t, : t + 1] = row
        out[: t + 1, t] = row
    out[np.diag_indices(n)] += spec.V
    return out
