"""Inverse Kalman filter: linear-cost products with a DLM covariance.

With ``Sigma = cov(y_{1:N}) = L L'`` the lower Cholesky factor has entries

    L[t', t] = sqrt(Q_t) * F_{t'} G_{t'} ... G_{t+1} K_t      (t' > t)
    L[t, t]  = sqrt(Q_t)

so ``L' u`` can be accumulated backward with one running row vector and
``L x`` forward with a Kalman-style state recursion.  Neither ever forms
``L``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .dlm import DlmSpec, kf_forward

# models whose noise is below this fraction of the signal variance get jitter
_NOISE_FREE_RTOL = 1e-8
_DEFAULT_JITTER_FRACTION = 0.1


@njit(cache=True)
def _lt_matvec(F, G, K, sqrtQ, u, out):
    # out_t = sqrtQ_t (u_t + g_t K_t);  g_{t-1} = (g_t + u_t F_t) G_t
    n, q = F.shape
    g = np.zeros(q)
    h = np.empty(q)
    for t in range(n - 1, -1, -1):
        s = u[t]
        for i in range(q):
            s += g[i] * K[t, i]
        out[t] = sqrtQ[t] * s
        if t > 0:
            for i in range(q):
                h[i] = g[i] + u[t] * F[t, i]
            for j in range(q):
                s = 0.0
                for i in range(q):
                    s += h[i] * G[t, i, j]
                g[j] = s


@njit(cache=True)
def _lt_solve(F, G, K, sqrtQ, xt, out):
    n, q = F.shape
    g = np.zeros(q)
    h = np.empty(q)
    for t in range(n - 1, -1, -1):
        s = xt[t] / sqrtQ[t]
        for i in range(q):
            s -= g[i] * K[t, i]
        out[t] = s
        if t > 0:
            for i in range(q):
                h[i] = g[i] + s * F[t, i]
            for j in range(q):
                acc = 0.0
                for i in range(q):
                    acc += h[i] * G[t, i, j]
                g[j] = acc


@njit(cache=True)
def _l_matvec(F, G, K, sqrtQ, xt, out):
    # b_t = G_t m_{t-1};  x_t = F_t b_t + sqrtQ_t xt_t;  m_t = b_t + K_t (x_t - F_t b_t)
    n, q = F.shape
    b = np.zeros(q)
    mt = np.zeros(q)
    for t in range(n):
        if t > 0:
            for i in range(q):
                s = 0.0
                for j in range(q):
                    s += G[t, i, j] * mt[j]
                b[i] = s
        fb = 0.0
        for i in range(q):
            fb += F[t, i] * b[i]
        innov = sqrtQ[t] * xt[t]
        out[t] = fb + innov
        for i in range(q):
            mt[i] = b[i] + K[t, i] * innov


@njit(cache=True)
def _sigma_matvec(F, G, K, sqrtQ, u, jitter, work, out):
    _lt_matvec(F, G, K, sqrtQ, u, work)
    _l_matvec(F, G, K, sqrtQ, work, out)
    for t in range(u.shape[0]):
        out[t] -= jitter * u[t]


class IkfOperator:
    """Matrix-free access to ``Sigma``, its Cholesky factor and inverses.

    The Kalman filter runs once, at construction, on the model with every
    ``V_t`` increased by ``jitter``.  :meth:`sigma_matvec` removes the jitter
    again, so its result is the covariance of the original model; the
    triangular operations act on the Cholesky factor of the jittered
    covariance ``Sigma + jitter * I``.

    Parameters
    ----------
    spec : DlmSpec
    jitter : float, optional
        Artificial noise variance.  By default it is ``0.1 * F_1 W_1 F_1'``
        when any ``V_t`` is negligible and ``0`` otherwise.
    robust : bool
        ``False`` allows a noise-free model to be filtered without jitter.
    """

    def __init__(self, spec: DlmSpec, jitter: float | None = None, robust: bool = True):
        scale = float(spec.F[0] @ spec.W[0] @ spec.F[0])
        noise_free = spec.V.min() <= _NOISE_FREE_RTOL * max(scale, 1e-300)
        if jitter is None:
            jitter = _DEFAULT_JITTER_FRACTION * scale if (robust and noise_free) else 0.0
        jitter = float(jitter)
        if jitter < 0:
            raise ValueError("jitter must be nonnegative")
        if robust and noise_free and jitter == 0.0:
            raise ValueError("noise-free model needs jitter > 0 (or robust=False)")
        self.spec = spec
        self.jitter = jitter
        self.robust = robust
        filtered = spec.with_noise(spec.V + jitter) if jitter > 0 else spec
        cache = kf_forward(filtered)
        self.cache = cache
        self.Q = cache.Q
        self.K = cache.K
        self.sqrtQ = np.sqrt(cache.Q)
        self.Q.setflags(write=False)
        self.K.setflags(write=False)
        self.sqrtQ.setflags(write=False)

    @property
    def n(self) -> int:
        return self.spec.n_steps

    def _vec(self, u):
        u = np.ascontiguousarray(u, dtype=float)
        if u.shape != (self.n,):
            raise ValueError(f"expected a vector of length {self.n}")
        return u

    def ltri_transpose_matvec(self, u) -> np.ndarray:
        """``L' u`` by a backward sweep."""
        u = self._vec(u)
        out = np.empty(self.n)
        _lt_matvec(self.spec.F, self.spec.G, self.K, self.sqrtQ, u, out)
        return out

    def ltri_matvec(self, xt) -> np.ndarray:
        """``L xt`` by a forward sweep."""
        xt = self._vec(xt)
        out = np.empty(self.n)
        _l_matvec(self.spec.F, self.spec.G, self.K, self.sqrtQ, xt, out)
        return out

    def ltri_transpose_solve(self, xt) -> np.ndarray:
        """``(L')^{-1} xt`` by a backward sweep."""
        xt = self._vec(xt)
        out = np.empty(self.n)
        _lt_solve(self.spec.F, self.spec.G, self.K, self.sqrtQ, xt, out)
        return out

    def ltri_solve(self, x) -> np.ndarray:
        """``L^{-1} x``: the standardized innovations of the filter."""
        x = self._vec(x)
        y_spec = self.spec.with_noise(self.spec.V + self.jitter)
        return (x - kf_forward(y_spec, x).f) / self.sqrtQ

    def cholesky_entry(self, t_row: int, t_col: int) -> float:
        """Entry ``L[t_row, t_col]`` (1-based indices, ``t_col <= t_row``)."""
        n = self.n
        if not (1 <= t_col <= t_row <= n):
            raise IndexError(f"need 1 <= t_col <= t_row <= {n}")
        s, t = t_col - 1, t_row - 1
        if s == t:
            return float(self.sqrtQ[s])
        v = self.K[s]
        for l in range(s + 1, t + 1):
            v = self.spec.G[l] @ v
        return float(self.sqrtQ[s] * (self.spec.F[t] @ v))

    def sigma_matvec(self, u) -> np.ndarray:
        """``Sigma u`` for the jitter-free model."""
        u = self._vec(u)
        out = np.empty(self.n)
        work = np.empty(self.n)
        _sigma_matvec(self.spec.F, self.spec.G, self.K, self.sqrtQ, u, self.jitter, work, out)
        return out

    def cholesky_dense(self) -> np.ndarray:
        """Assemble ``L`` column by column (small N only)."""
        n = self.n
        out = np.empty((n, n))
        eye = np.eye(n)
        for t in range(n):
            out[:, t] = self.ltri_matvec(eye[t])
        return out


def sigma_matvec(spec: DlmSpec, u, jitter: float | None = None) -> np.ndarray:
    """One-shot ``Sigma u``; builds a throwaway :class:`IkfOperator`."""
    return IkfOperator(spec, jitter=jitter).sigma_matvec(u)
