import numpy as np
import pytest


def transfer_covariance(spec):
    """cov(y) from theta = T w with T built block by block."""
    n, q = spec.n_steps, spec.state_dim
    T = np.zeros((n * q, n * q))
    for t in range(n):
        phi = np.eye(q)
        for s in range(t, -1, -1):
            T[t * q:(t + 1) * q, s * q:(s + 1) * q] = phi
            phi = phi @ spec.G[s]
    Wd = np.zeros((n * q, n * q))
    for t in range(n):
        Wd[t * q:(t + 1) * q, t * q:(t + 1) * q] = spec.W[t]
    Fd = np.zeros((n, n * q))
    for t in range(n):
        Fd[t, t * q:(t + 1) * q] = spec.F[t]
    M = Fd @ T
    return M @ Wd @ M.T + np.diag(spec.V)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(20240611)))


_criteria = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the end-of-run summary."""
    def record(number, passed, detail):
        _criteria[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        passed, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
