import numpy as np
import pytest

from bilevel_analysis.imgops import FilterBank


def pytest_addoption(parser):
    parser.addoption("--run-long", action="store_true", default=False,
                     help="also run tests marked longtest (many hours)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-long"):
        return
    skip = pytest.mark.skip(reason="long test; pass --run-long to run it")
    for item in items:
        if "longtest" in item.keywords:
            item.add_marker(skip)


def dense_W(filters, N):
    """Reference ``W`` built one row at a time from the correlation definition."""
    filters = np.asarray(filters, dtype=np.float64)
    K, f, _ = filters.shape
    M = N - f + 1
    W = np.zeros((K * M * M, N * N))
    for k in range(K):
        for i in range(M):
            for j in range(M):
                img = np.zeros((N, N))
                img[i:i + f, j:j + f] = filters[k]
                W[(k * M + i) * M + j] = img.ravel()
    return W


def random_bank(rng, K=8, f=3, zero_mean=True):
    F = rng.standard_normal((K, f, f))
    if zero_mean:
        F -= F.mean(axis=(1, 2), keepdims=True)
    F /= np.linalg.norm(F, axis=(1, 2), keepdims=True)
    return FilterBank(F)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def dense_kkt(filters, N, c, y, beta):
    """Dense KKT solve for sign pattern ``c``; returns ``(x, nu_compact, A, zero_rows)``."""
    W = dense_W(filters, N)
    c = np.asarray(c).ravel()
    zero = np.flatnonzero(c == 0)
    S0W = W[zero]
    n, m = N * N, len(zero)
    A = np.block([[np.eye(n), S0W.T], [S0W, np.zeros((m, m))]])
    b = np.concatenate([y.ravel() - beta * W.T @ c, np.zeros(m)])
    sol = np.linalg.solve(A, b)
    return sol[:n], sol[n:], A, zero


def dense_gradient(filters, N, c, y, x_true, beta):
    """Loss and its filter gradient by differentiating the dense KKT system."""
    filters = np.asarray(filters, dtype=np.float64)
    x, nu, A, zero = dense_kkt(filters, N, c, y, beta)
    n = N * N
    e = x - np.ravel(x_true)
    q = np.linalg.solve(A, np.concatenate([e, np.zeros(len(zero))]))
    z = np.concatenate([x, nu])
    c = np.asarray(c).ravel().astype(float)
    grad = np.zeros_like(filters)
    for idx in np.ndindex(*filters.shape):
        E = np.zeros_like(filters)
        E[idx] = 1.0
        dW = dense_W(E, N)
        dA = np.zeros_like(A)
        dA[:n, n:] = dW[zero].T
        dA[n:, :n] = dW[zero]
        db = np.concatenate([-beta * dW.T @ c, np.zeros(len(zero))])
        grad[idx] = -z @ dA @ q + db @ q
    return 0.5 * e @ e, grad


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one pass/fail line; the lines are printed at the end of the run."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
