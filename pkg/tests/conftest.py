import numpy as np
import pytest

from gscpot.model import SystemModel, _as_state, make_product_model, make_regular_bec

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES = []


class QuadraticModel(SystemModel):
    """``G = u.A.u/2`` and ``F = v.B.v/2`` with constant positive definite A, B."""

    def __init__(self, a, b, box=1.0):
        self.a = np.atleast_2d(np.asarray(a, dtype=float))
        self.b = np.atleast_2d(np.asarray(b, dtype=float))
        self.n = self.a.shape[0]
        self.name = f"quadratic(n={self.n})"
        lo, hi = -box * np.ones(self.n), box * np.ones(self.n)
        self.domain_D = (lo, hi)
        self.domain_Dtilde = (lo.copy(), hi.copy())

    def eval_G(self, u):
        u = _as_state(u)
        return 0.5 * np.einsum("...a,ab,...b->...", u, self.a, u)

    def eval_F(self, v):
        v = _as_state(v)
        return 0.5 * np.einsum("...a,ab,...b->...", v, self.b, v)

    def grad_G(self, u):
        return _as_state(u) @ self.a.T

    def grad_F(self, v):
        return _as_state(v) @ self.b.T

    def hess_G(self, u):
        return np.broadcast_to(self.a, _as_state(u).shape[:-1] + self.a.shape).copy()

    def hess_F(self, v):
        return np.broadcast_to(self.b, _as_state(v).shape[:-1] + self.b.shape).copy()

    def config(self):
        return {"type": "quadratic"}


@pytest.fixture
def quadratic():
    return QuadraticModel([[2.0, 0.5], [0.5, 1.0]], [[0.3, 0.0], [0.0, 0.2]])


@pytest.fixture
def bec45():
    return make_regular_bec(3, 6, 0.45)


@pytest.fixture
def bec50():
    return make_regular_bec(3, 6, 0.5)


@pytest.fixture
def product45():
    return make_product_model(make_regular_bec(3, 6, 0.45), make_regular_bec(4, 8, 0.45))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
