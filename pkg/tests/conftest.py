import numpy as np
import pytest

from lnnplan import diff_core as dc
from lnnplan import models as md


def affine_net(n_in, n_out, W=None, b=None, activation="tanh"):
    W = np.zeros((n_out, n_in)) if W is None else np.asarray(W, float)
    b = np.zeros(n_out) if b is None else np.asarray(b, float)
    return dc.Mlp([n_in, n_out], np.concatenate([W.ravel(), b]), activation)


def identity_lnn(n, epsilon=1e-6, B=None):
    """Y = I, V = 0, no force net."""
    S, diag = md._tril_layout(n)
    y = affine_net(n, len(diag), b=diag)
    v = affine_net(n, 1)
    B = np.eye(n) if B is None else B
    return md.LnnModel(y, v, None, B, epsilon, softplus_diag=False)


def random_lnn(n, seed=0, hidden=(8,), kind="LNN_FD", B=None):
    B = np.eye(n) if B is None else B
    return md.init_lnn(n, B, hidden, seed=seed, kind=kind)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
