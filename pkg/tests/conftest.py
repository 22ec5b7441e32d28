import numpy as np
import pytest

from pairinfer.geometry import TangentFrame, center_columns, ones_complement_basis, truncate_rank


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_lowrank(rng, d1, d2, r, scale=1.0):
    """Column-centred rank-r matrix with iid Gaussian factors."""
    return scale * center_columns(rng.standard_normal((d1, r)) @ rng.standard_normal((d2, r)).T)


def random_frame(rng, d1, d2, r) -> TangentFrame:
    return truncate_rank(random_lowrank(rng, d1, d2, r), r)[1]


def explicit_tangent_basis(frame):
    """Literal spanning set {U e_k a^T} and {Q e_c v_k^T} as columns of a (d1*d2, .) matrix."""
    d1, d2, r = frame.d1, frame.d2, frame.rank
    Q = ones_complement_basis(d1)
    cols = []
    for k in range(r):
        for u in range(d2):
            E = np.zeros((d1, d2))
            E[:, u] = frame.U[:, k]
            cols.append(E.ravel())
    for k in range(r):
        for c in range(d1 - 1):
            cols.append(np.outer(Q[:, c], frame.V[:, k]).ravel())
    return np.column_stack(cols)


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (passed, detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
