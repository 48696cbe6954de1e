import numpy as np
import pytest

from disttpca.runtime import MachineState
from disttpca.tensor import multi_mode_product, qr_orthonormalize


def random_basis(rng, p, r):
    return qr_orthonormalize(rng.standard_normal((p, r)))


def low_rank_tensor(rng, dims, ranks, scale=10.0):
    """Exact Tucker tensor with orthonormal factors and a well-conditioned random core."""
    factors = [random_basis(rng, p, r) for p, r in zip(dims, ranks)]
    core = scale * rng.standard_normal(tuple(ranks))
    return multi_mode_product(core, factors), core, factors


def exact_machines(tensors, factors):
    return [MachineState(i, t, init_factors=[f.copy() for f in factors]) for i, t in enumerate(tensors)]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: dict[str, str] = {}


def record_outcome(key: str, label: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[key] = f"[{key}] {label}: {'PASS' if passed else 'FAIL'} ({detail})"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance summary")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
