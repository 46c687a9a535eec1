import numpy as np
import pytest

from coadapt import numerics as nx
from coadapt.episodes import generate_blobs, split_classes

GRAD_TOL = 1e-4
FD_STEP = 1e-5


def gradient_error(build_loss, arrays: dict[str, np.ndarray]) -> dict[str, float]:
    """Relative error of backward() against central differences, per named input.

    ``build_loss`` maps a dict of tensors to a scalar tensor; ``arrays`` is
    perturbed in place by the finite-difference oracle and restored.
    """
    tracked = {k: nx.Tensor(a, requires_grad=True, name=k) for k, a in arrays.items()}
    analytic = nx.backward(build_loss(tracked), tracked)

    def value():
        return build_loss({k: nx.Tensor(a) for k, a in arrays.items()}).item()

    return {
        k: nx.relative_error(analytic[k], nx.finite_difference_grad(value, arrays[k], FD_STEP))
        for k in arrays
    }


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def blob_splits():
    return split_classes(generate_blobs(100, 16, 60, 0.1, 7), seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
