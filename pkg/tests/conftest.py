import numpy as np
import pytest


def central_difference(fn, arrays, step=1e-4):
    """Central finite-difference gradient of scalar ``fn(arrays)`` w.r.t. each array.

    ``arrays`` is a dict of float64 arrays; each entry is perturbed in place
    and restored.
    """
    grads = {}
    for name, a in arrays.items():
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + step
            up = fn(arrays)
            a[i] = old - step
            down = fn(arrays)
            a[i] = old
            g[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric):
    return max(
        float(np.max(np.abs(analytic[k] - numeric[k]) / np.maximum(1.0, np.abs(numeric[k])))) for k in numeric
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
