import numpy as np
import pytest

from fedpoison import _pykernels, kernels

BACKENDS = [_pykernels]
if kernels.BACKEND == "cython":
    from fedpoison import _ckernels

    BACKENDS.append(_ckernels)


@pytest.fixture(params=BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# filled by test_acceptance.py, one line per criterion
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("[")[1].split("]")[0])):
        terminalreporter.write_line(line)
