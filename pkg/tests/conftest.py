import numpy as np
import pytest

EPS = 1e-4


def numeric_grad(f, x, eps=EPS, index=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    ``index`` restricts the check to a subset of flat positions.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = np.zeros(len(positions) if index is not None else flat.size)
    for k, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out if index is not None else out.reshape(x.shape)


def rel_error(a, b):
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def spaced(rng, shape, gap=1e-2):
    """Random values with pairwise gaps >= ``gap``: no ties for max ops, no values near 0."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * gap
    vals = np.where(np.abs(vals) < gap / 2, gap / 2, vals)
    return rng.permutation(vals).reshape(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting: one PASS/FAIL line per criterion, repeated in the terminal summary --

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    marker = item.get_closest_marker("criterion")
    if marker and rep.when == "call" and rep.failed:
        n, title = marker.args
        lines = item.config.stash[ACCEPTANCE]
        if n not in lines:
            err = call.excinfo.exconly().splitlines()[0] if call.excinfo else "failed"
            lines[n] = f"FAIL [{n}] {title}: {err}"
    return rep


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


@pytest.fixture
def verdict(request):
    """``verdict(ok, detail)`` records and prints the criterion line, then asserts ``ok``."""
    marker = request.node.get_closest_marker("criterion")
    n, title = marker.args

    def record(ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} [{n}] {title}: {detail}"
        request.config.stash[ACCEPTANCE][n] = line
        print(line)
        assert ok, line

    return record
