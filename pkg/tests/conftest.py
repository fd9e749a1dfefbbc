import numpy as np
import pytest

from scod.synthetic import SynthConfig, gen_benchmark


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cfg():
    return SynthConfig(n_train=800, n_id_test=600, n_ood=400, seed=3)


@pytest.fixture(scope="session")
def small_bench(small_cfg):
    return gen_benchmark(small_cfg)


# --- acceptance reporting: one PASS/FAIL line per criterion ------------------

_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LINES] = {}


@pytest.fixture
def criterion(request):
    """``criterion(number, ok, detail)`` records and prints a verdict line."""
    lines = request.config.stash[_LINES]
    seen = []

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        lines[(number, len(seen))] = line
        seen.append(number)
        print(line)
        return ok

    yield record
    if not seen:
        number = int(request.node.name.split("_")[1])
        lines[(number, 0)] = f"FAIL criterion {number:>2}: raised before a verdict ({request.node.name})"


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
