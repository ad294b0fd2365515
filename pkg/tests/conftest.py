import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def loop_weights(E_in, G, E_out):
    """Brute-force oracle: W[o,i,u,v] = sum_ab E_in[i,u,v,a] G[a,b] E_out[o,u,v,b]."""
    C_in, k, _, g = E_in.shape
    C_out = E_out.shape[0]
    W = np.zeros((C_out, C_in, k, k))
    for o in range(C_out):
        for i in range(C_in):
            for u in range(k):
                for v in range(k):
                    s = 0.0
                    for a in range(g):
                        for b in range(g):
                            s += E_in[i, u, v, a] * G[a, b] * E_out[o, u, v, b]
                    W[o, i, u, v] = s
    return W


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per criterion; all lines are echoed in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
