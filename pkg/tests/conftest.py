import numpy as np
import pytest

from linbuf.gdn_core import GdnToken
from linbuf.la_core import TokenQKV


def make_tokens(rng, d, n, scale=1.0):
    return [TokenQKV(*(scale * rng.standard_normal((3, d)))) for _ in range(n)]


def make_gdn_tokens(rng, d, n, alpha=None, beta=None):
    out = []
    for _ in range(n):
        q, k, v = rng.standard_normal((3, d))
        k = k / np.linalg.norm(k)
        a = rng.uniform(0.5, 1.0) if alpha is None else alpha
        b = rng.uniform(0.0, 1.0) if beta is None else beta
        out.append(GdnToken(q, k, v, a, b))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
