import numpy as np
import pytest

from babverify import datagen
from babverify.model import InputDomain, Layer, VerificationNetwork


def dense_net(*layers):
    """Network from ``(W, b)`` pairs."""
    return VerificationNetwork([Layer.dense(np.asarray(W, float), np.asarray(b, float)) for W, b in layers])


def tiny_problem(seed, sizes=(3, 5, 5, 1), ambiguity=0.5, lo=0.3, hi=0.7):
    """Random network plus the box it was calibrated on."""
    center = np.full(sizes[0], 0.5 * (lo + hi))
    net = datagen.random_network(list(sizes), ambiguity, seed=seed, center=center, eps_ref=0.5 * (hi - lo))
    return net, InputDomain(np.full(sizes[0], lo), np.full(sizes[0], hi))


def shift_output(net, delta):
    """Add ``delta`` to the output bias in place."""
    net.layers[-1].bias[:] += delta
    net.layers[-1].__dict__.pop("_linear_view", None)
    return net


def sample_min(net, domain, n=20000, seed=0):
    from babverify.model import evaluate

    xs = np.random.default_rng(seed).uniform(domain.lower, domain.upper, size=(n, domain.dim))
    return float(np.min(evaluate(net, xs)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def verdict(capsys, cid, ok, detail):
    """Print and record one acceptance line, then fail the test if needed."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid:>2}: {detail}"
    ACCEPTANCE.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
