import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deep_pursuit.model import init_model
from deep_pursuit.network import dense_spec

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_dense_net(rng, n_layers=None, with_skips=False, max_dim=16, norm="pure", lam_scale=0.1):
    """Random dense chain (optionally with identity / dense skips) and randomized parameters."""
    n_layers = n_layers or int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(2, max_dim + 1, size=n_layers + 1)]
    skips = []
    if with_skips:
        for src in range(n_layers - 1):
            dst = src + 2
            if rng.random() < 0.7:
                kind = "identity" if dims[src] == dims[dst - 1] else "dense"
                skips.append((src, dst, kind))
    spec = dense_spec(dims, skips=skips, n_classes=3)
    params = init_model(spec, int(rng.integers(1 << 30)), norm)
    for layer in spec.layers:
        j = layer.index
        params.arrays[f"B{j}"] = rng.normal(size=params.arrays[f"B{j}"].shape) / np.sqrt(dims[j - 1])
        params.arrays[f"lam{j}"] = lam_scale * rng.random(dims[j])
    return spec, params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance_report():
    """Record one summary line per acceptance criterion; printed after the run."""
    def record(number: int, passed, detail: str):
        status = {True: "PASS", False: "FAIL"}.get(passed, passed)
        ACCEPTANCE_LINES.append(f"criterion {number}: {status} - {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
