import numpy as np
import pytest

from flowgrpo.model import ModelConfig, init_params


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar f with respect to array x (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


@pytest.fixture
def tiny_cfg():
    return ModelConfig(data_dim=2, hidden_dim=6, num_layers=2, time_embed_dim=3, cond_dropout_prob=0.1, activation="tanh")


@pytest.fixture
def tiny_params(tiny_cfg):
    # a larger output scale makes gradients through the network non-trivial
    return init_params(tiny_cfg, seed=3, out_scale=1.0)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
