import numpy as np
import pytest

from fairdemand.diffcore import finite_diff_oracle


def rel_err(a, b, floor=1e-7):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_graph_grads(graph, bindings, names, h=1e-5, tol=1e-4):
    """Compare graph gradients with central differences for each input in ``names``."""
    analytic = graph.gradients(bindings, names)
    worst = 0.0
    for name in names:
        def f(x, name=name):
            return graph.evaluate({**bindings, name: x})

        numeric = finite_diff_oracle(f, np.asarray(bindings[name], float), h)
        err = rel_err(analytic[name], numeric)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    assert worst < tol, f"worst relative gradient error {worst:.3g}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Print and record one PASS/FAIL line for an acceptance criterion."""

    def emit(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        print(line)
        _VERDICTS.append(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
