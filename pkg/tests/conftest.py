from pathlib import Path

import numpy as np
import pytest

from sadp import kernels
from sadp.kernels import _fallback

DATA = Path(__file__).resolve().parents[1] / "src" / "sadp" / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    mod = kernels.available_backends()[request.param]
    for name in ("clip_rows", "softmax_xent", "segment_sq_norms", "scatter_add_rows"):
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def python_kernels(monkeypatch):
    for name in ("clip_rows", "softmax_xent", "segment_sq_norms", "scatter_add_rows"):
        monkeypatch.setattr(kernels, name, getattr(_fallback, name))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
