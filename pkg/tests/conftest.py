import sys

import numpy as np
import pytest

from vqkv import CacheKind, Codebook, CodebookStack


def make_stack(effective_stages, kind=CacheKind.KEY):
    """Stack whose effective entries are exactly the given matrices (identity projections)."""
    stages = []
    for eff in effective_stages:
        eff = np.asarray(eff, dtype=np.float32)
        stages.append(Codebook(eff, np.eye(eff.shape[1], dtype=np.float32)))
    return CodebookStack(tuple(stages), kind)


def random_stack(rng, dim, sizes, kind=CacheKind.KEY, scale=1.0):
    stages = []
    for s in sizes:
        entries = rng.standard_normal((s, dim)) * scale
        projection = np.eye(dim) + 0.2 * rng.standard_normal((dim, dim))
        stages.append(Codebook(entries, projection))
    return CodebookStack(tuple(stages), kind)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
