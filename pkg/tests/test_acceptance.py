"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vqkv import (  # noqa: E402
    AttentionConfig,
    CacheKind,
    CacheState,
    RatioConfig,
    SyntheticSpec,
    TrainConfig,
    WindowPolicy,
    attend,
    quantize,
    quantize_batch,
    reconstruct,
    reconstruct_block,
    train,
)
from vqkv import bench  # noqa: E402
from vqkv.ratio import ratio  # noqa: E402
from vqkv.synthetic import generate  # noqa: E402

from conftest import random_stack  # noqa: E402
from reference_ratios import HEADLINE, TABLE  # noqa: E402

RESULTS = {}

MIXTURE = SyntheticSpec(dim=64, count=100_000, component_count=32, seed=1)
TRAIN = TrainConfig(learning_rate=0.01, epochs=10, seed=3)


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    return ok


@pytest.fixture(scope="module")
def trained():
    """Key/value stacks shared by criteria 6 and 8."""
    keys = generate(MIXTURE)
    values = generate(bench.value_spec(MIXTURE))
    one, one_report = train(keys, [256], TRAIN)
    four, four_report = train(keys, [256] * 4, TRAIN)
    four_v, _ = train(values, [256] * 4, TRAIN, cache_kind=CacheKind.VALUE)
    return {"one": one_report, "four": four_report, "key_stack": four, "value_stack": four_v}


def test_criterion_1_ratio_table():
    worst, rows = 0.0, TABLE + HEADLINE
    for cfg, expected in rows:
        value = ratio(RatioConfig(*cfg))
        worst = max(worst, abs(value - expected))
    ok = record(1, worst <= 0.1, f"{len(rows)} rows, max |diff| {worst:.3f} pp (tol 0.1)")
    assert ok


def test_criterion_2_residual_identity():
    rng = np.random.default_rng(2)
    total = fails = 0
    worst = 0.0
    while total < 10_000:
        dim = int(rng.integers(1, 65))
        sizes = [int(rng.integers(2, 257)) for _ in range(int(rng.integers(1, 9)))]
        stack = random_stack(rng, dim, sizes, scale=float(rng.choice([0.1, 1.0, 10.0])))
        xs = rng.standard_normal((100, dim)) * float(rng.choice([1e-3, 1.0, 1e3]))
        for x in xs:
            codes, residual = quantize(stack, x)
            err = np.linalg.norm(reconstruct(stack, codes) + residual - x) / np.linalg.norm(x)
            worst = max(worst, err)
            fails += err > 1e-5
        total += len(xs)
    ok = record(2, fails == 0, f"{total} vectors, {fails} failures, max rel err {worst:.2e} (tol 1e-5)")
    assert ok


def test_criterion_3_batch_equals_rows():
    rng = np.random.default_rng(3)
    stacks = [random_stack(rng, int(rng.integers(1, 33)), [int(rng.integers(2, 129))
                                                           for _ in range(int(rng.integers(1, 5)))])
              for _ in range(20)]
    mismatched = 0
    for b in range(1000):
        stack = stacks[b % len(stacks)]
        n = int(rng.integers(1, 65))
        if b % 2:
            # rows halfway between pairs of first-stage entries: near-ties for the search
            eff = stack.stages[0].effective_entries
            i, j = rng.integers(0, eff.shape[0], (2, n))
            xs = 0.5 * (eff[i] + eff[j]) + 1e-12 * rng.standard_normal((n, stack.dim))
        else:
            xs = rng.standard_normal((n, stack.dim))
        batch, _ = quantize_batch(stack, xs)
        single = np.array([quantize(stack, x)[0] for x in xs])
        mismatched += not np.array_equal(batch.codes, single)
    ok = record(3, mismatched == 0, f"1000 batches, {mismatched} with differing indices")
    assert ok


def test_criterion_4_blockwise():
    rng = np.random.default_rng(4)
    part_bad = 0
    for _ in range(50):
        stack = random_stack(rng, 8, [16, 8, 4])
        batch, _ = quantize_batch(stack, rng.standard_normal((int(rng.integers(1, 200)), 8)))
        full = reconstruct_block(stack, batch, 0, len(batch))
        cuts = np.unique(np.concatenate([[0, len(batch)], rng.integers(0, len(batch) + 1, 5)]))
        parts = np.concatenate([reconstruct_block(stack, batch, a, b) for a, b in zip(cuts[:-1], cuts[1:])])
        part_bad += not np.array_equal(parts, full)

    worst = 0.0
    for _ in range(100):
        dk, dv = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        policy = WindowPolicy(int(rng.integers(0, 5)), int(rng.integers(1, 20)), bool(rng.integers(0, 2)))
        st = CacheState(random_stack(rng, dk, [16, 8]), random_stack(rng, dv, [8, 8]), policy)
        n = int(rng.integers(1, 120))
        keys, values = rng.standard_normal((n, dk)), rng.standard_normal((n, dv))
        cut = int(rng.integers(1, n + 1))
        st.prefill(keys[:cut], values[:cut])
        for k, v in zip(keys[cut:], values[cut:]):
            st.append_token(k, v)
        q = rng.standard_normal(dk) * 2
        outs = [attend(st, q, AttentionConfig(block_rows=r)) for r in (1, 7, st.total_len)]
        worst = max(worst, float(np.abs(outs[0] - outs[2]).max()), float(np.abs(outs[1] - outs[2]).max()))
    ok = record(4, part_bad == 0 and worst <= 1e-6,
                f"(a) 50 partitions, {part_bad} differing; (b) 100 states, max |diff| {worst:.1e} (tol 1e-6)")
    assert ok


def test_criterion_5_window_accounting():
    rng = np.random.default_rng(5)
    st = CacheState(random_stack(rng, 8, [16]), random_stack(rng, 8, [16]), WindowPolicy(4, 1024))
    st.prefill(rng.standard_normal((2048, 8)), rng.standard_normal((2048, 8)))
    broken = 0
    for _ in range(5000):
        st.append_token(rng.standard_normal(8), rng.standard_normal(8))
        broken += sum(st.segment_lengths().values()) != st.total_len
    expected = st.evictions // 1024
    ok = record(5, broken == 0 and st.decode_compressions == expected and st.total_len == 7048,
                f"accounting broken at {broken} steps; {st.evictions} evictions, "
                f"{st.decode_compressions} batched compressions (expected {expected})")
    assert ok


def test_criterion_6_training_efficacy(trained):
    one, four = trained["one"], trained["four"]
    stages = four.per_stage_mse
    monotone = all(b <= a * 1.01 for a, b in zip(stages, stages[1:]))
    rel = four.final_mse / one.final_mse
    ok = record(6, rel <= 0.5 and monotone,
                f"N=4 {four.final_mse:.3f} vs N=1 {one.final_mse:.3f} (ratio {rel:.3f}, tol 0.5); "
                f"stages {[round(s, 3) for s in stages]}")
    assert ok


def test_criterion_7_rope_keys():
    keys = generate(replace(MIXTURE, kind="rope_rotated_keys", count=100_000))
    _, report = train(keys, [256] * 8, TRAIN)
    s = report.per_stage_mse
    drop = 1 - s[-1] / s[0]
    ok = record(7, drop >= 0.20, f"stage MSE {s[0]:.3f} -> {s[-1]:.3f}, cumulative decrease {drop:.1%} (tol 20%)")
    assert ok


def test_criterion_8_bench_fidelity(trained):
    config = bench.BenchConfig(tokens=4096, checkpoints=2, queries=64, block_rows=256)
    records = list(bench.run(MIXTURE, trained["key_stack"], trained["value_stack"], WindowPolicy(4, 1024), config))
    last = records[-2]
    ok = record(8, last["output_cosine"] >= 0.99 and last["intermediate"] > 0,
                f"{last['tokens']} tokens, {last['intermediate']} compressed, mean cosine "
                f"{last['output_cosine']:.4f} (min {last['output_min_cosine']:.4f}, tol 0.99)")
    assert ok


def test_criterion_9_memory_model():
    rng = np.random.default_rng(9)
    ks = random_stack(rng, 64, [256] * 4, CacheKind.KEY)
    vs = random_stack(rng, 64, [512] * 2, CacheKind.VALUE)
    target = ratio(RatioConfig(4, 256, 2, 512, 64, 64)) / 100
    spec = replace(MIXTURE, count=100_000)
    config = bench.BenchConfig(tokens=100_000, checkpoints=5, fidelity=False)
    records = [r for r in bench.run(spec, ks, vs, WindowPolicy(4, 1024), config) if r["record"] == "checkpoint"]
    gaps = [abs(r["amortized_ratio"] - target) for r in records]
    final = records[-1]
    err = abs(final["effective_ratio"] - target) * 100
    converging = all(b <= a for a, b in zip(gaps, gaps[1:]))
    ok = record(9, err <= 0.5 and converging and final["tokens"] == 100_000,
                f"100k tokens: effective {final['effective_ratio']:.4%} vs formula {target:.4%} "
                f"(|diff| {err:.3f} pp, tol 0.5); with codebook overhead "
                f"{records[0]['amortized_ratio']:.2%} -> {final['amortized_ratio']:.2%}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
