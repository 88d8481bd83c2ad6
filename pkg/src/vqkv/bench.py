"""Simulated prefill + decode run with memory and fidelity checkpoints.

Generation length is modelled as a token count under a fixed byte budget:
every token costs ``2 * (D_k + D_v)`` raw bytes, or its packed code bits once
compressed.  No real device memory is measured.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import AttentionConfig, AttentionStats, attend, attend_raw, cosine
from .cache import RAW_BYTES_PER_SCALAR, CacheState, WindowPolicy
from .errors import InvalidInputError
from .quantizer import CodebookStack
from .synthetic import SyntheticKind, SyntheticSpec, generate


def value_spec(spec: SyntheticSpec) -> SyntheticSpec:
    """Spec used for value vectors: an unrotated mixture with a shifted seed."""
    return replace(spec, kind=SyntheticKind.GAUSSIAN_MIXTURE, seed=spec.seed + 1)


@dataclass(frozen=True)
class BenchConfig:
    tokens: int = 8192
    prompt: int | None = None  # default: l_init + 2 * l_local, capped at tokens
    checkpoints: int = 4
    queries: int = 64
    block_rows: int = 256
    query_seed: int = 0
    fidelity: bool = True
    budget_bytes: int | None = None
    snapshot_path: str | None = None  # write the final CacheState here


def _checkpoint_steps(prompt: int, tokens: int, count: int):
    steps = {tokens}
    if count > 1:
        steps.update(int(x) for x in np.linspace(prompt, tokens, count))
    return sorted(s for s in steps if s >= prompt)


def max_tokens(budget_bytes: int, state: CacheState) -> tuple:
    """Longest sequence fitting in ``budget_bytes``: ``(raw_cache, compressed_cache)``."""
    dk, dv = state.dims
    per_raw = RAW_BYTES_PER_SCALAR * (dk + dv)
    raw = budget_bytes // per_raw
    window = state.policy.l_init + 2 * state.policy.l_local  # worst case: full local + full pending
    fixed = state.key_stack.nbytes + state.value_stack.nbytes + window * per_raw
    per_code_bits = state.key_stack.bits_per_vector + state.value_stack.bits_per_vector
    if budget_bytes <= fixed:
        return raw, min(raw, budget_bytes // per_raw)
    return raw, window + (8 * (budget_bytes - fixed)) // max(per_code_bits, 1)


def run(spec: SyntheticSpec, key_stack: CodebookStack, value_stack: CodebookStack,
        policy: WindowPolicy = WindowPolicy(), config: BenchConfig = BenchConfig()):
    """Yield one record per checkpoint and a closing summary record."""
    if key_stack.dim != spec.dim or value_stack.dim != spec.dim:
        raise InvalidInputError(
            f"spec dimension {spec.dim} does not match stacks {key_stack.dim}/{value_stack.dim}")
    tokens = config.tokens
    if tokens < 1:
        raise InvalidInputError("tokens must be >= 1")
    prompt = config.prompt if config.prompt is not None else policy.l_init + 2 * policy.l_local
    prompt = max(1, min(prompt, tokens))

    keys = generate(replace(spec, count=tokens))
    values = generate(replace(value_spec(spec), count=tokens))
    queries = np.random.default_rng(config.query_seed).standard_normal((config.queries, spec.dim))

    state = CacheState(key_stack, value_stack, policy)
    state.prefill(keys[:prompt], values[:prompt])
    attn = AttentionConfig(block_rows=config.block_rows)
    stats = AttentionStats()

    step = prompt
    for target in _checkpoint_steps(prompt, tokens, config.checkpoints):
        while step < target:
            state.append_token(keys[step], values[step])
            state.check_accounting()
            step += 1
        state.check_accounting()
        report = state.memory_report()
        record = {
            "record": "checkpoint",
            "tokens": state.total_len,
            **state.segment_lengths(),
            "prefill_compressions": state.prefill_compressions,
            "decode_compressions": state.decode_compressions,
            **report.as_record(),
        }
        if config.fidelity and config.queries:
            max_err, cosines = 0.0, []
            for q in queries:
                approx = attend(state, q, attn, stats)
                exact = attend_raw(keys[:step], values[:step], q, attn)
                max_err = max(max_err, float(np.abs(approx - exact).max()))
                cosines.append(cosine(approx, exact))
            record.update(output_max_abs_err=max_err, output_cosine=float(np.mean(cosines)),
                          output_min_cosine=float(np.min(cosines)))
        yield record

    if config.snapshot_path:
        state.save(config.snapshot_path)
    summary = {
        "record": "summary",
        "tokens": state.total_len,
        "peak_block_rows": stats.peak_rows,
        "peak_reconstructed_scalars": stats.peak_scalars,
        "working_set_bound": config.block_rows * max(state.dims),
        "decode_compressions": state.decode_compressions,
    }
    if config.budget_bytes:
        raw_len, vq_len = max_tokens(config.budget_bytes, state)
        summary.update(budget_bytes=config.budget_bytes, raw_max_tokens=raw_len,
                       compressed_max_tokens=vq_len,
                       length_gain=vq_len / raw_len if raw_len else float("inf"))
    yield summary
