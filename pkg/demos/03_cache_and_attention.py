# %% [markdown]
# # A compressed cache during decoding
#
# Prefill a cache, stream decode tokens through it, and compare attention
# over the compressed cache with attention over the raw vectors.

# %%
import numpy as np

from vqkv import (AttentionConfig, AttentionStats, CacheKind, CacheState, SyntheticSpec, TrainConfig,
                  WindowPolicy, attend, fidelity, generate, train)

spec = SyntheticSpec(dim=16, count=6000, component_count=8, seed=2)
keys, values = generate(spec), generate(spec.with_seed(3))
cfg = TrainConfig(learning_rate=0.01, epochs=4)
key_stack, _ = train(keys, [64] * 3, cfg)
value_stack, _ = train(values, [64] * 3, cfg, cache_kind=CacheKind.VALUE)

# %%
state = CacheState(key_stack, value_stack, WindowPolicy(l_init=4, l_local=128))
state.prefill(keys[:1000], values[:1000])
for k, v in zip(keys[1000:1500], values[1000:1500]):
    state.append_token(k, v)
print(state.segment_lengths(), "batched compressions:", state.decode_compressions)

# %% [markdown]
# Only ``block_rows`` rows are rebuilt at a time.

# %%
stats = AttentionStats()
q = np.random.default_rng(0).standard_normal(16)
out = attend(state, q, AttentionConfig(block_rows=64), stats)
print("peak rows", stats.peak_rows, "blocks", stats.blocks)

# %%
rep = fidelity(state, (keys[:1500], values[:1500]), np.random.default_rng(1).standard_normal((32, 16)))
print(rep.as_record())

# %%
mem = state.memory_report()
print(f"compressed segment keeps {1 - mem.effective_ratio:.1%} of its 16-bit size")
