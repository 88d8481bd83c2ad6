# %% [markdown]
# # Residual quantization of a handful of vectors
#
# Build a small two-stage stack by hand, encode a few vectors, and look at
# the packed index bytes.

# %%
import numpy as np

from vqkv import Codebook, CodebookStack, CodeMatrix, quantize, quantize_batch, reconstruct

# %%
coarse = Codebook(np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0], [4.0, 4.0]]), np.eye(2))
fine = Codebook(np.array([[0.5, 0.5], [-0.5, 0.5], [0.5, -0.5], [-0.5, -0.5]]), np.eye(2))
stack = CodebookStack((coarse, fine))
print("bits per vector:", stack.bits_per_vector)

# %% [markdown]
# The first stage picks the nearest corner, the second refines what is left.

# %%
x = np.array([3.6, 4.4])
codes, residual = quantize(stack, x)
print("codes", codes, "reconstruction", reconstruct(stack, codes), "residual", residual)

# %%
rng = np.random.default_rng(0)
xs = rng.uniform(-1, 5, size=(6, 2))
cm, norms = quantize_batch(stack, xs)
print(cm.codes)
print("residual norms", np.round(norms, 3))

# %% [markdown]
# Codes pack least-significant bit first, 2 + 2 bits per row here.

# %%
payload = cm.pack()
print(len(payload), "bytes:", " ".join(f"{b:08b}" for b in payload))
assert CodeMatrix.from_packed(payload, len(cm), stack.sizes) == cm
