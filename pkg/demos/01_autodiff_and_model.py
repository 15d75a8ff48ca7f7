# coding: utf-8

# # Tensors, gradients and the tiny language model
#
# Everything in `sytta` runs on a small reverse-mode autodiff library over
# float64 numpy arrays. This script builds a few expressions by hand, checks a
# gradient against central differences, then looks at the byte-level model
# that the adaptation code trains.

import numpy as np

from sytta import autodiff as ad
from sytta.corpus import encode_prompt
from sytta.lm import LmConfig, ModelState, forward_logits, gen_prefix, greedy_decode

# ## A hand-built expression
#
# Leaves that need gradients are created with `requires_grad=True`. Calling
# `backward()` on a scalar walks the recorded graph in reverse topological
# order and fills `.grad` on every leaf that contributed.

rng = np.random.default_rng(0)
W = ad.tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = ad.tensor(rng.normal(size=(5, 3)))
y = ad.log_softmax(ad.gelu(x @ W)).sum()
y.backward()
print("value", y.item())
print("dy/dW\n", W.grad.round(4))

# The same derivative, one coordinate at a time, by central differences:

h = 1e-6
fd = np.zeros_like(W.data)
for i in np.ndindex(W.data.shape):
    old = W.data[i]
    W.data[i] = old + h
    up = ad.log_softmax(ad.gelu(x @ W)).sum().item()
    W.data[i] = old - h
    down = ad.log_softmax(ad.gelu(x @ W)).sum().item()
    W.data[i] = old
    fd[i] = (up - down) / (2 * h)
print("max |analytic - numeric|", np.abs(fd - W.grad).max())

# Inside `no_grad()` nothing is recorded, which is how decoding and reference
# computations avoid building graphs they never differentiate.

with ad.no_grad():
    z = x @ W
print("recorded under no_grad:", z.requires_grad)

# ## The model
#
# A pre-LN decoder over 259 byte-level tokens (256 bytes plus BOS, EOS, PAD).
# Low-rank adapters sit on the query and value projections only; their B
# factors start at zero, so a fresh state computes exactly the base function.

cfg = LmConfig(n_layers=1, d_model=32, n_heads=4, max_context=96, rank=4)
state = ModelState.create(cfg, seed=3)
print({k: v.shape for k, v in state.adapter_arrays().items()})

prompt = encode_prompt("how much rain does a garden need?")
with ad.no_grad():
    with_adapters = forward_logits(state, prompt).data
    without = forward_logits(state, prompt, use_adapters=False).data
print("zero adapters change nothing:", np.array_equal(with_adapters, without))

# Greedy decoding from an untrained model is noise, but the mechanics are the
# same ones the adaptation loop uses: a k-token prefix, then a full response.

print("prefix", gen_prefix(state, prompt, 4))
print("response tokens", greedy_decode(state, prompt, 12))

# The base arrays are read-only. Only adapters ever receive gradients.

try:
    state.base["tok_emb"][0, 0] = 1.0
except ValueError as exc:
    print("base weights are frozen:", exc)
