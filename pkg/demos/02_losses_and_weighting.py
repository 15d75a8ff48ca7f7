# coding: utf-8

# # The adaptation objectives and how they are balanced
#
# Two signals drive adaptation. One lowers the model's negative log-likelihood
# of the incoming question; the other sharpens its next-token distributions
# over the first few response tokens while a KL penalty keeps them near the
# frozen model. A moving-average rule decides how much each one counts.

import math

import numpy as np

from sytta.autodiff import Tensor
from sytta.objectives import GateConfig, entropy_loss, gate_factor, kl_loss, ocs_loss
from sytta.weighting import DiwConfig, DiwState, diw_step

V = 259
rng = np.random.default_rng(1)

# ## Entropy over a short prefix
#
# Rows are next-token logits for k = 4 prefix positions. The cumulative form
# sums per-step entropies and the average form divides by k.

logits = Tensor(rng.normal(scale=2.0, size=(4, V)))
cum = entropy_loss(logits, "cumulative").item()
avg = entropy_loss(logits, "average").item()
print(f"cumulative {cum:.4f}  average {avg:.4f}  ratio {cum / avg:.1f}  ln V {math.log(V):.4f}")

# ## Staying close to the frozen model
#
# Reverse KL, KL(adapted || frozen), is zero when the two agree and grows as
# the adapted distribution moves away.

ref = logits.data
for scale in (0.0, 0.1, 0.5, 2.0):
    moved = Tensor(ref + scale * rng.normal(size=ref.shape))
    print(f"perturbation {scale:>4}: reverse KL {kl_loss(moved, ref, 'reverse').item():.5f}"
          f"  forward KL {kl_loss(moved, ref, 'forward').item():.5f}")

# Where the KL term enters depends on the composition. Under "alg1" (the
# default) the output-side loss is the entropy alone and the KL is added once
# per batch with coefficient 0.16; under "eq7" it is folded in per sample.

l_ent, l_kl = Tensor(np.array(cum)), Tensor(np.array(0.3))
for composition in ("alg1", "eq7"):
    print(composition, "output-side loss:", ocs_loss(l_ent, l_kl, 0.16, composition).item())

# ## Which questions count for the input-side signal
#
# Questions the frozen model already finds easy (mean NLL at or below the
# threshold) are skipped; harder ones are amplified in proportion to their NLL.

gate = GateConfig()
for nll in (0.8, 1.2, 2.4, 6.0):
    print(f"frozen NLL {nll}: gate factor {gate_factor(nll, gate):.2f}")

# ## Balancing the two
#
# Each step smooths the total loss with an EMA, turns the two losses into
# shares of it, clips their ratio to [1e-3, 1e3] and rescales so the pair
# always sums to 2. The larger loss receives the larger weight.

cfg = DiwConfig()
state = DiwState()
trajectory = [(30.0, 1.8), (25.0, 1.7), (12.0, 1.5), (4.0, 1.6), (1.0, 1.4), (0.0, 0.0), (1e-5, 2.0)]
print(f"{'l_ida':>8} {'l_ocs':>6} {'ema':>8} {'w_ida':>7} {'w_ocs':>7}")
for l_ida, l_ocs in trajectory:
    w_ida, w_ocs, state = diw_step(state, l_ida, l_ocs, cfg)
    note = "  (both zero: previous weights kept)" if state.skipped else ""
    print(f"{l_ida:8.5g} {l_ocs:6.2f} {state.ema:8.4f} {w_ida:7.4f} {w_ocs:7.4f}{note}")

# The static alternative fixes both weights at 1 but still tracks the EMA.

static = DiwConfig(mode="static")
print("static:", diw_step(DiwState(), 30.0, 1.8, static)[:2])
