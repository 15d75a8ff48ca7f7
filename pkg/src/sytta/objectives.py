"""Adaptation objectives: gated input NLL, prefix entropy, KL anchoring.

All probabilities go through a max-subtracted log-softmax; entropies and
divergences are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lm import ModelState, forward_logits


class DegenerateInputError(ValueError):
    """Query too short to have a predictable token."""


class ObjectiveConfigError(ValueError):
    pass


ENTROPY_MODES = ("cumulative", "average")
KL_DIRECTIONS = ("reverse", "forward")
COMPOSITIONS = ("alg1", "eq7")
AMPLIFICATIONS = ("proportional", "off")


@dataclass(frozen=True)
class GateConfig:
    threshold: float = 1.2
    amplification: str = "proportional"

    def __post_init__(self):
        if not self.threshold > 0:
            raise ObjectiveConfigError("gate threshold must be > 0")
        if self.amplification not in AMPLIFICATIONS:
            raise ObjectiveConfigError(f"amplification must be one of {AMPLIFICATIONS}")


@dataclass
class LossBundle:
    """Per-sample loss terms. Tensor fields keep the graph; floats are detached."""
    l_ida: Tensor
    l_ent: Tensor
    l_kl: Tensor
    l_ocs: Tensor
    m: int
    k: int
    gated_in: bool
    gate_weight: float = 0.0

    def values(self) -> dict[str, float]:
        return {"l_ida": self.l_ida.item(), "l_ent": self.l_ent.item(),
                "l_kl": self.l_kl.item(), "l_ocs": self.l_ocs.item()}


def zero() -> Tensor:
    return Tensor(0.0)


# ---------------------------------------------------------------------------
# input side


def token_nll(logits: Tensor, targets) -> Tensor:
    """-log p(target_t) for each row of ``logits``."""
    lp = ad.log_softmax(logits, axis=-1)
    return -ad.gather(lp, np.asarray(targets, dtype=np.int64))


def sequence_nll(logits: Tensor, tokens) -> Tensor:
    """Mean NLL of tokens[1:] under rows logits[:-1] (m-1 predictable positions)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    m = len(tokens)
    if m < 2:
        raise DegenerateInputError("need at least two tokens for a likelihood")
    return token_nll(logits[: m - 1], tokens[1:]).mean()


def gate_factor(base_nll: float, gate: GateConfig) -> float:
    """0 at or below the threshold, else NLL/threshold (or 1 with amplification off)."""
    if base_nll <= gate.threshold:
        return 0.0
    return base_nll / gate.threshold if gate.amplification == "proportional" else 1.0


def base_nll(base: ModelState, x, on_pass=None) -> float:
    with ad.no_grad():
        logits = forward_logits(base, x, use_adapters=False, on_pass=on_pass)
        return sequence_nll(logits, x).item()


def ida_from_logits(logits: Tensor, x, factor: float) -> Tensor:
    """Gated IDA term from adapted logits whose first rows cover the query."""
    if factor == 0.0:
        if len(x) < 2:
            raise DegenerateInputError("need at least two tokens for a likelihood")
        return zero()
    return sequence_nll(logits, x) * factor


def ida_loss(state: ModelState, base: ModelState, x, gate: GateConfig | None = None) -> Tensor:
    """Gated, NLL-amplified negative log-likelihood of the query tokens."""
    gate = gate or GateConfig()
    if len(x) < 2:
        raise DegenerateInputError("need at least two tokens for a likelihood")
    factor = gate_factor(base_nll(base, x), gate)
    if factor == 0.0:
        return zero()
    return ida_from_logits(forward_logits(state, x), x, factor)


# ---------------------------------------------------------------------------
# output side


def step_entropies(logits: Tensor) -> Tensor:
    """Shannon entropy (nats) of each row."""
    lp = ad.log_softmax(logits, axis=-1)
    return -(ad.exp(lp) * lp).sum(axis=-1)


def entropy_loss(logits: Tensor, mode: str = "cumulative") -> Tensor:
    if mode not in ENTROPY_MODES:
        raise ObjectiveConfigError(f"entropy mode must be one of {ENTROPY_MODES}")
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("entropy_loss expects k x V logits with k >= 1")
    k = float(logits.shape[0])
    # the cumulative form is built from the average so that cum == k * avg holds bit for bit
    avg = step_entropies(logits).sum() / k
    return avg * k if mode == "cumulative" else avg


def kl_loss(adapted_logits: Tensor, ref_logits, direction: str = "reverse") -> Tensor:
    """Summed per-step KL between adapted and reference next-token distributions.

    reverse: sum_t KL(p'_t || p_ref,t); forward: sum_t KL(p_ref,t || p'_t).
    """
    if direction not in KL_DIRECTIONS:
        raise ObjectiveConfigError(f"KL direction must be one of {KL_DIRECTIONS}")
    ref = ref_logits.data if isinstance(ref_logits, Tensor) else np.asarray(ref_logits, dtype=np.float64)
    if ref.shape != adapted_logits.shape:
        raise ad.ShapeError(f"logit shapes differ: {adapted_logits.shape} vs {ref.shape}")
    lp = ad.log_softmax(adapted_logits, axis=-1)
    lq = ad.log_softmax_np(ref, axis=-1)
    if direction == "reverse":
        return (ad.exp(lp) * (lp - lq)).sum()
    return (np.exp(lq) * (lq - lp)).sum()


def ocs_loss(l_ent: Tensor, l_kl: Tensor, lambda_kl: float, composition: str = "alg1") -> Tensor:
    """Output-side term. eq7 folds the KL in; alg1 leaves it for batch aggregation."""
    if lambda_kl < 0:
        raise ObjectiveConfigError("lambda_kl must be >= 0")
    if composition not in COMPOSITIONS:
        raise ObjectiveConfigError(f"composition must be one of {COMPOSITIONS}")
    if composition == "eq7":
        return l_ent + l_kl * lambda_kl
    return l_ent


def batch_loss(bundles, w_ida, w_ocs, lambda_kl: float, composition: str = "alg1") -> Tensor:
    """(1/B) (<w_ida, L_ida> + <w_ocs, L_ocs> + lambda_kl * sum L_kl); the last
    term only under the alg1 composition (eq7 already carries it in L_ocs)."""
    B = len(bundles)
    if B == 0:
        raise ValueError("empty batch")
    total = zero()
    for b, wi, wo in zip(bundles, w_ida, w_ocs):
        total = total + b.l_ida * float(wi) + b.l_ocs * float(wo)
        if composition == "alg1" and lambda_kl:
            total = total + b.l_kl * lambda_kl
    return total * (1.0 / B)


# ---------------------------------------------------------------------------
# reference evaluations used by tests and diagnostics


def entropy_np(logits: np.ndarray) -> np.ndarray:
    lp = ad.log_softmax_np(np.asarray(logits, dtype=np.float64), axis=-1)
    return -(np.exp(lp) * lp).sum(axis=-1)


def uniform_entropy(V: int) -> float:
    return math.log(V)
