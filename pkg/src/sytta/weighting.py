"""Dynamic importance weighting between the input- and output-side losses.

An EMA of the summed loss normalises each term, the normalised ratios give
preliminary weights, and the OCS/IDA weight ratio is clipped to
[floor, ceil] before being rescaled so the pair sums to 2. Weights are
plain floats computed from detached loss values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np


class WeightingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiwConfig:
    beta: float = 0.9
    eps: float = 1e-8
    lambda_ida: float = 1.0
    lambda_ocs: float = 1.0
    floor: float = 1e-3
    ceil: float = 1e3
    mode: str = "dynamic"
    granularity: str = "per_sample"

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise WeightingConfigError("beta must lie in [0, 1)")
        if not self.eps > 0:
            raise WeightingConfigError("eps must be > 0")
        if not 0 < self.floor <= self.ceil:
            raise WeightingConfigError("need 0 < floor <= ceil")
        if self.lambda_ida < 0 or self.lambda_ocs < 0:
            raise WeightingConfigError("base coefficients must be >= 0")
        if self.mode not in ("dynamic", "static"):
            raise WeightingConfigError("mode must be 'dynamic' or 'static'")
        if self.granularity not in ("per_sample", "batch"):
            raise WeightingConfigError("granularity must be 'per_sample' or 'batch'")


@dataclass(frozen=True)
class DiwState:
    ema: float | None = None
    step: int = 0
    w_ida: float = 1.0
    w_ocs: float = 1.0
    alpha: float = 1.0
    skipped: bool = False


def update_ema(prev: float | None, total: float, beta: float) -> float:
    """EMA recurrence; the first observation initialises the average."""
    if prev is None:
        prev = total
    return beta * prev + (1.0 - beta) * total


def ratio_weights(l_ida, l_ocs, ema: float, cfg: DiwConfig):
    """Pre-clip weights 2 * lambda_i * r_i / sum_j r_j with r_i = l_i / (ema + eps)."""
    denom = ema + cfg.eps
    r_ida = np.asarray(l_ida, dtype=np.float64) / denom
    r_ocs = np.asarray(l_ocs, dtype=np.float64) / denom
    total = r_ida + r_ocs
    with np.errstate(invalid="ignore", divide="ignore"):
        w_ida = 2.0 * cfg.lambda_ida * r_ida / total
        w_ocs = 2.0 * cfg.lambda_ocs * r_ocs / total
    return w_ida, w_ocs


def rebalance(w_ida, w_ocs, cfg: DiwConfig):
    """Clip w_ocs/w_ida into [floor, ceil] and rescale to sum 2. Returns (w_ida, w_ocs, alpha)."""
    w_ida = np.asarray(w_ida, dtype=np.float64)
    w_ocs = np.asarray(w_ocs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(w_ida > 0, w_ocs / np.where(w_ida > 0, w_ida, 1.0), np.inf)
    alpha = np.clip(ratio, cfg.floor, cfg.ceil)
    return 2.0 / (1.0 + alpha), 2.0 * alpha / (1.0 + alpha), alpha


def diw_step(state: DiwState, l_ida: float, l_ocs: float, cfg: DiwConfig):
    """One scalar weighting step. Returns (w_ida, w_ocs, new_state)."""
    l_ida, l_ocs = float(l_ida), float(l_ocs)
    if l_ida < 0 or l_ocs < 0:
        raise ValueError("losses must be non-negative")
    if l_ida == 0.0 and l_ocs == 0.0:
        new = replace(state, skipped=True)
        return state.w_ida, state.w_ocs, new
    ema = update_ema(state.ema, l_ida + l_ocs, cfg.beta)
    if cfg.mode == "static":
        new = DiwState(ema, state.step + 1, 1.0, 1.0, 1.0, False)
        return 1.0, 1.0, new
    pi, po = ratio_weights(l_ida, l_ocs, ema, cfg)
    wi, wo, alpha = rebalance(pi, po, cfg)
    wi, wo, alpha = float(wi), float(wo), float(alpha)
    return wi, wo, DiwState(ema, state.step + 1, wi, wo, alpha, False)


def diw_weights(state: DiwState, l_ida, l_ocs, cfg: DiwConfig):
    """Per-sample weight vectors sharing one EMA driven by the batch mean.

    Samples whose two losses are both zero keep the previous batch-level pair.
    Under ``granularity='batch'`` every sample gets the weights of the batch
    means. Returns (w_ida, w_ocs, new_state); the state records the mean pair.
    """
    l_ida = np.asarray(l_ida, dtype=np.float64)
    l_ocs = np.asarray(l_ocs, dtype=np.float64)
    if np.any(l_ida < 0) or np.any(l_ocs < 0):
        raise ValueError("losses must be non-negative")
    B = len(l_ida)
    if cfg.granularity == "batch":
        wi, wo, new = diw_step(state, l_ida.mean(), l_ocs.mean(), cfg)
        return np.full(B, wi), np.full(B, wo), new
    mi, mo = float(l_ida.mean()), float(l_ocs.mean())
    if mi == 0.0 and mo == 0.0:
        return np.full(B, state.w_ida), np.full(B, state.w_ocs), replace(state, skipped=True)
    ema = update_ema(state.ema, mi + mo, cfg.beta)
    if cfg.mode == "static":
        return np.ones(B), np.ones(B), DiwState(ema, state.step + 1, 1.0, 1.0, 1.0, False)
    pi, po = ratio_weights(l_ida, l_ocs, ema, cfg)
    wi, wo, alpha = rebalance(pi, po, cfg)
    dead = (l_ida == 0.0) & (l_ocs == 0.0)
    wi = np.where(dead, state.w_ida, wi)
    wo = np.where(dead, state.w_ocs, wo)
    alpha = np.where(dead, state.alpha, alpha)
    new = DiwState(ema, state.step + 1, float(wi.mean()), float(wo.mean()), float(alpha.mean()), False)
    return wi, wo, new


def ema_closed_form(totals, beta: float) -> np.ndarray:
    """Closed form of the EMA recurrence with L0 = first total:
    L_t = beta^t * s_1 + (1 - beta) * sum_{j<=t} beta^(t-j) * s_j."""
    s = np.asarray(totals, dtype=np.float64)
    out = np.empty_like(s)
    for t in range(1, len(s) + 1):
        powers = beta ** (t - np.arange(1, t + 1))
        out[t - 1] = beta ** t * s[0] + (1 - beta) * np.dot(powers, s[:t])
    return out


TRAJECTORY_FIELDS = ("step", "l_ida", "l_ocs", "ema", "alpha", "w_ida", "w_ocs")


def write_trajectory_csv(rows, path):
    """Weight trajectory: one row per step with the fields in TRAJECTORY_FIELDS."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRAJECTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
