"""Cohort-level test-time adaptation loop and baseline strategies.

One call to :func:`adapt_cohort` makes a single pass (one epoch by default)
over a cohort of unlabeled queries in shuffled mini-batches. Per sample it
obtains a prefix and frozen-model reference logits (from a prebuilt cache in
``static_ref`` mode, on the fly in ``dynamic_ref`` mode), runs one adapted
forward over ``query || prefix``, builds the loss terms, weights them and
takes one gradient step on the adapter factors.

Forward-pass bookkeeping: every model evaluation over one context counts as
one pass, so a k-token greedy decode costs k passes. Counts are collected by
hooking :func:`sytta.lm.forward_logits`, not computed from formulas.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Cohort, EOS, decode_response
from .lm import ModelState, decode, forward_logits, gen_prefix, prefix_rows, reset_to_base
from .metrics import decode_with_entropies, rouge_lsum
from .objectives import (COMPOSITIONS, ENTROPY_MODES, KL_DIRECTIONS, GateConfig, LossBundle,
                         batch_loss, entropy_loss, entropy_np, gate_factor, ida_from_logits,
                         kl_loss, ocs_loss, sequence_nll, zero)
from .weighting import DiwConfig, DiwState, diw_weights

log = logging.getLogger(__name__)

STRATEGIES = ("sytta", "tent", "eata", "tlm", "none")
MODES = ("static_ref", "dynamic_ref")


class AdaptConfigError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Non-finite loss during adaptation."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class AdaptConfig:
    strategy: str = "sytta"
    mode: str = "static_ref"
    k: int = 4
    batch_size: int = 4
    lr: float = 1e-5
    epochs: int = 1
    lambda_kl: float = 0.16
    scheduler: str = "cosine"
    entropy_mode: str = "cumulative"
    kl_direction: str = "reverse"
    composition: str = "alg1"
    # which model writes the Dynamic-Ref prefix: "adapted" or "base"
    dynamic_prefix_source: str = "adapted"
    # EATA keeps samples whose mean prefix entropy is >= threshold; None calibrates
    eata_threshold: float | None = None
    # fixed (w_ida, w_ocs) replacing dynamic weighting, e.g. for ablations
    weight_override: tuple | None = None
    gate: GateConfig = field(default_factory=GateConfig)
    diw: DiwConfig = field(default_factory=DiwConfig)
    seed: int = 0
    max_new_tokens: int = 64

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise AdaptConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mode not in MODES:
            raise AdaptConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.k < 1:
            raise AdaptConfigError("k must be >= 1")
        if self.batch_size < 1:
            raise AdaptConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise AdaptConfigError("lr must be > 0")
        if self.epochs < 1:
            raise AdaptConfigError("epochs must be >= 1")
        if self.lambda_kl < 0:
            raise AdaptConfigError("lambda_kl must be >= 0")
        if self.scheduler not in ("cosine", "constant"):
            raise AdaptConfigError("scheduler must be 'cosine' or 'constant'")
        if self.entropy_mode not in ENTROPY_MODES:
            raise AdaptConfigError(f"entropy_mode must be one of {ENTROPY_MODES}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise AdaptConfigError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if self.composition not in COMPOSITIONS:
            raise AdaptConfigError(f"composition must be one of {COMPOSITIONS}")
        if self.dynamic_prefix_source not in ("adapted", "base"):
            raise AdaptConfigError("dynamic_prefix_source must be 'adapted' or 'base'")
        if self.weight_override is not None:
            if len(self.weight_override) != 2 or min(self.weight_override) < 0:
                raise AdaptConfigError("weight_override must be two non-negative numbers")
            object.__setattr__(self, "weight_override", tuple(float(w) for w in self.weight_override))
        if self.max_new_tokens < 1:
            raise AdaptConfigError("max_new_tokens must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        d = dict(d)
        if isinstance(d.get("gate"), dict):
            d["gate"] = GateConfig(**d["gate"])
        if isinstance(d.get("diw"), dict):
            d["diw"] = DiwConfig(**d["diw"])
        if d.get("weight_override") is not None:
            d["weight_override"] = tuple(d["weight_override"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise AdaptConfigError(f"unknown AdaptConfig fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# pass accounting


class PassCounter:
    """Forward passes per model role ('adapted' / 'base') and per phase."""

    def __init__(self):
        self.phases: dict[str, dict[str, int]] = {}
        self.sessions: dict[str, int] = {}

    def tick(self, role: str, phase: str, n: int = 1):
        slot = self.phases.setdefault(phase, {"adapted": 0, "base": 0})
        slot[role] += n

    def hook(self, role: str, phase: str):
        return lambda: self.tick(role, phase)

    def session(self, phase: str):
        self.sessions[phase] = self.sessions.get(phase, 0) + 1

    def total(self, role: str, phase: str | None = None) -> int:
        if phase is not None:
            return self.phases.get(phase, {}).get(role, 0)
        return sum(p[role] for p in self.phases.values())

    @property
    def adapted(self) -> int:
        """Adapted-model passes spent during adaptation (the Table-style cost)."""
        return self.total("adapted", "adaptation")

    @property
    def base(self) -> int:
        return self.total("base")

    def to_dict(self) -> dict:
        return {"adapted": self.adapted, "base": self.base,
                "phases": {k: dict(v) for k, v in sorted(self.phases.items())},
                "sessions": dict(sorted(self.sessions.items()))}


def expected_pass_count(strategy: str, mode: str, M: int, k: int) -> int:
    """Adapted-model passes one adaptation epoch costs (cache building excluded)."""
    if strategy in ("tent", "eata"):
        return (k + 1) * M
    if strategy == "tlm":
        return 2 * M
    if strategy == "sytta":
        if mode == "dynamic_ref":
            return (k + 1) * M
        if mode == "static_ref":
            return M
        raise AdaptConfigError(f"unknown mode {mode!r}")
    if strategy == "none":
        return 0
    raise AdaptConfigError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------
# prefixes and references


@dataclass(frozen=True)
class PrefixRecord:
    query_id: int
    prefix: tuple
    ref_logits: np.ndarray   # k x V, read-only
    base_nll: float          # frozen-model mean NLL of the query (for the gate)

    def __post_init__(self):
        arr = np.array(self.ref_logits, dtype=np.float64, copy=True)
        if arr.shape[0] != len(self.prefix):
            raise ValueError("reference logits rows != prefix length")
        if not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite reference logits")
        arr.flags.writeable = False
        object.__setattr__(self, "ref_logits", arr)
        object.__setattr__(self, "prefix", tuple(int(t) for t in self.prefix))


def _nll_from_rows(full_logits: np.ndarray, x) -> float:
    return sequence_nll(Tensor(full_logits), x).item()


def build_static_cache(base: ModelState, cohort: Cohort, k: int,
                       counter: PassCounter | None = None) -> tuple:
    """One frozen-model greedy decode session per query: prefix, per-step
    logits and the query NLL from the session's first pass."""
    counter = counter or PassCounter()
    hook = counter.hook("base", "cache_build")
    records = []
    for qid, x in enumerate(cohort.queries):
        prefix, rows, first = decode(base, x, k, stop_token=None, use_adapters=False,
                                     on_pass=hook, keep_first=True)
        counter.session("cache_build")
        records.append(PrefixRecord(qid, tuple(prefix), rows, _nll_from_rows(first, x)))
    return tuple(records)


def dynamic_refs(base: ModelState, adapted: ModelState, x, k: int,
                 counter: PassCounter | None = None, prefix_source: str = "adapted"):
    """Prefix from the current adapted model (or the frozen one) and frozen
    reference logits on the same contexts. Returns (prefix, ref k x V, base NLL)."""
    counter = counter or PassCounter()
    if prefix_source == "adapted":
        prefix = gen_prefix(adapted, x, k, use_adapters=True, on_pass=counter.hook("adapted", "adaptation"))
    else:
        prefix = gen_prefix(base, x, k, use_adapters=False, on_pass=counter.hook("base", "adaptation"))
    with ad.no_grad():
        full = forward_logits(base, list(x) + list(prefix[:-1]), use_adapters=False,
                              on_pass=counter.hook("base", "adaptation")).data
    counter.session("reference")
    return list(prefix), Tensor(full[prefix_rows(len(x), k)]), _nll_from_rows(full[:len(x)], x)


@dataclass
class SampleContext:
    """Everything a sample's loss needs besides the adapter values."""
    query_id: int
    x: list
    prefix: list | None
    ref: np.ndarray | None
    gate: float            # IDA multiplier (0 when gated out)
    base_nll: float | None


@dataclass(frozen=True)
class _Plan:
    use_ida: bool
    use_ocs: bool
    lambda_kl: float
    weights: tuple | None  # fixed weights, None = dynamic weighting


def _plan(cfg: AdaptConfig) -> _Plan:
    s = cfg.strategy
    if s == "sytta":
        return _Plan(True, True, cfg.lambda_kl, cfg.weight_override)
    if s in ("tent", "eata"):
        return _Plan(False, True, 0.0, (0.0, 1.0))
    if s == "tlm":
        return _Plan(True, False, 0.0, (1.0, 0.0))
    return _Plan(False, False, 0.0, (0.0, 0.0))


def prepare_sample(qid: int, x, base: ModelState, adapted: ModelState, cfg: AdaptConfig,
                   cache, counter: PassCounter) -> SampleContext:
    """Non-differentiable part of a sample: prefix, references, gate."""
    x = list(x)
    s = cfg.strategy
    if s == "tlm":
        # gate pre-pass: frozen-model NLL of the query, issued by the adaptation loop
        with ad.no_grad():
            full = forward_logits(base, x, use_adapters=False,
                                  on_pass=counter.hook("adapted", "adaptation")).data
        nll = _nll_from_rows(full, x)
        return SampleContext(qid, x, None, None, gate_factor(nll, cfg.gate), nll)
    if s in ("tent", "eata"):
        prefix = gen_prefix(adapted, x, cfg.k, on_pass=counter.hook("adapted", "adaptation"))
        return SampleContext(qid, x, list(prefix), None, 0.0, None)
    if cfg.mode == "static_ref":
        rec = cache[qid]
        return SampleContext(qid, x, list(rec.prefix), rec.ref_logits, gate_factor(rec.base_nll, cfg.gate),
                             rec.base_nll)
    prefix, ref, nll = dynamic_refs(base, adapted, x, cfg.k, counter, cfg.dynamic_prefix_source)
    return SampleContext(qid, x, prefix, ref.data, gate_factor(nll, cfg.gate), nll)


def sample_losses(adapted: ModelState, ctx: SampleContext, cfg: AdaptConfig,
                  counter: PassCounter | None = None) -> LossBundle:
    """Differentiable part: one adapted forward over query || prefix[:-1]."""
    plan = _plan(cfg)
    hook = None if counter is None else counter.hook("adapted", "adaptation")
    x = ctx.x
    m = len(x)
    if ctx.prefix is None:
        logits = forward_logits(adapted, x, on_pass=hook)
        l_ida = ida_from_logits(logits, x, ctx.gate) if plan.use_ida else zero()
        return LossBundle(l_ida, zero(), zero(), zero(), m, 0, ctx.gate > 0, ctx.gate)
    k = len(ctx.prefix)
    logits = forward_logits(adapted, x + ctx.prefix[:-1], on_pass=hook)
    rows = logits[prefix_rows(m, k)]
    l_ida = ida_from_logits(logits, x, ctx.gate) if plan.use_ida else zero()
    l_ent = entropy_loss(rows, cfg.entropy_mode) if plan.use_ocs else zero()
    l_kl = kl_loss(rows, ctx.ref, cfg.kl_direction) if ctx.ref is not None else zero()
    l_ocs = ocs_loss(l_ent, l_kl, plan.lambda_kl, cfg.composition) if plan.use_ocs else zero()
    return LossBundle(l_ida, l_ent, l_kl, l_ocs, m, k, ctx.gate > 0, ctx.gate)


def aggregate(bundles, w_ida, w_ocs, cfg: AdaptConfig) -> Tensor:
    plan = _plan(cfg)
    return batch_loss(bundles, w_ida, w_ocs, plan.lambda_kl, cfg.composition)


def compute_weights(bundles, cfg: AdaptConfig, diw_state: DiwState, selected=None):
    """Per-sample (w_ida, w_ocs) and the updated weighting state."""
    plan = _plan(cfg)
    B = len(bundles)
    if plan.weights is not None:
        wi, wo = np.full(B, plan.weights[0]), np.full(B, plan.weights[1])
        l_ida = np.array([b.l_ida.item() for b in bundles])
        l_ocs = np.array([b.l_ocs.item() for b in bundles])
        total = float(l_ida.mean() + l_ocs.mean())
        ema = total if diw_state.ema is None else cfg.diw.beta * diw_state.ema + (1 - cfg.diw.beta) * total
        new = DiwState(ema, diw_state.step + 1, float(wi.mean()), float(wo.mean()),
                       float(plan.weights[1] / plan.weights[0]) if plan.weights[0] else math.inf, False)
    else:
        l_ida = [b.l_ida.item() for b in bundles]
        l_ocs = [b.l_ocs.item() for b in bundles]
        wi, wo, new = diw_weights(diw_state, l_ida, l_ocs, cfg.diw)
    if selected is not None:
        wo = np.where(selected, wo, 0.0)
    return wi, wo, new


def lr_at(cfg: AdaptConfig, step: int, total_steps: int) -> float:
    if cfg.scheduler == "constant" or total_steps <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def calibrate_eata_threshold(base: ModelState, cohort: Cohort, k: int, counter: PassCounter) -> float:
    """Mean frozen-model per-step entropy along each query's greedy prefix."""
    hook = counter.hook("base", "calibration")
    vals = []
    for x in cohort.queries:
        _, rows = decode(base, x, k, stop_token=None, use_adapters=False, on_pass=hook)
        vals.append(float(entropy_np(rows).mean()))
    return math.fsum(vals) / len(vals)


# ---------------------------------------------------------------------------
# run log


@dataclass
class RunLog:
    config: dict
    cohort_id: str = ""
    steps: list = field(default_factory=list)
    counter: PassCounter = field(default_factory=PassCounter)
    eata_threshold: float | None = None
    cache_size: int = 0

    def loss_trajectory(self, key: str = "l_batch") -> np.ndarray:
        return np.array([s[key] for s in self.steps], dtype=np.float64)

    def diw_rows(self) -> list[dict]:
        return [{"step": s["step"], "l_ida": s["l_ida"], "l_ocs": s["l_ocs"], "ema": s["ema"],
                 "alpha": s["alpha"], "w_ida": s["w_ida"], "w_ocs": s["w_ocs"]} for s in self.steps]

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.steps:
                fh.write(json.dumps(s, sort_keys=True) + "\n")


def _mean(values) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def adapt_cohort(base: ModelState, cohort: Cohort, cfg: AdaptConfig,
                 counter: PassCounter | None = None) -> tuple[ModelState, RunLog]:
    """Adapt a copy of ``base`` on the cohort's queries; ``base`` is left untouched.

    Training starts from the adapter factors ``base`` currently holds, while
    prefixes, reference logits and gates always come from the frozen weights
    with adapters switched off. Passing a partly adapted state therefore
    resumes adaptation against the original reference model.
    """
    if not isinstance(cohort, Cohort):
        raise TypeError("adapt_cohort takes a Cohort (questions only)")
    counter = counter or PassCounter()
    runlog = RunLog(config=cfg.to_dict(), cohort_id=cohort.cohort_id, counter=counter)
    adapted = base.clone()
    if cfg.strategy == "none":
        return adapted, runlog
    queries = cohort.queries
    limit = base.config.max_context
    for x in queries:
        if len(x) < 2 or len(x) + cfg.k - 1 > limit:
            raise AdaptConfigError(f"query of length {len(x)} does not fit (k={cfg.k}, context {limit})")

    cache = None
    if cfg.strategy == "sytta" and cfg.mode == "static_ref":
        cache = build_static_cache(base, cohort, cfg.k, counter)
        runlog.cache_size = len(cache)
    threshold = None
    if cfg.strategy == "eata":
        threshold = cfg.eata_threshold
        if threshold is None:
            threshold = calibrate_eata_threshold(base, cohort, cfg.k, counter)
        runlog.eata_threshold = threshold

    rng = np.random.default_rng(cfg.seed)
    M, B = len(queries), cfg.batch_size
    batches = []
    for _ in range(cfg.epochs):
        order = rng.permutation(M)
        batches.extend(order[i:i + B] for i in range(0, M, B))
    total_steps = len(batches)
    diw_state = DiwState()

    for step, batch in enumerate(batches):
        if len(batch) == 0:
            continue
        lr = lr_at(cfg, step, total_steps)
        adapted.zero_grad()
        contexts = [prepare_sample(int(q), queries[q], base, adapted, cfg, cache, counter) for q in batch]
        bundles = [sample_losses(adapted, c, cfg, counter) for c in contexts]
        selected = None
        if cfg.strategy == "eata":
            selected = np.array([b.l_ent.item() / (b.k if cfg.entropy_mode == "cumulative" else 1)
                                 >= threshold for b in bundles])
        w_ida, w_ocs, diw_state = compute_weights(bundles, cfg, diw_state, selected)
        loss = aggregate(bundles, w_ida, w_ocs, cfg)
        values = [b.values() for b in bundles]
        if not math.isfinite(loss.item()) or not all(math.isfinite(v) for d in values for v in d.values()):
            raise NumericalError(f"non-finite loss at step {step}",
                                 {"step": step, "batch": [int(q) for q in batch], "losses": values,
                                  "lr": lr})
        if loss.requires_grad:
            loss.backward()
            for t in adapted.adapters.values():
                if t.grad is not None:
                    t.data = t.data - lr * t.grad
        record = {
            "step": step, "lr": lr, "batch": [int(q) for q in batch], "l_batch": loss.item(),
            "l_ida": _mean([v["l_ida"] for v in values]),
            "l_ent": _mean([v["l_ent"] for v in values]),
            "l_kl": _mean([v["l_kl"] for v in values]),
            "l_ocs": _mean([v["l_ocs"] for v in values]),
            "per_sample": values,
            "ema": diw_state.ema, "alpha": diw_state.alpha,
            "w_ida": float(np.mean(w_ida)), "w_ocs": float(np.mean(w_ocs)),
            "w_ida_vec": [float(w) for w in w_ida], "w_ocs_vec": [float(w) for w in w_ocs],
            "n_gated_in": int(sum(b.gated_in for b in bundles)),
            "n_selected": None if selected is None else int(selected.sum()),
            "passes": counter.to_dict(),
        }
        runlog.steps.append(record)
        log.debug("step %d lr %.3g loss %.5f", step, lr, record["l_batch"])
    adapted.zero_grad()
    return adapted, runlog


# ---------------------------------------------------------------------------
# evaluation and protocol


@dataclass
class CohortReport:
    cohort_id: str
    domain: str
    strategy: str
    mode: str
    k: int
    M: int
    seed: int
    rouge_lsum: float | None = None
    rouge_precision: float | None = None
    rouge_recall: float | None = None
    mean_question_nll: float | None = None
    mean_prefix_entropy: float | None = None
    mean_response_prefix_entropy: float | None = None
    passes: dict = field(default_factory=dict)
    base_checksum: str = ""
    config: dict = field(default_factory=dict)
    responses: list = field(default_factory=list)
    per_sample_f1: list = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def evaluate_state(state: ModelState, cohort: Cohort, references, k: int, max_new: int,
                   counter: PassCounter | None = None, workers: int = 1) -> dict:
    """Score ``state`` on the cohort.

    Reports greedy responses and ROUGE-L_sum x100, plus two frozen-context
    diagnostics. The mean question NLL is one of them. The mean per-token
    entropy along the frozen model's greedy k-prefix is the other; both models
    are then compared on identical contexts. The entropy of the first k steps
    of each model's own response is kept as ``mean_response_prefix_entropy``.
    """
    counter = counter or PassCounter()
    queries = cohort.queries

    def one(x):
        local = PassCounter()
        adapted_hook = local.hook("adapted", "response")
        tokens, ents = decode_with_entropies(state, x, max_new, on_pass=adapted_hook)
        prefix = gen_prefix(state, x, k, use_adapters=False, on_pass=local.hook("base", "evaluation"))
        with ad.no_grad():
            logits = forward_logits(state, list(x) + list(prefix[:-1]), on_pass=adapted_hook)
            nll = sequence_nll(logits, x).item()
            pref_ent = float(entropy_np(logits.data[prefix_rows(len(x), k)]).mean())
        return tokens, ents, nll, pref_ent, local

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(one, queries))
    else:
        outs = [one(x) for x in queries]
    responses, nlls, prefix_ents, own_ents = [], [], [], []
    for tokens, ents, nll, pref_ent, local in outs:
        counter.tick("adapted", "response", local.total("adapted", "response"))
        counter.tick("base", "evaluation", local.total("base", "evaluation"))
        responses.append(decode_response(tokens))
        nlls.append(nll)
        prefix_ents.append(pref_ent)
        own_ents.append(float(np.mean(ents[:k])) if len(ents) else 0.0)
    out = {"responses": responses, "mean_question_nll": _mean(nlls),
           "mean_prefix_entropy": _mean(prefix_ents), "mean_response_prefix_entropy": _mean(own_ents)}
    if references is not None:
        if len(references) != len(queries):
            raise ValueError("references must align with cohort questions")
        scores = [rouge_lsum(c, r) for c, r in zip(responses, references)]
        out["per_sample_f1"] = [100 * s.f1 for s in scores]
        out["rouge_lsum"] = 100 * _mean([s.f1 for s in scores])
        out["rouge_precision"] = 100 * _mean([s.precision for s in scores])
        out["rouge_recall"] = 100 * _mean([s.recall for s in scores])
    return out


def run_cohort_protocol(base: ModelState, cohorts, cfg: AdaptConfig, references=None,
                        workers: int = 1, runlogs: list | None = None) -> list[CohortReport]:
    """reset -> adapt -> freeze -> answer the same queries -> score, per cohort.

    ``references`` maps cohort_id to reference answers and is consulted only
    for scoring. A failing cohort yields a report with ``error`` set.
    """
    checksum = base.checksum()
    reports = []
    for cohort in cohorts:
        state = reset_to_base(base.clone())
        counter = PassCounter()
        report = CohortReport(cohort.cohort_id, cohort.domain, cfg.strategy, cfg.mode, cfg.k, len(cohort),
                              cfg.seed, base_checksum=checksum, config=cfg.to_dict())
        try:
            adapted, runlog = adapt_cohort(state, cohort, cfg, counter)
            if runlogs is not None:
                runlogs.append(runlog)
            refs = None if references is None else references.get(cohort.cohort_id)
            ev = evaluate_state(adapted, cohort, refs, cfg.k, cfg.max_new_tokens, counter, workers)
            for key in ("rouge_lsum", "rouge_precision", "rouge_recall", "mean_question_nll",
                        "mean_prefix_entropy", "mean_response_prefix_entropy", "responses", "per_sample_f1"):
                if key in ev:
                    setattr(report, key, ev[key])
        except (NumericalError, AdaptConfigError, ValueError) as exc:
            log.warning("cohort %s failed: %s", cohort.cohort_id, exc)
            report.error = f"{type(exc).__name__}: {exc}"
        report.passes = counter.to_dict()
        if base.checksum() != checksum:
            raise RuntimeError("base weights changed during the protocol")
        reports.append(report)
    return reports


def strategy_config(name: str, base_cfg: AdaptConfig) -> AdaptConfig:
    """Named comparison rows: base, tent, eata, tlm, sytta-static, sytta-dynamic."""
    table = {
        "base": dict(strategy="none"),
        "tent": dict(strategy="tent"),
        "eata": dict(strategy="eata"),
        "tlm": dict(strategy="tlm"),
        "sytta-static": dict(strategy="sytta", mode="static_ref"),
        "sytta-dynamic": dict(strategy="sytta", mode="dynamic_ref"),
    }
    if name not in table:
        raise AdaptConfigError(f"unknown strategy row {name!r}; known: {sorted(table)}")
    return replace(base_cfg, **table[name])


COMPARE_ROWS = ("base", "tent", "eata", "tlm", "sytta-static", "sytta-dynamic")
