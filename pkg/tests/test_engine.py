import json
from dataclasses import replace

import numpy as np
import pytest

from sytta.corpus import Cohort, DomainSpec, generate_cohort
from sytta.engine import (COMPARE_ROWS, AdaptConfig, AdaptConfigError, NumericalError, PassCounter, PrefixRecord,
                          adapt_cohort, aggregate, build_static_cache, compute_weights, dynamic_refs,
                          expected_pass_count, prepare_sample, run_cohort_protocol, sample_losses,
                          strategy_config)
from sytta.lm import LmConfig, ModelState, forward_logits, gen_prefix
from sytta.weighting import DiwState

from fd import numeric_grad, rel_err

SMALL = LmConfig(n_layers=1, d_model=16, n_heads=2, max_context=128, rank=2)


@pytest.fixture(scope="module")
def base():
    return ModelState.create(SMALL, seed=1)


def cohort(M=6, seed=0, name="agri"):
    return generate_cohort(DomainSpec(name, 1.0, 1.0, M), seed)


def cfg(**kw):
    kw.setdefault("lr", 1e-2)
    kw.setdefault("batch_size", 2)
    kw.setdefault("max_new_tokens", 8)
    return AdaptConfig(**kw)


def test_expected_counts_table():
    assert expected_pass_count("sytta", "static_ref", 100, 4) == 100
    assert expected_pass_count("sytta", "dynamic_ref", 100, 4) == 500
    assert expected_pass_count("tlm", "static_ref", 100, 4) == 200
    assert expected_pass_count("tent", "static_ref", 100, 4) == 500
    assert expected_pass_count("eata", "dynamic_ref", 100, 4) == 500
    with pytest.raises(AdaptConfigError):
        expected_pass_count("sgd", "static_ref", 1, 1)


def test_config_validation():
    for bad in (dict(k=0), dict(batch_size=0), dict(lr=0.0), dict(strategy="x"), dict(mode="y"),
                dict(lambda_kl=-1.0), dict(weight_override=(1.0,))):
        with pytest.raises(AdaptConfigError):
            AdaptConfig(**bad)
    c = AdaptConfig(weight_override=[0, 1])
    assert c.weight_override == (0.0, 1.0)
    assert AdaptConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(AdaptConfigError):
        AdaptConfig.from_dict({"nope": 1})


def test_none_strategy_is_a_noop(base):
    c, _ = cohort(3)
    state, log = adapt_cohort(base, c, cfg(strategy="none"))
    assert log.steps == [] and log.counter.adapted == 0
    assert state.adapters_at_init()


def test_static_cache_records(base):
    c, _ = cohort(5)
    counter = PassCounter()
    cache = build_static_cache(base, c, 1, counter)
    assert len(cache) == 5 and all(len(r.prefix) == 1 and r.ref_logits.shape == (1, 259) for r in cache)
    assert counter.sessions["cache_build"] == 5 and counter.total("base", "cache_build") == 5
    again = build_static_cache(base, c, 1)
    assert all(a.prefix == b.prefix and np.array_equal(a.ref_logits, b.ref_logits) for a, b in zip(cache, again))
    assert not cache[0].ref_logits.flags.writeable
    with pytest.raises(ValueError):
        PrefixRecord(0, (1, 2), np.zeros((1, 259)), 1.0)


def test_dynamic_refs_use_frozen_model_for_references(base):
    x = generate_cohort(DomainSpec("agri", size=1), 0)[0].queries[0]
    adapted = base.clone()
    rng = np.random.default_rng(3)
    adapted.set_adapters({k: rng.normal(scale=0.5, size=v.shape) for k, v in adapted.adapter_arrays().items()})
    prefix, ref, _ = dynamic_refs(base, adapted, x, 4)
    assert prefix == gen_prefix(adapted, x, 4)
    expect = forward_logits(base, list(x) + prefix[:-1], use_adapters=False).data[len(x) - 1:len(x) + 3]
    assert np.array_equal(ref.data, expect)
    # at zero adapters dynamic and static prefixes coincide
    p0, _, _ = dynamic_refs(base, base.clone(), x, 4)
    assert p0 == gen_prefix(base, x, 4, use_adapters=False)


def test_static_and_dynamic_agree_at_step_zero(base):
    c, _ = cohort(4)
    _, s_log = adapt_cohort(base, c, cfg(mode="static_ref", seed=3))
    _, d_log = adapt_cohort(base, c, cfg(mode="dynamic_ref", seed=3))
    assert s_log.steps[0]["per_sample"] == d_log.steps[0]["per_sample"]
    assert s_log.steps[0]["l_batch"] == d_log.steps[0]["l_batch"]


@pytest.mark.parametrize("strategy,mode", [("sytta", "static_ref"), ("sytta", "dynamic_ref"), ("tent", "static_ref"),
                                           ("eata", "static_ref"), ("tlm", "static_ref")])
@pytest.mark.parametrize("M,k", [(1, 1), (3, 2), (5, 4)])
def test_instrumented_counts_match_table(base, strategy, mode, M, k):
    c, _ = cohort(M)
    _, log = adapt_cohort(base, c, cfg(strategy=strategy, mode=mode, k=k))
    assert log.counter.adapted == expected_pass_count(strategy, mode, M, k)


def test_static_cache_base_passes_reported_separately(base):
    c, _ = cohort(3)
    _, log = adapt_cohort(base, c, cfg(k=4))
    assert log.counter.total("base", "cache_build") == 12
    assert log.counter.total("base", "adaptation") == 0


def single_step_state(base, strategy="sytta", **kw):
    c, _ = cohort(1, seed=4)
    conf = cfg(strategy=strategy, batch_size=1, scheduler="constant", lr=0.05, **kw)
    start = base.clone()
    rng = np.random.default_rng(9)
    start.set_adapters({k: rng.normal(scale=0.1, size=v.shape) for k, v in start.adapter_arrays().items()})
    return c, conf, start


def test_single_step_update_equals_minus_lr_times_fd_gradient(base):
    c, conf, start = single_step_state(base)
    x = c.queries[0]
    cache = build_static_cache(base, c, conf.k)
    ctx = prepare_sample(0, x, base, start, conf, cache, PassCounter())
    w_ida, w_ocs, _ = compute_weights([sample_losses(start, ctx, conf)], conf, DiwState())
    adapted, _ = adapt_cohort_from(base, start, c, conf)
    for key, arr in start.adapter_arrays().items():
        def f():
            start.adapters[key].data = arr
            return aggregate([sample_losses(start, ctx, conf)], w_ida, w_ocs, conf).item()
        g = numeric_grad(f, arr, h=1e-4)
        start.adapters[key].data = arr
        assert rel_err(arr - adapted.adapters[key].data, conf.lr * g) <= 1e-5, key


def adapt_cohort_from(frozen_base, start, c, conf):
    """One epoch where references come from ``frozen_base`` but adapters start at ``start``."""
    from sytta import engine
    counter = PassCounter()
    cache = engine.build_static_cache(frozen_base, c, conf.k, counter)
    adapted = start.clone()
    adapted.zero_grad()
    ctx = [engine.prepare_sample(i, x, frozen_base, adapted, conf, cache, counter) for i, x in enumerate(c.queries)]
    bundles = [engine.sample_losses(adapted, cx, conf, counter) for cx in ctx]
    wi, wo, _ = engine.compute_weights(bundles, conf, DiwState())
    loss = engine.aggregate(bundles, wi, wo, conf)
    loss.backward()
    for t in adapted.adapters.values():
        t.data = t.data - engine.lr_at(conf, 0, 1) * t.grad
    return adapted, loss


def test_loop_update_matches_manual_step(base):
    c, _ = cohort(1, seed=4)
    conf = cfg(batch_size=1)
    adapted, _ = adapt_cohort(base, c, conf)
    manual, _ = adapt_cohort_from(base, base.clone(), c, conf)
    for k in adapted.adapters:
        np.testing.assert_allclose(adapted.adapters[k].data, manual.adapters[k].data, rtol=0, atol=1e-15)


def test_one_step_descent(base):
    c, _ = cohort(2, seed=1)
    conf = cfg(batch_size=2, lr=1e-4, scheduler="constant")
    before_state = base.clone()
    counter = PassCounter()
    cache = build_static_cache(base, c, conf.k)
    ctx = [prepare_sample(i, x, base, before_state, conf, cache, counter) for i, x in enumerate(c.queries)]
    b0 = [sample_losses(before_state, cx, conf) for cx in ctx]
    wi, wo, _ = compute_weights(b0, conf, DiwState())
    before = aggregate(b0, wi, wo, conf).item()
    after_state, _ = adapt_cohort(base, c, conf)
    after = aggregate([sample_losses(after_state, cx, conf) for cx in ctx], wi, wo, conf).item()
    assert after < before or abs(after - before) <= 1e-12


def trajectory(log):
    return np.array([[s["l_batch"], s["l_ida"], s["l_ocs"]] for s in log.steps])


def test_tlm_reduces_from_sytta(base):
    c, _ = cohort(6, seed=2)
    _, tlm = adapt_cohort(base, c, cfg(strategy="tlm"))
    _, red = adapt_cohort(base, c, cfg(strategy="sytta", weight_override=(1.0, 0.0), lambda_kl=0.0))
    assert np.abs(tlm.loss_trajectory() - red.loss_trajectory()).max() <= 1e-12
    assert np.abs(tlm.loss_trajectory("l_ida") - red.loss_trajectory("l_ida")).max() <= 1e-12


def test_tent_reduces_from_sytta(base):
    c, _ = cohort(6, seed=2)
    _, tent = adapt_cohort(base, c, cfg(strategy="tent"))
    _, red = adapt_cohort(base, c, cfg(strategy="sytta", mode="dynamic_ref", weight_override=(0.0, 1.0),
                                        lambda_kl=0.0, gate=replace(AdaptConfig().gate, threshold=1e9)))
    assert np.abs(tent.loss_trajectory() - red.loss_trajectory()).max() <= 1e-12
    assert np.abs(tent.loss_trajectory("l_ent") - red.loss_trajectory("l_ent")).max() <= 1e-12


def test_eata_threshold_zero_is_tent(base):
    c, _ = cohort(5, seed=3)
    a, tent = adapt_cohort(base, c, cfg(strategy="tent"))
    b, eata = adapt_cohort(base, c, cfg(strategy="eata", eata_threshold=0.0))
    assert np.array_equal(tent.loss_trajectory(), eata.loss_trajectory())
    assert all(np.array_equal(a.adapters[k].data, b.adapters[k].data) for k in a.adapters)


def test_eata_default_threshold_is_calibrated(base):
    c, _ = cohort(4, seed=3)
    _, log = adapt_cohort(base, c, cfg(strategy="eata"))
    assert log.eata_threshold is not None and log.eata_threshold > 0
    assert log.counter.total("base", "calibration") == 4 * 4
    assert all(0 <= s["n_selected"] <= len(s["batch"]) for s in log.steps)


def test_nan_aborts_with_diagnostics(base):
    c, _ = cohort(2)
    bad = base.clone()
    bad.adapters["h0.q.B"].data = np.full_like(bad.adapters["h0.q.B"].data, np.nan)
    with pytest.raises(NumericalError) as err:
        adapt_cohort(bad, c, cfg())
    assert err.value.diagnostics["step"] == 0


def test_protocol_isolation(base):
    real, refs = cohort(4, seed=1)
    junk, junk_refs = cohort(3, seed=9, name="geo")
    r = {real.cohort_id: refs, junk.cohort_id: junk_refs}
    checksum = base.checksum()
    reports = run_cohort_protocol(base, [real, junk, real], cfg(), r)
    assert reports[0].to_dict() == reports[2].to_dict()
    alone = run_cohort_protocol(base, [real], cfg(), r)[0]
    assert alone.to_dict() == reports[0].to_dict()
    assert base.checksum() == checksum and base.adapters_at_init()
    never = run_cohort_protocol(base, [real], cfg(strategy="none"), r)[0]
    assert never.rouge_lsum is not None and never.passes["adapted"] == 0


def test_reports_carry_config_and_counts(base):
    c, refs = cohort(3)
    rep = run_cohort_protocol(base, [c], cfg(k=2), {c.cohort_id: refs})[0]
    assert rep.config["k"] == 2 and rep.seed == 0 and rep.base_checksum == base.checksum()
    assert rep.passes["adapted"] == 3
    assert rep.passes["phases"]["response"]["adapted"] > 0
    assert len(rep.responses) == 3 and len(rep.per_sample_f1) == 3
    json.dumps(rep.to_dict())


def test_protocol_records_errors_per_cohort(base):
    long_q = Cohort("long", "agri", ("x" * 200,))
    ok, refs = cohort(2)
    reps = run_cohort_protocol(base, [long_q, ok], cfg(), {ok.cohort_id: refs})
    assert reps[0].error and "AdaptConfigError" in reps[0].error
    assert reps[1].error is None


def test_threaded_evaluation_is_order_stable(base):
    c, refs = cohort(4)
    a = run_cohort_protocol(base, [c], cfg(), {c.cohort_id: refs}, workers=1)[0]
    b = run_cohort_protocol(base, [c], cfg(), {c.cohort_id: refs}, workers=3)[0]
    assert a.to_dict() == b.to_dict()


def test_runlog_outputs(base, tmp_path):
    from sytta.weighting import write_trajectory_csv
    c, _ = cohort(4)
    _, log = adapt_cohort(base, c, cfg())
    log.write_jsonl(tmp_path / "run.jsonl")
    lines = (tmp_path / "run.jsonl").read_text().splitlines()
    assert len(lines) == 2 and "w_ida" in json.loads(lines[0])
    write_trajectory_csv(log.diw_rows(), tmp_path / "diw.csv")
    assert (tmp_path / "diw.csv").read_text().startswith("step,l_ida,l_ocs,ema,alpha,w_ida,w_ocs")


def test_cosine_schedule_reaches_zero_at_end():
    from sytta.engine import lr_at
    c = AdaptConfig(lr=1.0)
    assert lr_at(c, 0, 4) == 1.0 and lr_at(c, 2, 4) == pytest.approx(0.5)
    assert lr_at(replace(c, scheduler="constant"), 3, 4) == 1.0


def test_strategy_rows():
    base_cfg = AdaptConfig()
    rows = [strategy_config(n, base_cfg) for n in COMPARE_ROWS]
    assert [r.strategy for r in rows] == ["none", "tent", "eata", "tlm", "sytta", "sytta"]
    assert rows[-2].mode == "static_ref" and rows[-1].mode == "dynamic_ref"
    with pytest.raises(AdaptConfigError):
        strategy_config("bogus", base_cfg)
