"""Meta-gradients against oracles, truncation semantics, and strategies."""

import numpy as np
import pytest

from unrolldd import innerloop as il
from unrolldd import lrha as lr
from unrolldd import oracle
from unrolldd.innerloop import TruncationWindow, UnrollConfig

from helpers import FakeRng, rel_err


def _flat(wrt):
    return np.concatenate([wrt[k].reshape(-1) for k in sorted(wrt)])


# ---------------------------------------------------------------------------
# window arithmetic
# ---------------------------------------------------------------------------

def test_window_start_and_span():
    w = TruncationWindow(end=10, size=4)
    assert (w.start, w.span) == (7, 4)
    w = TruncationWindow(end=3, size=8)  # clipped at the first step
    assert (w.start, w.span) == (1, 3)
    assert TruncationWindow(end=5, size=1).span == 1
    with pytest.raises(ValueError):
        TruncationWindow(end=0, size=1)
    with pytest.raises(ValueError):
        TruncationWindow(end=4, size=5).validate(3)


def test_single_step_window_has_no_hessian_products():
    problem, cfg, theta0 = oracle.make_quadratic(p=5, seed=0, steps=6)
    mg = il._backprop_meta_gradient(
        "t-bptt", theta0, problem, cfg, TruncationWindow(6, 1), 1.0
    )
    assert mg.diagnostics["hvp_count"] == 1
    assert mg.diagnostics["window_span"] == 1


# ---------------------------------------------------------------------------
# oracle agreement
# ---------------------------------------------------------------------------

def test_quadratic_closed_form_full_and_truncated():
    problem, cfg, theta0 = oracle.make_quadratic(p=8, seed=1, alpha=0.3, steps=7)
    for window in (None, TruncationWindow(7, 4), TruncationWindow(4, 2),
                   TruncationWindow(6, 1)):
        if window is None:
            mg = il.meta_gradient("bptt", theta0, problem, cfg)
        else:
            mg = il._backprop_meta_gradient("t-bptt", theta0, problem, cfg, window, 1.0)
        exact = oracle.quadratic_hypergradient(problem, theta0, cfg, window)
        assert rel_err(mg.wrt["s"], exact) < 1e-10


def test_backprop_equals_analytic_logistic():
    problem, cfg, theta0 = oracle.make_logistic(seed=2, n=5, d=3, classes=3,
                                                n_val=6, alpha=0.2, steps=5)
    for window in (TruncationWindow(5, 5), TruncationWindow(5, 2),
                   TruncationWindow(3, 2)):
        direct = il._backprop_meta_gradient("t-bptt", theta0, problem, cfg, window, 1.0)
        analytic = il.analytic_meta_gradient(theta0, problem, cfg, window)
        assert rel_err(_flat(direct.wrt), _flat(analytic.wrt)) < 1e-8


def test_backprop_matches_finite_differences_two_layer():
    problem, cfg, theta0 = oracle.make_two_layer_tanh(seed=3, alpha=0.1, steps=4)
    window = TruncationWindow(4, 3)
    direct = il._backprop_meta_gradient("t-bptt", theta0, problem, cfg, window, 1.0)
    numeric = oracle.fd_hypergradient(theta0, problem, cfg, window)
    assert rel_err(_flat(direct.wrt), _flat(numeric)) < 1e-4


def test_adam_unroll_matches_finite_differences():
    problem, cfg, theta0 = oracle.make_logistic(seed=4, n=5, d=3, classes=2,
                                                n_val=5, alpha=0.05, steps=4,
                                                optimizer="adam")
    window = TruncationWindow(4, 2)
    direct = il._backprop_meta_gradient("t-bptt", theta0, problem, cfg, window, 1.0)
    numeric = oracle.fd_hypergradient(theta0, problem, cfg, window)
    assert rel_err(_flat(direct.wrt), _flat(numeric)) < 1e-4


def test_truncation_freezes_the_prefix():
    # a window (T, M) gradient equals full bptt restarted from theta_{T-M}
    problem, cfg, theta0 = oracle.make_logistic(seed=5, n=6, d=3, classes=3,
                                                n_val=6, alpha=0.25, steps=6)
    window = TruncationWindow(6, 3)
    trunc = il._backprop_meta_gradient("t-bptt", theta0, problem, cfg, window, 1.0)

    prefix, _, _, _, _ = il.unroll_states(theta0, problem, cfg, upto=window.start - 1)
    short = UnrollConfig(steps=3, alpha=cfg.alpha)
    restart = il.meta_gradient("bptt", prefix, problem, short)
    assert rel_err(_flat(trunc.wrt), _flat(restart.wrt)) < 1e-12


# ---------------------------------------------------------------------------
# strategy dispatch and degeneracies
# ---------------------------------------------------------------------------

def test_tbptt_full_window_is_bptt_bit_identical():
    problem, cfg, theta0 = oracle.make_logistic(seed=6, steps=5)
    full = il.meta_gradient("bptt", theta0, problem, cfg)
    trunc = il.meta_gradient("t-bptt", theta0, problem, cfg,
                             {"window_size": cfg.steps})
    for name in full.wrt:
        assert np.array_equal(full.wrt[name], trunc.wrt[name])


def test_rat_forced_to_end_is_tbptt():
    problem, cfg, theta0 = oracle.make_logistic(seed=7, steps=5)
    t = il.meta_gradient("t-bptt", theta0, problem, cfg, {"window_size": 3})
    r = il.meta_gradient("rat-bptt", theta0, problem, cfg,
                         {"window_size": 3, "forced_position": cfg.steps,
                          "rng": FakeRng([0.0])})
    for name in t.wrt:
        assert np.array_equal(t.wrt[name], r.wrt[name])


def test_at_middle_no_range_forced_end_is_bptt():
    problem, cfg, theta0 = oracle.make_logistic(seed=8, steps=5)
    from unrolldd import schedule as sched
    scfg = sched.ScheduleConfig(window=cfg.steps, window_range=0)
    at = il.meta_gradient("at-bptt", theta0, problem, cfg, {
        "schedule_config": scfg,
        "stage_state": sched.StageState(stage="middle"),
        "forced_position": cfg.steps,
        "rng": FakeRng([0.0]),
    })
    full = il.meta_gradient("bptt", theta0, problem, cfg)
    for name in full.wrt:
        assert np.array_equal(full.wrt[name], at.wrt[name])
    assert at.diagnostics["position_probability"] == 1.0 / cfg.steps


def test_rat_sampling_uses_uniform_inverse_cdf():
    problem, cfg, theta0 = oracle.make_logistic(seed=9, steps=5)
    # u = 0.55 lands in the third uniform bucket of five
    mg = il.meta_gradient("rat-bptt", theta0, problem, cfg,
                          {"window_size": 2, "rng": FakeRng([0.55])})
    assert mg.diagnostics["window_end"] == 3
    assert mg.diagnostics["position_probability"] == 0.2


def test_at_uses_previous_trace_distributions():
    problem, cfg, theta0 = oracle.make_logistic(seed=10, steps=4)
    from unrolldd import schedule as sched
    scfg = sched.ScheduleConfig(window=2, window_range=1)
    prev = il.unroll(theta0, problem, cfg)[1]
    probs = sched.trunc_probs(prev.grad_norms, "early", scfg.tau)
    # pick u so the sampled position is the argmax step
    target = int(np.argmax(probs)) + 1
    cdf = np.cumsum(probs)
    u = (cdf[target - 1] + (cdf[target - 2] if target > 1 else 0.0)) / 2.0
    mg = il.meta_gradient("at-bptt", theta0, problem, cfg, {
        "schedule_config": scfg,
        "stage_state": sched.StageState(),
        "prev_trace": prev,
        "rng": FakeRng([float(u)]),
    })
    assert mg.diagnostics["window_end"] == target
    assert abs(mg.diagnostics["position_probability"] - probs[target - 1]) < 1e-15


def test_first_epoch_at_defaults_to_uniform():
    problem, cfg, theta0 = oracle.make_logistic(seed=11, steps=5)
    from unrolldd import schedule as sched
    scfg = sched.ScheduleConfig(window=3, window_range=1)
    mg = il.meta_gradient("at-bptt", theta0, problem, cfg, {
        "schedule_config": scfg,
        "stage_state": sched.StageState(),
        "rng": FakeRng([0.99]),
    })
    assert mg.diagnostics["window_end"] == 5
    assert mg.diagnostics["position_probability"] == 0.2
    # eta = 1/T under 0.5 drives the width to its lower clamp
    assert mg.diagnostics["window_size"] == 2


def test_unknown_strategy_rejected():
    problem, cfg, theta0 = oracle.make_logistic(seed=12, steps=3)
    with pytest.raises(ValueError):
        il.meta_gradient("dream-bptt", theta0, problem, cfg)


# ---------------------------------------------------------------------------
# traces and diagnostics
# ---------------------------------------------------------------------------

def test_trace_covers_all_steps_and_checkpoints_cover_window():
    problem, cfg, theta0 = oracle.make_logistic(seed=13, steps=6)
    window = TruncationWindow(4, 2)
    res = il.unroll_taped(theta0, problem, cfg, window)
    assert res.trace.grad_norms.shape == (6,)
    assert res.trace.accuracies.shape == (6,)
    assert np.all(res.trace.grad_norms > 0.0)
    assert res.trace.variations[0] == 0.0
    assert sorted(res.trace.checkpoints) == [2, 3, 4]  # start-1 .. end
    assert np.array_equal(res.trace.checkpoints[4], res.theta_end_values)


def test_hvp_count_equals_span_and_tape_grows_with_window():
    problem, cfg, theta0 = oracle.make_logistic(seed=14, steps=6)
    nodes = []
    for size in (1, 3, 6):
        mg = il.meta_gradient("t-bptt", theta0, problem, cfg, {"window_size": size})
        assert mg.diagnostics["hvp_count"] == size
        nodes.append(mg.diagnostics["tape_nodes_forward"])
    assert nodes[0] < nodes[1] < nodes[2]


def test_meta_gradient_flat_ordering():
    problem, cfg, theta0 = oracle.make_logistic(seed=15, steps=3)
    mg = il.meta_gradient("bptt", theta0, problem, cfg)
    flat = mg.flat()
    assert flat.size == problem.svars["images"].size + problem.svars["labels"].size
    assert np.array_equal(flat[: problem.svars["images"].size],
                          mg.wrt["images"].reshape(-1))
    assert mg.wrt_images is mg.wrt["images"]
    assert mg.wrt_labels is mg.wrt["labels"]


def test_batch_schedule_changes_the_gradient():
    base_problem, cfg, theta0 = oracle.make_logistic(seed=16, n=6, steps=4)
    full = il.meta_gradient("bptt", theta0, base_problem, cfg)

    sub_problem, _, _ = oracle.make_logistic(seed=16, n=6, steps=4)
    batched = UnrollConfig(steps=4, alpha=cfg.alpha,
                           batch_schedule=lambda step: np.array([0, 1, 2]))
    # the supervised problem ignores cfg batching, so emulate it by slicing
    class Sliced:
        svars = sub_problem.svars

        def inner_loss(self, theta, svars, step):
            import unrolldd.autodiff as ad
            idx = np.array([0, 1, 2])
            images = ad.gather_rows(svars["images"], idx)
            labels = ad.gather_rows(svars["labels"], idx)
            from unrolldd import models
            logits = models.forward(sub_problem.spec, theta, images)
            return models.loss(logits, labels)

        outer_loss = sub_problem.outer_loss
        accuracy = sub_problem.accuracy

    sliced = il.meta_gradient("bptt", theta0, Sliced(), cfg)
    # rows outside the batch get no inner-loss gradient
    assert np.all(sliced.wrt["images"][3:] != full.wrt["images"][3:]) or \
        np.allclose(sliced.wrt["images"][3:], 0.0)
    assert np.allclose(sliced.wrt["images"][3:], 0.0)


# ---------------------------------------------------------------------------
# product-form backward
# ---------------------------------------------------------------------------

def test_product_form_full_rank_matches_exact():
    problem, cfg, theta0 = oracle.make_logistic(seed=17, n=4, d=3, classes=2,
                                                n_val=5, alpha=0.2, steps=5)
    window = TruncationWindow(5, 4)
    exact = il._backprop_meta_gradient("t-bptt", theta0, problem, cfg, window, 1.0)
    p = theta0.size
    si = {"lrha_config": lr.LrhaConfig(enabled=True, k_min=p, k_max_fraction=1.0),
          "lrha_rng": np.random.default_rng(0)}
    prod = il._product_form_meta_gradient("at-bptt", theta0, problem, cfg,
                                          window, 1.0, si)
    assert rel_err(_flat(prod.wrt), _flat(exact.wrt)) < 1e-7
    assert prod.diagnostics["mode"] == "lrha"
    assert len(prod.diagnostics["lrha_ranks"]) == window.span - 1
    assert prod.diagnostics["lrha_fallbacks"] == 0


def test_product_form_counts_operator_products():
    problem, cfg, theta0 = oracle.make_quadratic(p=9, seed=18, steps=5)
    window = TruncationWindow(5, 3)
    counter = lr.HvpCounter()
    si = {"lrha_config": lr.LrhaConfig(enabled=True, k_min=4, k_max_fraction=1.0),
          "lrha_rng": np.random.default_rng(1), "hvp_counter": counter}
    prod = il._product_form_meta_gradient("at-bptt", theta0, problem, cfg,
                                          window, 1.0, si)
    # two interior factorizations at 6k products each
    expected = sum(6 * k for k in prod.diagnostics["lrha_ranks"])
    assert counter.count == expected
    assert prod.diagnostics["hvp_count"] == expected


def test_product_form_falls_back_on_factorization_failure(monkeypatch):
    problem, cfg, theta0 = oracle.make_quadratic(p=6, seed=19, steps=4)
    window = TruncationWindow(4, 3)

    def boom(*args, **kwargs):
        raise np.linalg.LinAlgError("synthetic breakdown")

    monkeypatch.setattr(lr, "factorize", boom)
    si = {"lrha_config": lr.LrhaConfig(enabled=True, k_min=3, k_max_fraction=1.0),
          "lrha_rng": np.random.default_rng(2)}
    prod = il._product_form_meta_gradient("at-bptt", theta0, problem, cfg,
                                          window, 1.0, si)
    assert prod.diagnostics["lrha_fallbacks"] == window.span - 1
    exact = oracle.quadratic_hypergradient(problem, theta0, cfg, window)
    assert rel_err(prod.wrt["s"], exact) < 1e-10  # exact HVPs stand in


def test_product_form_requires_sgd():
    problem, cfg, theta0 = oracle.make_logistic(seed=20, steps=3, optimizer="adam")
    si = {"lrha_config": lr.LrhaConfig(enabled=True)}
    with pytest.raises(ValueError):
        il._product_form_meta_gradient("at-bptt", theta0, problem, cfg,
                                       TruncationWindow(3, 2), 1.0, si)


def test_analytic_weighted_positions():
    problem, cfg, theta0 = oracle.make_quadratic(p=5, seed=21, steps=4)
    probs = np.array([0.0, 0.5, 0.0, 0.5])
    mixed = il.analytic_meta_gradient(theta0, problem, cfg,
                                      window=TruncationWindow(4, 2),
                                      literal_position_probs=probs)
    a = oracle.quadratic_hypergradient(problem, theta0, cfg, TruncationWindow(2, 2))
    b = oracle.quadratic_hypergradient(problem, theta0, cfg, TruncationWindow(4, 2))
    assert rel_err(mixed.wrt["s"], 0.5 * a + 0.5 * b) < 1e-10
