"""Position distributions, adaptive width, and stage-transition counters."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unrolldd import schedule as sched
from unrolldd.schedule import ScheduleConfig, StageState

from helpers import FakeRng

norm_vectors = st.lists(
    st.floats(0.0, 50.0, allow_nan=False), min_size=1, max_size=24
).map(np.array)


@settings(max_examples=60, deadline=None)
@given(norms=norm_vectors, stage=st.sampled_from(sched.STAGES),
       tau=st.floats(0.1, 5.0))
def test_probs_form_a_distribution(norms, stage, tau):
    probs = sched.trunc_probs(norms, stage, tau)
    assert probs.shape == norms.shape
    assert np.all(probs >= 0.0)
    assert abs(probs.sum() - 1.0) < 1e-12


def test_stagewise_extremes():
    norms = np.array([3.0, 9.0, 1.0, 4.0])
    early = sched.trunc_probs(norms, "early", 1.0)
    late = sched.trunc_probs(norms, "late", 1.0)
    middle = sched.trunc_probs(norms, "middle", 1.0)
    assert int(np.argmax(early)) == int(np.argmax(norms))
    assert int(np.argmax(late)) == int(np.argmin(norms))
    assert np.all(middle == 0.25)


def test_standardization_makes_scale_irrelevant():
    norms = np.array([1.0, 2.0, 3.0])
    a = sched.trunc_probs(norms, "early", 1.0, standardize=True)
    b = sched.trunc_probs(norms * 1000.0, "early", 1.0, standardize=True)
    assert np.allclose(a, b, atol=1e-12)
    raw_a = sched.trunc_probs(norms, "early", 1.0, standardize=False)
    raw_b = sched.trunc_probs(norms * 1000.0, "early", 1.0, standardize=False)
    assert not np.allclose(raw_a, raw_b)


def test_probs_input_validation():
    with pytest.raises(ValueError):
        sched.trunc_probs(np.array([1.0]), "early", 0.0)
    with pytest.raises(ValueError):
        sched.trunc_probs(np.array([-1.0]), "early", 1.0)
    with pytest.raises(ValueError):
        sched.trunc_probs(np.array([np.inf]), "late", 1.0)
    with pytest.raises(ValueError):
        sched.trunc_probs(np.array([1.0]), "warmup", 1.0)


def test_single_step_late_stage():
    assert sched.trunc_probs(np.array([5.0]), "late", 1.0)[0] == 1.0


def test_sample_position_inverse_cdf():
    probs = np.array([0.2, 0.3, 0.5])
    assert sched.sample_position(probs, FakeRng([0.0])) == 1
    assert sched.sample_position(probs, FakeRng([0.19])) == 1
    assert sched.sample_position(probs, FakeRng([0.21])) == 2
    assert sched.sample_position(probs, FakeRng([0.51])) == 3
    assert sched.sample_position(probs, FakeRng([0.999])) == 3


def test_sample_position_rejects_bad_distributions():
    with pytest.raises(ValueError):
        sched.sample_position(np.array([0.5, 0.4]), FakeRng([0.1]))
    with pytest.raises(ValueError):
        sched.sample_position(np.array([1.5, -0.5]), FakeRng([0.1]))


def test_window_weight_is_raw_softmax():
    v = np.array([0.0, 1.0, 2.0])
    eta = sched.window_weight(v, 1.0)
    e = np.exp(v - 2.0)
    assert np.allclose(eta, e / e.sum(), atol=1e-15)
    assert abs(eta.sum() - 1.0) < 1e-12


def test_window_size_formula_points():
    # eta = 0 gives W - d, eta = 1/2 gives W, eta = 1 gives W + d
    assert sched.window_size(8, 2, 0.0, 100) == 6
    assert sched.window_size(8, 2, 0.5, 100) == 8
    assert sched.window_size(8, 2, 1.0, 100) == 10
    assert sched.window_size(8, 0, 0.7, 100) == 8  # d = 0 pins the width


def test_window_size_monotone_in_eta():
    last = 0
    for eta in np.linspace(0.0, 1.0, 21):
        w = sched.window_size(10, 3, float(eta), 50)
        assert w >= last
        last = w


@settings(max_examples=80, deadline=None)
@given(
    w=st.integers(1, 40),
    d=st.integers(0, 10),
    eta=st.floats(0.0, 1.0),
    extra=st.integers(0, 30),
)
def test_window_size_respects_bounds(w, d, eta, extra):
    lo = max(1, w - d)
    position = lo + extra  # keep the clamp interval non-empty
    got = sched.window_size(w, d, eta, position)
    assert lo <= got <= min(position, w + d)


def test_window_size_with_few_available_steps():
    # fewer steps than the nominal lower bound: the available count wins
    assert sched.window_size(40, 10, 0.5, 5) == 5
    assert sched.window_size(40, 10, 1.0, 1) == 1


def test_reference_range_forty_ten():
    sizes = {sched.window_size(40, 10, eta, 100)
             for eta in np.linspace(0.0, 1.0, 201)}
    assert min(sizes) == 30
    assert max(sizes) == 50


def test_stage_transition_replay_example():
    cfg = ScheduleConfig(window=4, window_range=1, thresh_early=1.5,
                         count_early=3, count_mid=2)
    state = StageState()
    seen = []
    for delta in [1.0, 2.0, 1.0, 1.0]:
        state = sched.update_stage(state, delta, cfg)
        seen.append(state.stage)
    # gains 1.0, 1.0, 1.0 are the ones under 1.5; the third flips the stage
    assert seen == ["early", "early", "early", "middle"]


def test_counters_are_stage_gated():
    cfg = ScheduleConfig(window=4, window_range=1, count_early=1, count_mid=2)
    state = StageState()
    state = sched.update_stage(state, 0.0, cfg)  # early -> middle immediately
    assert state.stage == "middle"
    assert state.c_mid == 0  # the flipping epoch does not feed the next counter
    state = sched.update_stage(state, 0.5, cfg)
    assert state.c_mid == 1
    state = sched.update_stage(state, 5.0, cfg)  # above thresh: no count
    assert state.c_mid == 1
    state = sched.update_stage(state, 0.5, cfg)
    assert state.stage == "late"


def test_late_stage_absorbs():
    cfg = ScheduleConfig(window=4, window_range=1)
    state = StageState(stage="late")
    for delta in [-5.0, 0.0, 9.0]:
        state = sched.update_stage(state, delta, cfg)
        assert state.stage == "late"


def test_randomized_transitions_match_replay():
    rng = np.random.default_rng(0)
    for _ in range(30):
        epochs = int(rng.integers(5, 40))
        x = int(rng.integers(1, 5))
        y = int(rng.integers(1, 5))
        cfg = ScheduleConfig(window=4, window_range=1, thresh_early=1.5,
                             thresh_mid=1.0, count_early=x, count_mid=y)
        deltas = rng.normal(1.2, 1.0, size=epochs)

        state = StageState()
        stages = []
        for d in deltas:
            state = sched.update_stage(state, d, cfg)
            stages.append(state.stage)

        # brute-force replay with plain counters
        expect = []
        stage, ce, cm = "early", 0, 0
        for d in deltas:
            if stage == "early":
                ce += 1 if d < 1.5 else 0
                if ce >= x:
                    stage = "middle"
            elif stage == "middle":
                cm += 1 if d < 1.0 else 0
                if cm >= y:
                    stage = "late"
            expect.append(stage)
        assert stages == expect
