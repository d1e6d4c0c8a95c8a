"""Stage-aware placement of the truncation window.

Position probabilities over unroll steps depend on the training stage:
early runs favor steps with large gradient magnitude (softmax of norms over
temperature), the middle stage is uniform, and the late stage inverts the
early weighting, 1 minus softmax renormalized over the remaining mass.
Window width scales with a softmax over gradient-norm variations, and stage
transitions are counter-threshold rules on per-epoch accuracy gains.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

STAGES = ("early", "middle", "late")


@dataclass(frozen=True)
class ScheduleConfig:
    window: int
    window_range: int
    tau: float = 1.0
    thresh_early: float = 1.5
    thresh_mid: float = 1.0
    count_early: int = 1
    count_mid: int = 1
    standardize: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be positive")
        if self.window_range < 0:
            raise ValueError("window range must be non-negative")
        if self.count_early < 1 or self.count_mid < 1:
            raise ValueError("transition counters need positive thresholds")


@dataclass(frozen=True)
class StageState:
    stage: str = "early"
    c_early: int = 0
    c_mid: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage '{self.stage}'")


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max()
    e = np.exp(shifted)
    return e / e.sum()


def trunc_probs(grad_norms, stage, tau, standardize=True) -> np.ndarray:
    """Position distribution over steps 1..T for the given stage.

    By default norms are divided by their mean first, so tau = 1 is a
    usable temperature regardless of the raw gradient scale; pass
    standardize=False to apply the softmax to raw norms.
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    norms = np.asarray(grad_norms, dtype=np.float64)
    if norms.ndim != 1 or norms.size == 0:
        raise ValueError("grad norms must be a non-empty vector")
    if np.any(norms < 0.0) or not np.all(np.isfinite(norms)):
        raise ValueError("grad norms must be finite and non-negative")
    if stage not in STAGES:
        raise ValueError(f"unknown stage '{stage}'")
    t = norms.size

    if stage == "middle":
        return np.full(t, 1.0 / t)

    scaled = norms
    if standardize:
        m = norms.mean()
        if m > 0.0:
            scaled = norms / m
    soft = _softmax(scaled / tau)
    if stage == "early":
        return soft
    if t == 1:  # degenerate late stage: only one position to pick
        return np.ones(1)
    return (1.0 - soft) / (t - 1)


def sample_position(probs, rng) -> int:
    """Inverse-CDF draw; returns a 1-based step index."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("probabilities must be a non-empty vector")
    if np.any(probs < 0.0):
        raise ValueError("negative probability")
    total = probs.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {total}, not 1")
    u = float(rng.random())
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * total, side="right"))
    return min(idx, probs.size - 1) + 1


def window_weight(variations, tau) -> np.ndarray:
    """Softmax over gradient-norm variations; entry t drives the width at t."""
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    v = np.asarray(variations, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("variations must be a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("variations must be finite")
    return _softmax(v / tau)


def window_size(window, window_range, eta_t, position) -> int:
    """Adaptive width W - d + 2*d*eta, clamped to [W - d, W + d] and to the
    number of steps actually available at the sampled position."""
    w, d = int(window), int(window_range)
    if w < 1 or d < 0:
        raise ValueError("invalid window geometry")
    if not (0.0 <= eta_t <= 1.0):
        raise ValueError("eta must lie in [0, 1]")
    position = int(position)
    if position < 1:
        raise ValueError("position must be a 1-based step index")
    raw = int(np.floor(w - d + 2.0 * d * float(eta_t) + 0.5))
    lo = max(1, w - d)
    hi = min(position, w + d)
    return max(lo, min(raw, hi)) if hi >= lo else hi if hi >= 1 else 1


def update_stage(state: StageState, delta_acc: float, cfg: ScheduleConfig) -> StageState:
    """Advance the stage counters with one epoch's accuracy gain.

    Gains are in percentage points.  Early counts epochs with gain below
    thresh_early and flips to middle at count_early; middle counts below
    thresh_mid and flips to late at count_mid.  Late is absorbing, and the
    order early -> middle -> late is the only one possible.
    """
    delta_acc = float(delta_acc)
    if state.stage == "early":
        c = state.c_early + (1 if delta_acc < cfg.thresh_early else 0)
        if c >= cfg.count_early:
            return StageState("middle", c_early=c, c_mid=state.c_mid)
        return replace(state, c_early=c)
    if state.stage == "middle":
        c = state.c_mid + (1 if delta_acc < cfg.thresh_mid else 0)
        if c >= cfg.count_mid:
            return StageState("late", c_early=state.c_early, c_mid=c)
        return replace(state, c_mid=c)
    return state
