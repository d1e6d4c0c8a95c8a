"""Unrolled inner training and the meta-gradients taken through it.

A *problem* couples an inner training loss (a function of the flat model
parameters and a dict of synthetic variables) with an outer validation
loss.  Unrolling runs `cfg.steps` inner updates; a `TruncationWindow`
marks which trailing segment of those updates is recorded on tape.  Steps
before the window run as plain numpy (the gradient path to the synthetic
variables is severed there); steps inside the window record, so the outer
loss can be differentiated back to the synthetic variables.

Step indexing: states are theta_0 .. theta_T, and step t in [1, T] maps
theta_{t-1} to theta_t using the inner gradient at theta_{t-1}.  A window
with end N and size M tapes steps max(1, N-M+1) .. N, which is exactly M
taped updates whenever N >= M, and the outer loss is evaluated at theta_N.

Problem protocol (duck-typed):
    svars: dict[str, np.ndarray]          synthetic variables by name
    inner_loss(theta, svars, step) -> scalar Tensor
    outer_loss(theta) -> scalar Tensor
    accuracy(theta_flat) -> float         held-out accuracy in [0, 1]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import lrha as lr
from . import schedule as sched
from .autodiff import ParamVector, Tape, Tensor

STRATEGIES = ("bptt", "t-bptt", "rat-bptt", "at-bptt")


@dataclass(frozen=True)
class UnrollConfig:
    """Inner-loop geometry: total steps, learning rate, optimizer, batching."""

    steps: int
    alpha: float
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_schedule: object = None  # callable step -> row indices, or None for full batch

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one unroll step")
        if self.alpha < 0.0:
            raise ValueError("negative inner learning rate")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown inner optimizer '{self.optimizer}'")


@dataclass(frozen=True)
class TruncationWindow:
    """Trailing window of taped steps ending at step `end`."""

    end: int
    size: int

    def __post_init__(self):
        if self.end < 1 or self.size < 1:
            raise ValueError("window end and size must be positive")

    @property
    def start(self) -> int:
        return max(1, self.end - self.size + 1)

    @property
    def span(self) -> int:
        """Number of taped steps."""
        return self.end - self.start + 1

    def validate(self, total_steps: int):
        if self.end > total_steps:
            raise ValueError(
                f"window ends at step {self.end} but the unroll has {total_steps}"
            )


@dataclass
class UnrollTrace:
    """Per-step measurements plus parameter snapshots around the window.

    Entry t-1 of each array belongs to step t: `grad_norms` is the norm of
    the inner gradient the step applied, `accuracies` is the held-out
    accuracy after the step.  `variations[0]` is zero by definition, then
    absolute first differences of the norms.  `checkpoints` holds flat
    parameters keyed by state index, covering window start - 1 .. end.
    """

    grad_norms: np.ndarray
    variations: np.ndarray
    accuracies: np.ndarray
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict)


def _variations_of(norms: np.ndarray) -> np.ndarray:
    out = np.zeros_like(norms)
    if norms.size > 1:
        out[1:] = np.abs(np.diff(norms))
    return out


@dataclass
class MetaGradient:
    """Gradient of the outer loss w.r.t. each synthetic variable."""

    wrt: dict[str, np.ndarray]
    diagnostics: dict

    @property
    def wrt_images(self):
        return self.wrt.get("images")

    @property
    def wrt_labels(self):
        return self.wrt.get("labels")

    def flat(self) -> np.ndarray:
        return np.concatenate([self.wrt[k].reshape(-1) for k in sorted(self.wrt)])


# ---------------------------------------------------------------------------
# inner optimizers, usable on arrays and on taped tensors
# ---------------------------------------------------------------------------

class _Sgd:
    def __init__(self, alpha):
        self.alpha = float(alpha)

    def step(self, theta, g):
        return theta - self.alpha * g

    def step_t(self, theta: Tensor, g: Tensor) -> Tensor:
        return ad.sub(theta, ad.mul(g, self.alpha))

    def snapshot(self):
        return None

    def restore(self, snap):
        pass

    def detach(self):
        pass


class _Adam:
    def __init__(self, cfg: UnrollConfig, p: int):
        self.alpha = float(cfg.alpha)
        self.b1, self.b2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.m = np.zeros(p)
        self.v = np.zeros(p)
        self.t = 0

    def step(self, theta, g):
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * g
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g
        mhat = self.m / (1.0 - self.b1**self.t)
        vhat = self.v / (1.0 - self.b2**self.t)
        return theta - self.alpha * mhat / (np.sqrt(vhat) + self.eps)

    def step_t(self, theta: Tensor, g: Tensor) -> Tensor:
        self.t += 1
        m = self.m if isinstance(self.m, Tensor) else ad.constant(self.m)
        v = self.v if isinstance(self.v, Tensor) else ad.constant(self.v)
        self.m = ad.add(ad.mul(m, self.b1), ad.mul(g, 1.0 - self.b1))
        self.v = ad.add(ad.mul(v, self.b2), ad.mul(ad.mul(g, g), 1.0 - self.b2))
        mhat = ad.div(self.m, 1.0 - self.b1**self.t)
        vhat = ad.div(self.v, 1.0 - self.b2**self.t)
        denom = ad.add(ad.sqrt(vhat), self.eps)
        return ad.sub(theta, ad.mul(ad.div(mhat, denom), self.alpha))

    def snapshot(self):
        m = self.m.values if isinstance(self.m, Tensor) else self.m
        v = self.v.values if isinstance(self.v, Tensor) else self.v
        return (m.copy(), v.copy(), self.t)

    def restore(self, snap):
        self.m, self.v, self.t = snap[0].copy(), snap[1].copy(), snap[2]

    def detach(self):
        if isinstance(self.m, Tensor):
            self.m = self.m.values.copy()
        if isinstance(self.v, Tensor):
            self.v = self.v.values.copy()


def make_inner_optimizer(cfg: UnrollConfig, p: int):
    return _Sgd(cfg.alpha) if cfg.optimizer == "sgd" else _Adam(cfg, p)


def _flat_theta(theta0) -> np.ndarray:
    if isinstance(theta0, ParamVector):
        return theta0.flat.copy()
    flat = np.array(theta0, dtype=np.float64)
    if flat.ndim != 1:
        raise ValueError("initial parameters must be a flat vector")
    return flat


def inner_gradient(problem, theta_np, svars_np, step, as_constants=True):
    """Inner gradient at one state, on a throwaway tape."""
    tape = Tape()
    th = tape.leaf(theta_np)
    if as_constants:
        svt = {name: ad.constant(svars_np[name]) for name in sorted(svars_np)}
    else:
        svt = {name: tape.leaf(svars_np[name]) for name in sorted(svars_np)}
    loss_t = problem.inner_loss(th, svt, step)
    (g,) = ad.grad(loss_t, [th])
    return g.values


def outer_gradient(problem, theta_np) -> tuple[np.ndarray, float]:
    tape = Tape()
    th = tape.leaf(theta_np)
    outer = problem.outer_loss(th)
    (g,) = ad.grad(outer, [th])
    return g.values, float(outer.values)


# ---------------------------------------------------------------------------
# unrolling
# ---------------------------------------------------------------------------

@dataclass
class TapedUnroll:
    theta_end: Tensor
    svar_tensors: dict[str, Tensor]
    tape: Tape
    trace: UnrollTrace
    theta_end_values: np.ndarray
    window: TruncationWindow


def unroll_taped(theta0, problem, cfg: UnrollConfig, window: TruncationWindow | None = None,
                 complete_trace: bool = True) -> TapedUnroll:
    """Run the inner loop, taping only the window, and keep the tape alive.

    Steps 1 .. start-1 and (if `complete_trace`) end+1 .. T run as plain
    numpy; the trace still covers every step so the scheduler can look at
    the whole trajectory.  The outer loss is meant to be evaluated at the
    returned `theta_end`, which is the state after step `window.end`.
    """
    flat = _flat_theta(theta0)
    total = cfg.steps
    if window is None:
        window = TruncationWindow(total, total)
    window.validate(total)

    opt = make_inner_optimizer(cfg, flat.size)
    norms = np.zeros(total)
    accs = np.zeros(total)
    checkpoints: dict[int, np.ndarray] = {}
    svars_np = problem.svars

    theta = flat
    for step in range(1, window.start):
        g = inner_gradient(problem, theta, svars_np, step)
        norms[step - 1] = float(np.linalg.norm(g))
        theta = opt.step(theta, g)
        accs[step - 1] = problem.accuracy(theta)

    tape = Tape()
    svt = {name: tape.leaf(svars_np[name]) for name in sorted(svars_np)}
    checkpoints[window.start - 1] = theta.copy()
    cur = tape.leaf(theta)
    for step in range(window.start, window.end + 1):
        tape.mark()
        loss_t = problem.inner_loss(cur, svt, step)
        (g,) = ad.grad(loss_t, [cur])
        norms[step - 1] = float(np.linalg.norm(g.values))
        cur = opt.step_t(cur, g)
        checkpoints[step] = cur.values.copy()
        accs[step - 1] = problem.accuracy(cur.values)

    theta_end_values = cur.values.copy()
    if complete_trace and window.end < total:
        opt.detach()
        tail = theta_end_values.copy()
        for step in range(window.end + 1, total + 1):
            g = inner_gradient(problem, tail, svars_np, step)
            norms[step - 1] = float(np.linalg.norm(g))
            tail = opt.step(tail, g)
            accs[step - 1] = problem.accuracy(tail)

    trace = UnrollTrace(norms, _variations_of(norms), accs, checkpoints)
    return TapedUnroll(cur, svt, tape, trace, theta_end_values, window)


def unroll(theta0, problem, cfg: UnrollConfig, window: TruncationWindow | None = None):
    """Convenience wrapper returning (theta_end values, trace)."""
    res = unroll_taped(theta0, problem, cfg, window)
    return res.theta_end_values, res.trace


def unroll_states(theta0, problem, cfg: UnrollConfig, upto: int, collect_from: int = 0):
    """Plain numpy unroll to step `upto`, keeping states from `collect_from`.

    Returns (theta_upto, states dict, norms array over steps 1..upto, accs,
    optimizer).  Used by the product-form backward pass and the oracles.
    """
    flat = _flat_theta(theta0)
    opt = make_inner_optimizer(cfg, flat.size)
    svars_np = problem.svars
    norms = np.zeros(upto)
    accs = np.zeros(upto)
    states: dict[int, np.ndarray] = {}
    theta = flat
    for step in range(1, upto + 1):
        if step - 1 >= collect_from:
            states[step - 1] = theta.copy()
        g = inner_gradient(problem, theta, svars_np, step)
        norms[step - 1] = float(np.linalg.norm(g))
        theta = opt.step(theta, g)
        accs[step - 1] = problem.accuracy(theta)
    states[upto] = theta.copy()
    return theta, states, norms, accs, opt


# ---------------------------------------------------------------------------
# meta-gradients
# ---------------------------------------------------------------------------

def meta_gradient(strategy, theta0, problem, cfg: UnrollConfig,
                  schedule_inputs: dict | None = None) -> MetaGradient:
    """Outer-loss gradient w.r.t. the synthetic variables, by strategy.

    bptt       full unroll on tape.
    t-bptt     trailing window of fixed size (schedule_inputs['window_size']).
    rat-bptt   window end sampled uniformly over 1..T, fixed size.
    at-bptt    window end sampled from the stage-dependent distribution,
               width from the variation softmax, products optionally
               applied through low-rank Hessian factors.

    schedule_inputs keys (all optional unless the strategy needs them):
    window_size, rng, schedule_config, stage_state, prev_trace,
    lrha_config, lrha_rng, hvp_counter, forced_position.
    """
    si = dict(schedule_inputs or {})
    strategy = str(strategy).lower()
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy '{strategy}'")
    total = cfg.steps

    lcfg = si.get("lrha_config")
    use_lrha = False

    if strategy == "bptt":
        window = TruncationWindow(total, total)
        pos_prob = 1.0
    elif strategy == "t-bptt":
        w = int(si.get("window_size") or _schedule_window(si))
        window = TruncationWindow(total, w)
        pos_prob = 1.0
    elif strategy == "rat-bptt":
        w = int(si.get("window_size") or _schedule_window(si))
        probs = np.full(total, 1.0 / total)
        if "forced_position" in si:
            n = int(si["forced_position"])
        else:
            n = sched.sample_position(probs, si["rng"])
        window = TruncationWindow(n, w)
        pos_prob = 1.0 / total
    else:  # at-bptt
        scfg: sched.ScheduleConfig = si["schedule_config"]
        stage = si.get("stage_state") or sched.StageState()
        prev: UnrollTrace | None = si.get("prev_trace")
        if prev is None:
            probs = np.full(total, 1.0 / total)
            eta = np.full(total, 1.0 / total)
        else:
            probs = sched.trunc_probs(
                prev.grad_norms, stage.stage, scfg.tau, scfg.standardize
            )
            eta = sched.window_weight(prev.variations, scfg.tau)
        if "forced_position" in si:
            n = int(si["forced_position"])
        else:
            n = sched.sample_position(probs, si["rng"])
        wstar = sched.window_size(scfg.window, scfg.window_range, float(eta[n - 1]), n)
        window = TruncationWindow(n, wstar)
        pos_prob = float(probs[n - 1])
        use_lrha = lcfg is not None and lcfg.enabled

    window.validate(total)
    if use_lrha:
        return _product_form_meta_gradient(
            strategy, theta0, problem, cfg, window, pos_prob, si
        )
    return _backprop_meta_gradient(strategy, theta0, problem, cfg, window, pos_prob)


def _schedule_window(si):
    scfg = si.get("schedule_config")
    if scfg is None:
        raise ValueError("strategy needs window_size or schedule_config")
    return scfg.window


def _backprop_meta_gradient(strategy, theta0, problem, cfg, window, pos_prob) -> MetaGradient:
    res = unroll_taped(theta0, problem, cfg, window)
    tape_nodes_forward = len(res.tape)
    outer = problem.outer_loss(res.theta_end)
    names = sorted(res.svar_tensors)
    gs = ad.grad(outer, [res.svar_tensors[n] for n in names], warn_disconnected=False)
    wrt = {n: g.values.copy() for n, g in zip(names, gs)}
    diagnostics = {
        "strategy": strategy,
        "mode": "exact",
        "window_end": window.end,
        "window_size": window.size,
        "window_start": window.start,
        "window_span": window.span,
        "position_probability": pos_prob,
        # reverse mode applies one inner-loss Hessian product per taped step
        "hvp_count": window.span,
        "tape_nodes": len(res.tape),
        "tape_nodes_forward": tape_nodes_forward,
        "outer_loss": float(outer.values),
        "trace": res.trace,
        "lrha_fallbacks": 0,
    }
    return MetaGradient(wrt, diagnostics)


def _product_form_meta_gradient(strategy, theta0, problem, cfg, window, pos_prob, si) -> MetaGradient:
    """Backward accumulation v <- (1 - alpha H~_j) v with low-rank factors.

    Requires the sgd inner rule, whose step Jacobian is exactly
    1 - alpha H_j.  Each window term contributes the mixed second
    derivative of the inner loss contracted with the running vector.
    """
    if cfg.optimizer != "sgd":
        raise ValueError("product-form backward requires the sgd inner rule")
    lcfg: lr.LrhaConfig = si["lrha_config"]
    rng = si.get("lrha_rng") or np.random.default_rng(0)
    counter: lr.HvpCounter = si.get("hvp_counter") or lr.HvpCounter()

    flat = _flat_theta(theta0)
    p = flat.size
    total = cfg.steps
    start, end = window.start, window.end
    svars_np = problem.svars
    names = sorted(svars_np)

    theta_end, states, norms_head, accs_head, opt = unroll_states(
        theta0, problem, cfg, upto=end, collect_from=start - 1
    )
    a, outer_val = outer_gradient(problem, theta_end)

    k_max = max(lcfg.k_min, int(np.floor(lcfg.k_max_fraction * p)))
    alpha = cfg.alpha
    v = a.copy()
    acc = {n: np.zeros(svars_np[n].size) for n in names}
    fallbacks = 0
    ranks = []

    for j in range(end - 1, start - 2, -1):
        theta_j = states[j]
        tape = Tape()
        th = tape.leaf(theta_j)
        svt = {n: tape.leaf(svars_np[n]) for n in names}
        loss_j = problem.inner_loss(th, svt, j + 1)
        (gth,) = ad.grad(loss_j, [th])
        contracted = ad.dot(gth, ad.constant(v))
        parts = ad.grad(contracted, [svt[n] for n in names], warn_disconnected=False)
        for n, part in zip(names, parts):
            acc[n] += -alpha * part.values.reshape(-1)

        if j > start - 1:
            current_norm = norms_head[j]
            running_max = float(np.max(norms_head[: j + 1]))
            k_j = lr.adaptive_rank(current_norm, running_max, lcfg.k_min, k_max)
            ranks.append(k_j)
            builder = _loss_builder(problem, svars_np, j + 1)
            hvp_op = lambda w, b=builder, t=theta_j: ad.hvp(b, t, w)
            try:
                factors = lr.factorize(
                    hvp_op, p, k_j, rng, counter=counter,
                    redraw_on_failure=lcfg.redraw_on_qr_failure,
                )
                v = lr.apply_damped(factors, alpha, v, counter=counter)
            except np.linalg.LinAlgError:
                fallbacks += 1
                counter.count += 1
                v = v - alpha * hvp_op(v)

    # finish the trace for the scheduler
    norms = np.zeros(total)
    accs = np.zeros(total)
    norms[:end] = norms_head
    accs[:end] = accs_head
    if end < total:
        opt.detach()
        tail = theta_end.copy()
        for step in range(end + 1, total + 1):
            g = inner_gradient(problem, tail, svars_np, step)
            norms[step - 1] = float(np.linalg.norm(g))
            tail = opt.step(tail, g)
            accs[step - 1] = problem.accuracy(tail)
    checkpoints = {i: states[i] for i in range(start - 1, end + 1)}
    trace = UnrollTrace(norms, _variations_of(norms), accs, checkpoints)

    wrt = {n: acc[n].reshape(svars_np[n].shape) for n in names}
    diagnostics = {
        "strategy": strategy,
        "mode": "lrha",
        "window_end": end,
        "window_size": window.size,
        "window_start": start,
        "window_span": window.span,
        "position_probability": pos_prob,
        "hvp_count": counter.count,
        "lrha_ranks": ranks,
        "lrha_fallbacks": fallbacks,
        "peak_extra_floats": counter.peak_extra_floats,
        "outer_loss": outer_val,
        "trace": trace,
    }
    return MetaGradient(wrt, diagnostics)


def _loss_builder(problem, svars_np, step):
    def build(th):
        svt = {n: ad.constant(svars_np[n]) for n in sorted(svars_np)}
        return problem.inner_loss(th, svt, step)

    return build


def analytic_meta_gradient(theta0, problem, cfg: UnrollConfig,
                           window: TruncationWindow | None = None,
                           literal_position_probs=None) -> MetaGradient:
    """Ground-truth meta-gradient from explicit sums of dense products.

    Builds the mixed second-derivative matrices row by row (one gradient
    per parameter component) and dense inner-loss Hessians per step, then
    accumulates the damped products applied to the outer gradient.  Only
    for small models (p <= 512) and the sgd rule.

    With `literal_position_probs` (a distribution over window ends 1..T),
    returns the probability-weighted sum of per-position truncated
    gradients instead of a single-window gradient.
    """
    if cfg.optimizer != "sgd":
        raise ValueError("the analytic form assumes the sgd inner rule")
    flat = _flat_theta(theta0)
    if flat.size > 512:
        raise ValueError("analytic meta-gradient is capped at p <= 512")
    total = cfg.steps
    if window is None:
        window = TruncationWindow(total, total)
    window.validate(total)

    if literal_position_probs is not None:
        probs = np.asarray(literal_position_probs, dtype=np.float64)
        if probs.shape != (total,):
            raise ValueError("need one probability per step")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("position probabilities must sum to 1")
        names = sorted(problem.svars)
        acc = {n: np.zeros_like(problem.svars[n], dtype=np.float64) for n in names}
        hvps = 0
        for n_end in range(1, total + 1):
            if probs[n_end - 1] == 0.0:
                continue
            piece = _analytic_single(flat, problem, cfg, TruncationWindow(n_end, window.size))
            for name in names:
                acc[name] += probs[n_end - 1] * piece.wrt[name]
            hvps += piece.diagnostics["hvp_count"]
        return MetaGradient(acc, {
            "strategy": "analytic-weighted",
            "mode": "analytic",
            "window_size": window.size,
            "hvp_count": hvps,
        })
    return _analytic_single(flat, problem, cfg, window)


def _analytic_single(flat, problem, cfg, window: TruncationWindow) -> MetaGradient:
    from . import oracle  # deferred: oracle imports this module at top level

    p = flat.size
    start, end = window.start, window.end
    alpha = cfg.alpha
    svars_np = problem.svars
    names = sorted(svars_np)

    theta_end, states, _, _, _ = unroll_states(
        flat, problem, cfg, upto=end, collect_from=start - 1
    )
    a, outer_val = outer_gradient(problem, theta_end)

    v = a.copy()
    acc = {n: np.zeros(svars_np[n].size) for n in names}
    hvp_count = 0
    for j in range(end - 1, start - 2, -1):
        theta_j = states[j]

        # mixed matrix rows: row r is d/dS of the r-th gradient component
        tape = Tape()
        th = tape.leaf(theta_j)
        svt = {n: tape.leaf(svars_np[n]) for n in names}
        loss_j = problem.inner_loss(th, svt, j + 1)
        (gth,) = ad.grad(loss_j, [th])
        mixed = {n: np.zeros((p, svars_np[n].size)) for n in names}
        for r in range(p):
            g_r = ad.reshape(ad.slice_nd(gth, (r,), (r + 1,)), ())
            parts = ad.grad(g_r, [svt[n] for n in names], warn_disconnected=False)
            for n, part in zip(names, parts):
                mixed[n][r] = part.values.reshape(-1)
        for n in names:
            acc[n] += -alpha * (v @ mixed[n])

        if j > start - 1:
            hess = oracle.dense_hessian(_loss_builder(problem, svars_np, j + 1), theta_j)
            hvp_count += p
            v = v - alpha * (hess @ v)

    wrt = {n: acc[n].reshape(svars_np[n].shape) for n in names}
    return MetaGradient(wrt, {
        "strategy": "analytic",
        "mode": "analytic",
        "window_end": end,
        "window_size": window.size,
        "window_start": start,
        "window_span": window.span,
        "hvp_count": hvp_count,
        "outer_loss": outer_val,
    })
