"""Independent ground-truth routes for checking the meta-gradient engine.

Everything here computes the same quantities as the fast paths but by a
different method: closed forms on a quadratic model, central finite
differences through a frozen-prefix unroll, and dense Hessians assembled
column by column.  `verify_suite` bundles the cross-checks into a
deterministic battery with explicit tolerances.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import innerloop as il
from . import lrha as lr
from . import models
from .autodiff import Tape
from .innerloop import TruncationWindow, UnrollConfig

ANALYTIC_CAP = 512


# ---------------------------------------------------------------------------
# reference problems
# ---------------------------------------------------------------------------

class QuadraticProblem:
    """Inner loss 0.5 (theta - s)^T A (theta - s), outer 0.5 ||theta - c||^2.

    The inner Hessian is the constant matrix A, so every quantity the
    engine produces has a closed form here.
    """

    def __init__(self, a_matrix: np.ndarray, target: np.ndarray, s0: np.ndarray):
        self.a_matrix = np.asarray(a_matrix, dtype=np.float64)
        self.target = np.asarray(target, dtype=np.float64)
        self.svars = {"s": np.asarray(s0, dtype=np.float64).copy()}
        p = self.target.size
        if self.a_matrix.shape != (p, p):
            raise ValueError("square matrix matching the parameter size required")

    def inner_loss(self, theta, svars, step):
        diff = ad.sub(theta, svars["s"])
        col = ad.reshape(diff, (diff.size, 1))
        quad = ad.matmul(ad.constant(self.a_matrix), col)
        return ad.mul(ad.dot(diff, ad.reshape(quad, (diff.size,))), 0.5)

    def outer_loss(self, theta):
        diff = ad.sub(theta, ad.constant(self.target))
        return ad.mul(ad.dot(diff, diff), 0.5)

    def accuracy(self, theta_flat) -> float:
        return 0.0


def make_quadratic(p=6, seed=0, alpha=0.1, steps=8) -> tuple[QuadraticProblem, UnrollConfig, np.ndarray]:
    """Well-conditioned SPD quadratic with spectral norm 1.

    Returns (problem, config, theta0).  Any alpha < 2 keeps the unroll
    contraction stable.
    """
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((p, p))
    a = m @ m.T / p + 0.05 * np.eye(p)
    a /= np.linalg.norm(a, 2)
    target = rng.standard_normal(p)
    s0 = rng.standard_normal(p)
    theta0 = rng.standard_normal(p)
    return QuadraticProblem(a, target, s0), UnrollConfig(steps=steps, alpha=alpha), theta0


def quadratic_hypergradient(problem: QuadraticProblem, theta0, cfg: UnrollConfig,
                            window: TruncationWindow | None = None) -> np.ndarray:
    """Closed-form d outer / d s for the quadratic problem under sgd.

    The step map is affine with constant Jacobians, so the windowed
    sensitivity telescopes: d theta_N / d s = I - (I - alpha A)^span, and
    the hypergradient is that matrix (transposed) applied to theta_N - c.
    """
    if cfg.optimizer != "sgd":
        raise ValueError("closed form assumes the sgd inner rule")
    a = problem.a_matrix
    p = a.shape[0]
    total = cfg.steps
    if window is None:
        window = TruncationWindow(total, total)
    window.validate(total)
    theta = np.asarray(theta0, dtype=np.float64).copy()
    s = problem.svars["s"]
    for _ in range(window.end):  # the outer loss is read at the window end
        theta = theta - cfg.alpha * (a @ (theta - s))
    m = np.eye(p) - cfg.alpha * a
    sensitivity = np.eye(p) - np.linalg.matrix_power(m, window.span)
    return sensitivity.T @ (theta - problem.target)


class SupervisedProblem:
    """Soft-label cross-entropy on learnable data, validated on fixed data."""

    def __init__(self, spec: models.ModelSpec, images, labels, val_x, val_y):
        self.spec = spec
        self.svars = {
            "images": np.asarray(images, dtype=np.float64),
            "labels": np.asarray(labels, dtype=np.float64),
        }
        self._val_x = ad.constant(np.asarray(val_x, dtype=np.float64))
        self._val_y = np.asarray(val_y, dtype=np.intp)
        self._val_labels = ad.constant(models.one_hot(self._val_y, spec.classes))

    def inner_loss(self, theta, svars, step):
        logits = models.forward(self.spec, theta, svars["images"])
        return models.loss(logits, svars["labels"])

    def outer_loss(self, theta):
        logits = models.forward(self.spec, theta, self._val_x)
        return models.loss(logits, self._val_labels)

    def accuracy(self, theta_flat) -> float:
        logits = models.forward(self.spec, ad.constant(theta_flat), self._val_x)
        return models.accuracy(logits, self._val_y)


def _soft_labels(rng, n, classes) -> np.ndarray:
    """Strictly positive soft labels, so finite differencing stays inside
    the valid label domain."""
    z = rng.standard_normal((n, classes))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def make_logistic(seed=0, n=9, d=4, classes=3, n_val=12, alpha=0.2, steps=6,
                  optimizer="sgd"):
    """Linear softmax model on Gaussian data; svars are images and labels."""
    rng = np.random.default_rng(seed)
    spec = models.ModelSpec(family="dense-mlp", input_shape=(d,), classes=classes)
    images = rng.standard_normal((n, d))
    labels = _soft_labels(rng, n, classes)
    centers = rng.standard_normal((classes, d)) * 2.0
    val_y = rng.integers(0, classes, size=n_val)
    val_x = centers[val_y] + rng.standard_normal((n_val, d))
    problem = SupervisedProblem(spec, images, labels, val_x, val_y)
    cfg = UnrollConfig(steps=steps, alpha=alpha, optimizer=optimizer)
    theta0 = models.init(spec, seed + 1).flat
    return problem, cfg, theta0


def make_two_layer_tanh(seed=0, n=8, d=3, hidden=5, classes=2, n_val=10,
                        alpha=0.15, steps=5, optimizer="sgd"):
    """One-hidden-layer tanh network, small enough for dense oracles."""
    rng = np.random.default_rng(seed)
    spec = models.ModelSpec(
        family="dense-mlp", input_shape=(d,), classes=classes,
        widths=(hidden,), activation="tanh",
    )
    images = rng.standard_normal((n, d))
    labels = _soft_labels(rng, n, classes)
    centers = rng.standard_normal((classes, d)) * 2.0
    val_y = rng.integers(0, classes, size=n_val)
    val_x = centers[val_y] + rng.standard_normal((n_val, d))
    problem = SupervisedProblem(spec, images, labels, val_x, val_y)
    cfg = UnrollConfig(steps=steps, alpha=alpha, optimizer=optimizer)
    theta0 = models.init(spec, seed + 1).flat
    return problem, cfg, theta0


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def _outer_value(problem, theta_np) -> float:
    return float(problem.outer_loss(ad.constant(theta_np)).values)


def fd_hypergradient(theta0, problem, cfg: UnrollConfig,
                     window: TruncationWindow | None = None,
                     eps: float | None = None) -> dict[str, np.ndarray]:
    """Central-difference hypergradient with the prefix frozen.

    Truncation severs the gradient path through steps before the window,
    so the matching finite-difference quantity holds the pre-window state
    and optimizer statistics fixed (computed once at the base point) and
    varies the synthetic variables only through the windowed steps.  Step
    size defaults to 1e-4 * max(1, |coordinate|).
    """
    flat0 = il._flat_theta(theta0)
    total = cfg.steps
    if window is None:
        window = TruncationWindow(total, total)
    window.validate(total)
    start = window.start

    if start > 1:
        prefix, _, _, _, opt = il.unroll_states(flat0, problem, cfg, upto=start - 1)
    else:
        prefix = flat0.copy()
        opt = il.make_inner_optimizer(cfg, flat0.size)
    snap = opt.snapshot()

    base = {name: problem.svars[name].copy() for name in problem.svars}

    def outer_at(svars_np) -> float:
        o = il.make_inner_optimizer(cfg, flat0.size)
        o.restore(snap)
        theta = prefix.copy()
        for step in range(start, window.end + 1):
            g = il.inner_gradient(problem, theta, svars_np, step)
            theta = o.step(theta, g)
        return _outer_value(problem, theta)

    out: dict[str, np.ndarray] = {}
    for name in sorted(base):
        values = base[name]
        grad = np.zeros(values.size)
        flat_view = values.reshape(-1)
        for i in range(values.size):
            h = eps if eps is not None else 1e-4 * max(1.0, abs(flat_view[i]))
            saved = flat_view[i]
            flat_view[i] = saved + h
            up = outer_at(base)
            flat_view[i] = saved - h
            down = outer_at(base)
            flat_view[i] = saved
            grad[i] = (up - down) / (2.0 * h)
        out[name] = grad.reshape(values.shape)
    return out


def fd_gradient(fun, x, eps=1e-6) -> np.ndarray:
    """Plain central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=np.float64).copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = float(fun(x))
        flat[i] = saved - eps
        down = float(fun(x))
        flat[i] = saved
        gf[i] = (up - down) / (2.0 * eps)
    return g


def dense_hessian(loss_builder, theta) -> np.ndarray:
    """Full Hessian, one HVP per basis vector.  Capped at p <= 512."""
    theta = np.asarray(theta, dtype=np.float64)
    p = theta.size
    if p > ANALYTIC_CAP:
        raise ValueError(f"dense Hessian capped at p <= {ANALYTIC_CAP}")
    h = np.zeros((p, p))
    basis = np.zeros(p)
    for i in range(p):
        basis[i] = 1.0
        h[:, i] = ad.hvp(loss_builder, theta, basis)
        basis[i] = 0.0
    return h


# ---------------------------------------------------------------------------
# the self-check battery
# ---------------------------------------------------------------------------

def _rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def _flatten_wrt(wrt: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([wrt[k].reshape(-1) for k in sorted(wrt)])


def _check_grad_vs_fd():
    problem, cfg, theta0 = make_logistic(seed=3, n=6, d=3, classes=3, n_val=5)

    def loss_at(th):
        tape = Tape()
        t = tape.leaf(th)
        svt = {k: ad.constant(v) for k, v in problem.svars.items()}
        return problem.inner_loss(t, svt, 1)

    tape = Tape()
    t = tape.leaf(theta0)
    svt = {k: ad.constant(v) for k, v in problem.svars.items()}
    (g,) = ad.grad(problem.inner_loss(t, svt, 1), [t])
    numeric = fd_gradient(lambda th: float(loss_at(th).values), theta0)
    return _rel(g.values, numeric)


def _check_hvp_symmetry():
    problem, cfg, theta0 = make_two_layer_tanh(seed=5)
    builder = il._loss_builder(problem, problem.svars, 1)
    rng = np.random.default_rng(7)
    u = rng.standard_normal(theta0.size)
    v = rng.standard_normal(theta0.size)
    left = float(u @ ad.hvp(builder, theta0, v))
    right = float(v @ ad.hvp(builder, theta0, u))
    return abs(left - right) / max(abs(left), 1e-12)


def _check_quadratic_closed_form():
    problem, cfg, theta0 = make_quadratic(p=7, seed=2, alpha=0.3, steps=9)
    worst = 0.0
    for window in (None, TruncationWindow(9, 3), TruncationWindow(5, 1)):
        mg = il.meta_gradient("bptt", theta0, problem, cfg) if window is None else \
            il._backprop_meta_gradient("t-bptt", theta0, problem, cfg, window, 1.0)
        exact = quadratic_hypergradient(problem, theta0, cfg, window)
        worst = max(worst, _rel(mg.wrt["s"], exact))
    return worst


def _check_fd_hypergradient():
    problem, cfg, theta0 = make_logistic(seed=11, n=6, d=3, classes=2, n_val=6,
                                         alpha=0.25, steps=5)
    window = TruncationWindow(5, 3)
    mg = il._backprop_meta_gradient("t-bptt", theta0, problem, cfg, window, 1.0)
    numeric = fd_hypergradient(theta0, problem, cfg, window)
    return _rel(_flatten_wrt(mg.wrt), _flatten_wrt(numeric))


def _check_lrha_full_rank():
    problem, cfg, theta0 = make_quadratic(p=12, seed=4, alpha=0.2, steps=4)
    builder = il._loss_builder(problem, problem.svars, 1)
    hvp_op = lambda w: ad.hvp(builder, theta0, w)
    factors = lr.factorize(hvp_op, 12, 12, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    vec = rng.standard_normal(12)
    return _rel(factors.apply(vec), problem.a_matrix @ vec)


def _check_degenerate_window():
    problem, cfg, theta0 = make_logistic(seed=13, n=5, d=3, classes=2, n_val=4,
                                         alpha=0.2, steps=4)
    full = il.meta_gradient("bptt", theta0, problem, cfg)
    trunc = il.meta_gradient("t-bptt", theta0, problem, cfg, {"window_size": cfg.steps})
    diff = np.max(np.abs(_flatten_wrt(full.wrt) - _flatten_wrt(trunc.wrt)))
    return float(diff)


def _check_fd_two_layer():
    problem, cfg, theta0 = make_two_layer_tanh(seed=17, alpha=0.1, steps=4)
    window = TruncationWindow(4, 2)
    mg = il._backprop_meta_gradient("t-bptt", theta0, problem, cfg, window, 1.0)
    numeric = fd_hypergradient(theta0, problem, cfg, window)
    return _rel(_flatten_wrt(mg.wrt), _flatten_wrt(numeric))


def _check_product_form():
    problem, cfg, theta0 = make_quadratic(p=10, seed=6, alpha=0.25, steps=6)
    window = TruncationWindow(6, 4)
    si = {
        "lrha_config": lr.LrhaConfig(enabled=True, k_min=10, k_max_fraction=1.0),
        "lrha_rng": np.random.default_rng(3),
    }
    mg = il._product_form_meta_gradient("at-bptt", theta0, problem, cfg, window, 1.0, si)
    exact = quadratic_hypergradient(problem, theta0, cfg, window)
    return _rel(mg.wrt["s"], exact)


def _check_analytic_route():
    problem, cfg, theta0 = make_logistic(seed=19, n=5, d=3, classes=2, n_val=4,
                                         alpha=0.2, steps=4)
    window = TruncationWindow(4, 2)
    direct = il._backprop_meta_gradient("t-bptt", theta0, problem, cfg, window, 1.0)
    analytic = il.analytic_meta_gradient(theta0, problem, cfg, window)
    return _rel(_flatten_wrt(direct.wrt), _flatten_wrt(analytic.wrt))


_FAST_CHECKS = [
    ("grad-vs-fd", _check_grad_vs_fd, 1e-6),
    ("hvp-symmetry", _check_hvp_symmetry, 1e-8),
    ("quadratic-closed-form", _check_quadratic_closed_form, 1e-8),
    ("fd-hypergradient", _check_fd_hypergradient, 1e-4),
    ("lrha-full-rank", _check_lrha_full_rank, 1e-7),
    ("degenerate-window", _check_degenerate_window, 0.0),
]

_FULL_CHECKS = _FAST_CHECKS + [
    ("fd-two-layer-tanh", _check_fd_two_layer, 1e-4),
    ("product-form-full-rank", _check_product_form, 1e-6),
    ("analytic-vs-backprop", _check_analytic_route, 1e-8),
]


def verify_suite(level="fast", tol_override=None) -> dict:
    """Run the cross-check battery and report per-check errors.

    Failures become report entries rather than exceptions.  The override
    replaces every tolerance, so `tol_override=0` demonstrates that the
    measured errors are real floating-point residues, not zeros.
    """
    if level not in ("fast", "full"):
        raise ValueError("level must be 'fast' or 'full'")
    checks = _FAST_CHECKS if level == "fast" else _FULL_CHECKS
    results = []
    started = time.perf_counter()
    for name, fn, tol in checks:
        used_tol = float(tol_override) if tol_override is not None else tol
        try:
            err = float(fn())
            passed = err <= used_tol
            results.append({"name": name, "error": err, "tolerance": used_tol,
                            "passed": passed, "exception": None})
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            results.append({"name": name, "error": float("inf"), "tolerance": used_tol,
                            "passed": False, "exception": repr(exc)})
    return {
        "level": level,
        "ok": all(r["passed"] for r in results),
        "checks": results,
        "elapsed_s": time.perf_counter() - started,
    }
