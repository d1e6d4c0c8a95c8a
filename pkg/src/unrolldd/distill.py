"""Outer loop: optimize a small synthetic set so models trained on it do
well on real validation data.

Each outer epoch draws a fresh inner initialization and a fresh held-out
validation batch, takes a meta-gradient through the (truncated) unroll by
the configured strategy, clips it by global norm, applies one Adam step
to the synthetic images and soft labels jointly, and maintains an
exponential moving average of the synthetic set that evaluation consumes.
Stage transitions for the adaptive strategy are driven by the per-epoch
change in held-out accuracy at the window end.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import innerloop as il
from . import models
from . import psp as psp_mod
from . import schedule as sched
from .autodiff import Tape
from .data import LabeledDataset
from .lrha import HvpCounter, LrhaConfig
from .psp import PspConfig


def seed_stream(master, name, index=None):
    """Named, reproducible RNG stream fanned out from one master seed."""
    digest = int.from_bytes(hashlib.sha256(str(name).encode()).digest()[:4], "big")
    key = [int(master), digest]
    if index is not None:
        key.append(int(index))
    return np.random.default_rng(np.random.SeedSequence(key))


def seed_int(master, name, index=None) -> int:
    return int(seed_stream(master, name, index).integers(0, 2**31 - 1))


@dataclass
class SyntheticDataset:
    """Learnable images plus unnormalized non-negative soft labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: int
    ipc: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        rows = self.classes * self.ipc
        if self.images.shape[0] != rows:
            raise ValueError(f"expected {rows} synthetic rows, got {self.images.shape[0]}")
        if self.labels.shape != (rows, self.classes):
            raise ValueError("labels must be (rows, classes)")
        if np.any(self.labels < 0.0):
            raise ValueError("soft labels must be non-negative")
        if np.any(self.labels.sum(axis=1) == 0.0):
            raise ValueError("each soft label row needs some mass")

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(
            self.images.copy(), self.labels.copy(), self.classes, self.ipc
        )


def init_synthetic(real: LabeledDataset, ipc, seed, mode="gaussian") -> SyntheticDataset:
    """Fresh synthetic set: standardized Gaussian noise or real samples.

    Gaussian rows are standardized per image (zero mean, unit std); the
    real-sample mode draws ipc rows per class from the real set.  Labels
    start as one-hot rows in class-major order.
    """
    ipc = int(ipc)
    if ipc < 1:
        raise ValueError("need at least one image per class")
    rng = np.random.default_rng(int(seed))
    classes = real.classes
    feature_shape = real.feature_shape
    rows = classes * ipc
    if mode == "gaussian":
        images = rng.standard_normal((rows,) + feature_shape)
        flat = images.reshape(rows, -1)
        flat -= flat.mean(axis=1, keepdims=True)
        std = flat.std(axis=1, keepdims=True)
        std[std < 1e-12] = 1.0
        flat /= std
        images = flat.reshape((rows,) + feature_shape)
    elif mode == "real-sample":
        picks = []
        for c in range(classes):
            idx = np.flatnonzero(real.y == c)
            if idx.size < ipc:
                raise ValueError(f"class {c} has {idx.size} rows, need {ipc}")
            picks.append(rng.choice(idx, size=ipc, replace=False))
        images = real.x[np.concatenate(picks)].copy()
    else:
        raise ValueError(f"unknown init mode '{mode}'")
    hard = np.repeat(np.arange(classes), ipc)
    labels = models.one_hot(hard, classes)
    return SyntheticDataset(images=images, labels=labels, classes=classes, ipc=ipc)


def random_subset_baseline(real: LabeledDataset, ipc, seed) -> SyntheticDataset:
    """Class-stratified random real subset, the untrained comparison point."""
    return init_synthetic(real, ipc, seed, mode="real-sample")


# ---------------------------------------------------------------------------
# ZCA whitening
# ---------------------------------------------------------------------------

@dataclass
class ZcaTransform:
    mean: np.ndarray
    matrix: np.ndarray
    inverse_matrix: np.ndarray
    lam: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
        out = (flat - self.mean) @ self.matrix
        return out.reshape(x.shape)

    def invert(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
        out = flat @ self.inverse_matrix + self.mean
        return out.reshape(x.shape)


def zca_whiten(x, lam=0.1):
    """Whiten rows with (cov + lam I)^(-1/2) built by eigendecomposition.

    Uses the population covariance (divisor n).  Returns the whitened
    array in the input shape and the fitted transform for reuse and for
    inverse visualization.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two rows to whiten")
    lam = float(lam)
    if lam < 0.0:
        raise ValueError("regularization must be non-negative")
    flat = x.reshape(n, -1)
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    inv_root = evecs @ np.diag(1.0 / np.sqrt(evals + lam)) @ evecs.T
    root = evecs @ np.diag(np.sqrt(evals + lam)) @ evecs.T
    transform = ZcaTransform(mean=mean, matrix=inv_root, inverse_matrix=root, lam=lam)
    return transform.apply(x), transform


def augment(batch, rng) -> np.ndarray:
    """Per-image horizontal flip (p = 1/2) and rotation by k * 90 degrees.

    Needs square (B, H, W, C) input; the pixel multiset of each image is
    preserved.  Draw order per image is flip first, then rotation.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1] != batch.shape[2]:
        raise ValueError("augmentation expects square (B, H, W, C) images")
    out = batch.copy()
    for i in range(out.shape[0]):
        if rng.random() < 0.5:
            out[i] = out[i, :, ::-1, :]
        k = int(rng.integers(0, 4))
        if k:
            out[i] = np.rot90(out[i], k, axes=(0, 1))
    return out


# ---------------------------------------------------------------------------
# the inner problem used by distillation
# ---------------------------------------------------------------------------

class ClassificationProblem:
    """Inner loss on the synthetic set, outer loss on a real batch."""

    def __init__(self, spec: models.ModelSpec, synthetic: SyntheticDataset,
                 val_x: np.ndarray, val_y: np.ndarray, batch_schedule=None):
        self.spec = spec
        self.svars = {"images": synthetic.images, "labels": synthetic.labels}
        self.batch_schedule = batch_schedule
        self._val_x = ad.constant(val_x.reshape(val_x.shape[0], -1))
        self._val_y = np.asarray(val_y, dtype=np.intp)
        self._val_labels = ad.constant(models.one_hot(self._val_y, synthetic.classes))
        self._label_check_done = False

    def inner_loss(self, theta, svars, step):
        images, labels = svars["images"], svars["labels"]
        if self.batch_schedule is not None:
            idx = np.asarray(self.batch_schedule(step), dtype=np.intp)
            images = ad.gather_rows(images, idx)
            labels = ad.gather_rows(labels, idx)
        flat = ad.reshape(images, (images.shape[0], images.size // images.shape[0]))
        logits = models.forward(self.spec, theta, flat)
        return models.loss(logits, labels)

    def outer_loss(self, theta):
        logits = models.forward(self.spec, theta, self._val_x)
        return models.loss(logits, self._val_labels)

    def accuracy(self, theta_flat) -> float:
        logits = models.forward(self.spec, ad.constant(theta_flat), self._val_x)
        return models.accuracy(logits, self._val_y)


# ---------------------------------------------------------------------------
# outer configuration and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OuterConfig:
    strategy: str
    epochs: int
    inner: il.UnrollConfig
    schedule_cfg: sched.ScheduleConfig
    lrha_cfg: LrhaConfig = LrhaConfig()
    psp_cfg: PspConfig = PspConfig()
    outer_lr: float = 0.01
    clip_norm: float = 1.0
    ema_decay: float = 0.99
    ema_eval: bool = True
    ema_inner: bool = False
    ipc: int = 1
    init_mode: str = "gaussian"
    val_batch: int = 64
    eval_seeds: int = 5
    eval_steps: int = 200
    eval_lr: float = 0.01
    eval_optimizer: str = "adam"
    master_seed: int = 0

    def __post_init__(self):
        if self.strategy not in il.STRATEGIES:
            raise ValueError(f"unknown strategy '{self.strategy}'")
        if self.epochs < 1:
            raise ValueError("need at least one outer epoch")
        if self.clip_norm <= 0.0:
            raise ValueError("clip norm must be positive")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema decay must lie in [0, 1)")


@dataclass
class RunState:
    epoch: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0
    ema_images: np.ndarray | None = None
    ema_labels: np.ndarray | None = None
    stage: sched.StageState = field(default_factory=sched.StageState)
    prev_trace: il.UnrollTrace | None = None
    prev_accuracy: float | None = None
    rng_trunc: np.random.Generator | None = None
    rng_lrha: np.random.Generator | None = None


def _init_state(cfg: OuterConfig, synthetic: SyntheticDataset) -> RunState:
    return RunState(
        ema_images=synthetic.images.copy(),
        ema_labels=synthetic.labels.copy(),
        rng_trunc=seed_stream(cfg.master_seed, "truncation"),
        rng_lrha=seed_stream(cfg.master_seed, "lrha"),
    )


def _draw_val_batch(val: LabeledDataset, cfg: OuterConfig, epoch: int):
    rng = seed_stream(cfg.master_seed, "valbatch", epoch)
    n = min(cfg.val_batch, len(val))
    idx = rng.choice(len(val), size=n, replace=False)
    return val.x[idx], val.y[idx]


def outer_step(synthetic: SyntheticDataset, val: LabeledDataset,
               spec: models.ModelSpec, cfg: OuterConfig, state: RunState):
    """One outer epoch.  Returns (updated synthetic set, state, record)."""
    epoch = state.epoch
    val_x, val_y = _draw_val_batch(val, cfg, epoch)
    problem = ClassificationProblem(
        spec, synthetic, val_x, val_y, batch_schedule=cfg.inner.batch_schedule
    )
    theta0 = models.init(spec, seed_int(cfg.master_seed, "init", epoch))
    counter = HvpCounter()
    schedule_inputs = {
        "window_size": cfg.schedule_cfg.window,
        "rng": state.rng_trunc,
        "schedule_config": cfg.schedule_cfg,
        "stage_state": state.stage,
        "prev_trace": state.prev_trace,
        "lrha_config": cfg.lrha_cfg,
        "lrha_rng": state.rng_lrha,
        "hvp_counter": counter,
    }
    mg = il.meta_gradient(cfg.strategy, theta0, problem, cfg.inner, schedule_inputs)
    diag = mg.diagnostics
    trace: il.UnrollTrace = diag["trace"]

    g_images = mg.wrt["images"].reshape(-1)
    g_labels = mg.wrt["labels"].reshape(-1)
    flat_g = np.concatenate([g_images, g_labels])
    raw_norm = float(np.linalg.norm(flat_g))
    skipped = not np.all(np.isfinite(flat_g))
    clipped = False

    new_synthetic = synthetic
    if not skipped:
        if raw_norm > cfg.clip_norm:
            flat_g = flat_g * (cfg.clip_norm / raw_norm)
            clipped = True
        flat_s = np.concatenate([synthetic.images.reshape(-1), synthetic.labels.reshape(-1)])
        if state.adam_m is None:
            state.adam_m = np.zeros_like(flat_s)
            state.adam_v = np.zeros_like(flat_s)
        state.adam_t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        state.adam_m = b1 * state.adam_m + (1 - b1) * flat_g
        state.adam_v = b2 * state.adam_v + (1 - b2) * flat_g * flat_g
        mhat = state.adam_m / (1 - b1**state.adam_t)
        vhat = state.adam_v / (1 - b2**state.adam_t)
        flat_s = flat_s - cfg.outer_lr * mhat / (np.sqrt(vhat) + eps)

        n_img = synthetic.images.size
        new_images = flat_s[:n_img].reshape(synthetic.images.shape)
        new_labels = flat_s[n_img:].reshape(synthetic.labels.shape)
        # keep the soft-label invariant: non-negative with some mass per row
        pre_clamp = new_labels.copy()
        new_labels = np.maximum(new_labels, 0.0)
        dead = new_labels.sum(axis=1) == 0.0
        if np.any(dead):
            for r in np.flatnonzero(dead):
                new_labels[r, int(np.argmax(pre_clamp[r]))] = 1e-6
        new_synthetic = SyntheticDataset(
            new_images, new_labels, synthetic.classes, synthetic.ipc
        )

    decay = cfg.ema_decay
    state.ema_images = decay * state.ema_images + (1.0 - decay) * new_synthetic.images
    state.ema_labels = decay * state.ema_labels + (1.0 - decay) * new_synthetic.labels

    acc_now = float(trace.accuracies[diag["window_end"] - 1])
    delta_points = None
    stage_used = state.stage.stage
    if state.prev_accuracy is not None:
        delta_points = (acc_now - state.prev_accuracy) * 100.0
        state.stage = sched.update_stage(state.stage, delta_points, cfg.schedule_cfg)
    state.prev_accuracy = acc_now
    state.prev_trace = trace
    state.epoch += 1

    record = {
        "epoch": epoch,
        "stage": stage_used,
        "strategy": cfg.strategy,
        "mode": diag["mode"],
        "position": diag["window_end"],
        "window_size": diag["window_size"],
        "window_start": diag["window_start"],
        "position_probability": diag["position_probability"],
        "outer_loss": diag["outer_loss"],
        "meta_grad_norm": raw_norm,
        "clipped": int(clipped),
        "skipped": int(skipped),
        "val_accuracy": acc_now,
        "delta_accuracy_points": delta_points if delta_points is not None else "",
        "hvp_count": diag["hvp_count"],
        "tape_nodes": diag.get("tape_nodes", 0),
        "lrha_fallbacks": diag.get("lrha_fallbacks", 0),
    }
    return new_synthetic, state, record


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    mean: float
    std: float
    per_seed: list[float]

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "per_seed": self.per_seed}


def _train_classifier(images, labels, spec, seed, steps, lr, optimizer="adam",
                      ema_inner=False, ema_decay=0.99):
    theta = models.init(spec, seed).flat
    cfg = il.UnrollConfig(steps=max(1, int(steps)), alpha=float(lr), optimizer=optimizer)
    opt = il.make_inner_optimizer(cfg, theta.size)
    flat_images = ad.constant(np.asarray(images).reshape(images.shape[0], -1))
    label_const = ad.constant(labels)
    shadow = theta.copy()
    for _ in range(int(steps)):
        tape = Tape()
        th = tape.leaf(theta)
        logits = models.forward(spec, th, flat_images)
        loss = models.loss(logits, label_const)
        (g,) = ad.grad(loss, [th])
        theta = opt.step(theta, g.values)
        if ema_inner:
            shadow = ema_decay * shadow + (1.0 - ema_decay) * theta
    return shadow if ema_inner else theta


def evaluate(synthetic: SyntheticDataset, test: LabeledDataset,
             spec: models.ModelSpec, cfg: OuterConfig) -> EvalResult:
    """Train fresh models on the synthetic set and report test accuracy
    as mean plus sample standard deviation over the evaluation seeds."""
    accs = []
    test_x = test.x.reshape(len(test), -1)
    for s in range(cfg.eval_seeds):
        seed = seed_int(cfg.master_seed, "eval", s)
        theta = _train_classifier(
            synthetic.images, synthetic.labels, spec, seed,
            cfg.eval_steps, cfg.eval_lr, cfg.eval_optimizer,
            ema_inner=cfg.ema_inner, ema_decay=cfg.ema_decay,
        )
        logits = models.forward(spec, ad.constant(theta), ad.constant(test_x))
        accs.append(models.accuracy(logits, test.y))
    mean = float(np.mean(accs))
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return EvalResult(mean=mean, std=std, per_seed=[float(a) for a in accs])


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    strategy: str
    epochs: int
    records: list[dict]
    final_eval: EvalResult | None
    ema_eval_used: bool
    wall_time_s: float
    stage_sequence: list[str]
    hvp_total: int

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "epochs": self.epochs,
            "records": self.records,
            "final_eval": self.final_eval.to_dict() if self.final_eval else None,
            "ema_eval_used": self.ema_eval_used,
            "wall_time_s": self.wall_time_s,
            "stage_sequence": self.stage_sequence,
            "hvp_total": self.hvp_total,
        }


def run_distillation(train: LabeledDataset, val: LabeledDataset,
                     test: LabeledDataset | None, spec: models.ModelSpec,
                     cfg: OuterConfig, evaluate_final=True):
    """Distill from scratch; returns (synthetic set for eval, report, state).

    The returned synthetic set is the EMA shadow when `ema_eval` is on,
    otherwise the raw optimized set.
    """
    started = time.perf_counter()
    if cfg.psp_cfg.enabled and _psp_applicable(train, cfg.psp_cfg):
        return _run_patch_distillation(train, val, test, spec, cfg, evaluate_final, started)

    synthetic = init_synthetic(
        train, cfg.ipc, seed_int(cfg.master_seed, "synthetic-init"), cfg.init_mode
    )
    state = _init_state(cfg, synthetic)
    records = []
    for _ in range(cfg.epochs):
        synthetic, state, record = outer_step(synthetic, val, spec, cfg, state)
        records.append(record)

    chosen = synthetic
    if cfg.ema_eval:
        chosen = SyntheticDataset(
            state.ema_images.copy(), np.maximum(state.ema_labels, 0.0),
            synthetic.classes, synthetic.ipc,
        )
    final = None
    if evaluate_final and test is not None:
        final = evaluate(chosen, test, spec, cfg)
    report = RunReport(
        strategy=cfg.strategy,
        epochs=cfg.epochs,
        records=records,
        final_eval=final,
        ema_eval_used=cfg.ema_eval,
        wall_time_s=time.perf_counter() - started,
        stage_sequence=[r["stage"] for r in records],
        hvp_total=int(np.sum([r["hvp_count"] for r in records])) if records else 0,
    )
    return chosen, report, state


# ---------------------------------------------------------------------------
# patch-level distillation
# ---------------------------------------------------------------------------

def _psp_applicable(train: LabeledDataset, pcfg: PspConfig) -> bool:
    shape = train.feature_shape
    return len(shape) == 3 and shape[0] == shape[1] and shape[0] >= pcfg.min_side


def _cell_dataset(real: LabeledDataset, i, j, n) -> LabeledDataset:
    side = real.feature_shape[0]
    s = side // n
    x = real.x[:, i * s : (i + 1) * s, j * s : (j + 1) * s, :]
    return LabeledDataset(x=x, y=real.y, classes=real.classes)


def _run_patch_distillation(train, val, test, spec, cfg, evaluate_final, started):
    """Independent per-cell inner loops; alignment couples the cells.

    Each grid cell distills the corresponding patch of the real data with
    its own model and stage machinery; each epoch additionally pushes the
    cell prototypes toward the pooled centroid through the alignment
    penalty.  Evaluation stitches cell prototypes back into full images.
    """
    n = cfg.psp_cfg.n
    side = train.feature_shape[0]
    s = side // n
    if s < 1:
        raise ValueError("patch grid finer than the image")
    channels = train.feature_shape[2]
    cell_spec = models.ModelSpec(
        family="dense-mlp", input_shape=(s, s, channels),
        classes=spec.classes, widths=spec.widths, activation=spec.activation,
    )
    cells = []
    for i in range(n):
        for j in range(n):
            c_train = _cell_dataset(train, i, j, n)
            c_val = _cell_dataset(val, i, j, n)
            synthetic = init_synthetic(
                c_train, cfg.ipc,
                seed_int(cfg.master_seed, f"synthetic-init/{i}/{j}"), cfg.init_mode,
            )
            cells.append({
                "ij": (i, j),
                "val": c_val,
                "synthetic": synthetic,
                "state": _init_state(cfg, synthetic),
            })

    records = []
    for epoch in range(cfg.epochs):
        cell_records = []
        for cell in cells:
            cell["synthetic"], cell["state"], rec = outer_step(
                cell["synthetic"], cell["val"], cell_spec, cfg, cell["state"]
            )
            cell_records.append(rec)
        _alignment_step(cells, cfg)
        agg = {
            "epoch": epoch,
            "stage": cell_records[0]["stage"],
            "strategy": cfg.strategy,
            "mode": cell_records[0]["mode"],
            "position": cell_records[0]["position"],
            "window_size": cell_records[0]["window_size"],
            "window_start": cell_records[0]["window_start"],
            "position_probability": cell_records[0]["position_probability"],
            "outer_loss": float(np.sum([r["outer_loss"] for r in cell_records])),
            "meta_grad_norm": float(np.sum([r["meta_grad_norm"] for r in cell_records])),
            "clipped": max(r["clipped"] for r in cell_records),
            "skipped": max(r["skipped"] for r in cell_records),
            "val_accuracy": float(np.mean([r["val_accuracy"] for r in cell_records])),
            "delta_accuracy_points": "",
            "hvp_count": int(np.sum([r["hvp_count"] for r in cell_records])),
            "tape_nodes": int(np.sum([r["tape_nodes"] for r in cell_records])),
            "lrha_fallbacks": int(np.sum([r["lrha_fallbacks"] for r in cell_records])),
        }
        records.append(agg)

    stitched = _stitch_cells(cells, n, s, channels, train.classes, cfg)
    final = None
    if evaluate_final and test is not None:
        crop = test.x[:, : n * s, : n * s, :]
        final = evaluate(
            stitched,
            LabeledDataset(x=crop, y=test.y, classes=test.classes),
            models.ModelSpec(
                family=spec.family, input_shape=(n * s, n * s, channels),
                classes=spec.classes, widths=spec.widths, activation=spec.activation,
            ),
            cfg,
        )
    report = RunReport(
        strategy=cfg.strategy,
        epochs=cfg.epochs,
        records=records,
        final_eval=final,
        ema_eval_used=cfg.ema_eval,
        wall_time_s=time.perf_counter() - started,
        stage_sequence=[r["stage"] for r in records],
        hvp_total=int(np.sum([r["hvp_count"] for r in records])) if records else 0,
    )
    states = {cell["ij"]: cell["state"] for cell in cells}
    return stitched, report, states


def _alignment_step(cells, cfg: OuterConfig):
    """One gradient step on lam * alignment loss over all cell prototypes."""
    lam = cfg.psp_cfg.lam
    if lam == 0.0:
        return
    tape = Tape()
    leaves = [tape.leaf(cell["synthetic"].images) for cell in cells]
    align = psp_mod.align_loss(leaves)
    if float(align.values) == 0.0:
        return  # already aligned; the penalty is flat here
    grads = ad.grad(align, leaves, warn_disconnected=False)
    for cell, leaf_grad in zip(cells, grads):
        syn = cell["synthetic"]
        new_images = syn.images - cfg.outer_lr * lam * leaf_grad.values.reshape(syn.images.shape)
        cell["synthetic"] = SyntheticDataset(new_images, syn.labels, syn.classes, syn.ipc)


def _stitch_cells(cells, n, s, channels, classes, cfg) -> SyntheticDataset:
    rows = classes * cfg.ipc
    images = np.zeros((rows, n * s, n * s, channels))
    labels = None
    for cell in cells:
        i, j = cell["ij"]
        syn = cell["synthetic"]
        source = syn.images
        if cfg.ema_eval:
            source = cell["state"].ema_images
        images[:, i * s : (i + 1) * s, j * s : (j + 1) * s, :] = source.reshape(
            rows, s, s, channels
        )
        if labels is None:
            labels = np.maximum(
                cell["state"].ema_labels if cfg.ema_eval else syn.labels, 0.0
            )
    return SyntheticDataset(images, labels, classes, cfg.ipc)


# ---------------------------------------------------------------------------
# artifacts on disk
# ---------------------------------------------------------------------------

CSV_COLUMNS = [
    "epoch", "stage", "strategy", "mode", "position", "window_size",
    "window_start", "position_probability", "outer_loss", "meta_grad_norm",
    "clipped", "skipped", "val_accuracy", "delta_accuracy_points",
    "hvp_count", "tape_nodes", "lrha_fallbacks",
]


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_epoch_csv(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for rec in records:
            fh.write(",".join(_csv_cell(rec[c]) for c in CSV_COLUMNS) + "\n")


def write_report_json(path, report: RunReport):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def sidecar_checksum(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images).tobytes())
    h.update(np.ascontiguousarray(labels).tobytes())
    return h.hexdigest()


def dump_synthetic(out_dir, synthetic: SyntheticDataset):
    """Lossless PNG montage for the eye, npz sidecar for the numbers."""
    from PIL import Image

    out_dir = str(out_dir)
    images = synthetic.images
    rows = images.shape[0]
    if images.ndim == 2:  # vector features: show each row as a padded square
        d = images.shape[1]
        side = int(np.ceil(np.sqrt(d)))
        padded = np.zeros((rows, side * side))
        padded[:, :d] = images
        tiles = padded.reshape(rows, side, side)
    else:
        tiles = images.reshape(rows, images.shape[1], images.shape[2], -1).mean(axis=3)
    h, w = tiles.shape[1], tiles.shape[2]
    per_row = synthetic.ipc
    grid = np.zeros((synthetic.classes * h, per_row * w))
    for r in range(rows):
        ci, cj = divmod(r, per_row)
        lo, hi = tiles[r].min(), tiles[r].max()
        scale = (tiles[r] - lo) / (hi - lo) if hi > lo else np.zeros_like(tiles[r])
        grid[ci * h : (ci + 1) * h, cj * w : (cj + 1) * w] = scale
    png = Image.fromarray((grid * 255.0).round().astype(np.uint8), mode="L")
    png.save(f"{out_dir}/synthetic.png")

    np.savez(f"{out_dir}/synthetic.npz", images=synthetic.images,
             labels=synthetic.labels, classes=synthetic.classes, ipc=synthetic.ipc)
    with open(f"{out_dir}/synthetic.sha256", "w", encoding="utf-8") as fh:
        fh.write(sidecar_checksum(synthetic.images, synthetic.labels) + "\n")


def load_synthetic(out_dir) -> SyntheticDataset:
    """Read the npz sidecar back, verifying the recorded checksum."""
    out_dir = str(out_dir)
    with np.load(f"{out_dir}/synthetic.npz") as payload:
        images = payload["images"]
        labels = payload["labels"]
        classes = int(payload["classes"])
        ipc = int(payload["ipc"])
    with open(f"{out_dir}/synthetic.sha256", "r", encoding="utf-8") as fh:
        recorded = fh.read().strip()
    actual = sidecar_checksum(images, labels)
    if actual != recorded:
        raise ValueError(f"sidecar checksum mismatch: {actual} != {recorded}")
    return SyntheticDataset(images, labels, classes, ipc)
