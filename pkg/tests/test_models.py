"""Parameter layout, forward pass, loss identities, and accuracy rules."""

import numpy as np
import pytest

from unrolldd import autodiff as ad
from unrolldd import models
from unrolldd.autodiff import Tape
from unrolldd.models import ModelSpec

from helpers import fd_grad, rel_err


def test_dense_layout_and_count():
    spec = ModelSpec("dense-mlp", (4,), 3)
    layout = models.param_layout(spec)
    assert [(n, s) for n, s, _ in layout] == [("w0", (4, 3)), ("b0", (3,))]
    assert models.param_count(spec) == 15

    deep = ModelSpec("dense-mlp", (4,), 3, widths=(5,))
    assert models.param_count(deep) == 4 * 5 + 5 + 5 * 3 + 3


def test_conv_layout():
    spec = ModelSpec("conv-lite", (4, 4, 1), 2, widths=(3,))
    layout = models.param_layout(spec)
    names = [n for n, _, _ in layout]
    assert names[0] == "conv_w"
    assert layout[0][1] == (3, 3, 1, 3)
    # valid conv of a 4x4 image with a 3x3 kernel leaves 2x2 spatial cells
    assert models.param_count(spec) == 27 + 3 + (2 * 2 * 3) * 2 + 2


def test_init_is_deterministic_and_scaled():
    spec = ModelSpec("dense-mlp", (10,), 4, widths=(8,))
    a = models.init(spec, seed=42)
    b = models.init(spec, seed=42)
    assert np.array_equal(a.flat, b.flat)
    w0 = a.view("w0")
    assert 0.1 < w0.std() / (1.0 / np.sqrt(10)) < 3.0


def test_forward_linear_model_is_affine():
    spec = ModelSpec("dense-mlp", (3,), 2)
    theta = models.init(spec, 0)
    x = np.array([[1.0, -2.0, 0.5]])
    logits = models.forward(spec, ad.constant(theta.flat), ad.constant(x))
    expected = x @ theta.view("w0") + theta.view("b0")
    assert rel_err(logits.values, expected) < 1e-12


def test_forward_gradient_matches_fd():
    spec = ModelSpec("dense-mlp", (3,), 2, widths=(4,))
    theta = models.init(spec, 1)
    x = np.random.default_rng(2).standard_normal((5, 3))
    labels = models.one_hot(np.array([0, 1, 0, 1, 1]), 2)

    def value(flat):
        logits = models.forward(spec, ad.constant(flat), ad.constant(x))
        return float(models.loss(logits, ad.constant(labels)).values)

    tape = Tape()
    th = tape.leaf(theta.flat)
    loss = models.loss(models.forward(spec, th, ad.constant(x)), ad.constant(labels))
    (g,) = ad.grad(loss, [th])
    assert rel_err(g.values, fd_grad(value, theta.flat)) < 1e-6


def test_conv_forward_gradient_matches_fd():
    spec = ModelSpec("conv-lite", (4, 4, 1), 2, widths=(2,))
    theta = models.init(spec, 3)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 16))  # flattened 4x4 images
    labels = models.one_hot(np.array([0, 1, 1]), 2)

    def value(flat):
        logits = models.forward(spec, ad.constant(flat), ad.constant(x))
        return float(models.loss(logits, ad.constant(labels)).values)

    tape = Tape()
    th = tape.leaf(theta.flat)
    loss = models.loss(models.forward(spec, th, ad.constant(x)), ad.constant(labels))
    (g,) = ad.grad(loss, [th])
    assert rel_err(g.values, fd_grad(value, theta.flat, eps=1e-5)) < 1e-5


def test_loss_gradient_identity_in_logits():
    # d/dlogits of mean soft cross-entropy: (softmax * rowmass - labels) / B
    rng = np.random.default_rng(5)
    logits_np = rng.standard_normal((4, 3))
    labels_np = np.abs(rng.standard_normal((4, 3))) + 0.05
    tape = Tape()
    lo = tape.leaf(logits_np)
    (g,) = ad.grad(models.loss(lo, ad.constant(labels_np)), [lo])
    soft = np.exp(logits_np - logits_np.max(axis=1, keepdims=True))
    soft /= soft.sum(axis=1, keepdims=True)
    expected = (soft * labels_np.sum(axis=1, keepdims=True) - labels_np) / 4.0
    assert rel_err(g.values, expected) < 1e-10


def test_uniform_logits_loss_is_log_classes():
    logits = np.zeros((7, 10))
    labels = models.one_hot(np.arange(7) % 10, 10)
    loss = models.loss(ad.constant(logits), ad.constant(labels))
    assert abs(float(loss.values) - np.log(10.0)) < 1e-12


def test_loss_is_linear_in_label_mass():
    rng = np.random.default_rng(6)
    logits = ad.constant(rng.standard_normal((3, 4)))
    labels = np.abs(rng.standard_normal((3, 4))) + 0.1
    base = float(models.loss(logits, ad.constant(labels)).values)
    scaled = float(models.loss(logits, ad.constant(2.5 * labels)).values)
    assert abs(scaled - 2.5 * base) < 1e-10


def test_loss_rejects_bad_labels():
    logits = ad.constant(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        models.loss(logits, ad.constant(np.array([[1.0, 0.0, -0.1], [0.0, 1.0, 0.0]])))
    with pytest.raises(ValueError):
        models.loss(logits, ad.constant(np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])))


def test_accuracy_breaks_ties_low():
    logits = np.array([[0.5, 0.5, 0.1], [0.2, 0.9, 0.9]])
    acc = models.accuracy(ad.constant(logits), np.array([0, 1]))
    assert acc == 1.0  # both rows tie, the lower class index wins


def test_one_hot():
    oh = models.one_hot(np.array([2, 0]), 3)
    assert np.array_equal(oh, np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("rnn", (3,), 2)
    with pytest.raises(ValueError):
        ModelSpec("dense-mlp", (3,), 2, activation="gelu")
    with pytest.raises(ValueError):
        ModelSpec("conv-lite", (4, 5, 1), 2, widths=(3,))  # not square
    with pytest.raises(ValueError):
        ModelSpec("conv-lite", (4, 4, 1), 2)  # needs a filter count
