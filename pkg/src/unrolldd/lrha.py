"""Randomized low-rank factorization of Hessians seen only through products.

Classic randomized range finding with two rounds of subspace iteration:
probe the operator with a Gaussian block, power-iterate to sharpen the
spectrum, orthonormalize, project, and take a small dense SVD of the
projected block.  The operator H is only ever touched through
matrix-vector products, exactly 6k of them for rank k (k to probe, 4k for
two power rounds, k for the projection), and nothing of size p x p is
formed.  Peak auxiliary storage is 2pk + k^2 floats, tracked explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POWER_ROUNDS = 2


@dataclass(frozen=True)
class LrhaConfig:
    enabled: bool = False
    k_min: int = 4
    k_max_fraction: float = 0.1
    redraw_on_qr_failure: bool = True

    def __post_init__(self):
        if self.k_min < 1:
            raise ValueError("k_min must be positive")
        if not (0.0 < self.k_max_fraction <= 1.0):
            raise ValueError("k_max_fraction must lie in (0, 1]")


@dataclass
class HvpCounter:
    """Tallies operator products and the live-float high-water mark."""

    count: int = 0
    peak_extra_floats: int = 0
    madds: int = 0
    _live: int = field(default=0, repr=False)

    def allocate(self, n_floats: int):
        self._live += int(n_floats)
        if self._live > self.peak_extra_floats:
            self.peak_extra_floats = self._live

    def release(self, n_floats: int):
        self._live -= int(n_floats)


@dataclass
class LowRankHessian:
    """Factors H~ = (Q U) diag(sigma) (Q V)^T of a symmetric operator.

    Q is p x k with orthonormal columns; U, V are k x k; sigma is
    descending and non-negative.  Due to the final small SVD, H~ is not
    forced to be symmetric, only close to the projected operator.
    """

    q: np.ndarray
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def p(self) -> int:
        return self.q.shape[0]

    @property
    def k(self) -> int:
        return self.q.shape[1]

    def apply(self, vec: np.ndarray, counter: HvpCounter | None = None) -> np.ndarray:
        """H~ @ vec through the factors, O(pk + k^2) multiply-adds."""
        vec = np.asarray(vec, dtype=np.float64)
        p, k = self.q.shape
        y = self.q.T @ vec          # p*k madds
        y = self.v.T @ y            # k*k
        y = self.sigma * y          # k
        y = self.u @ y              # k*k
        out = self.q @ y            # p*k
        if counter is not None:
            counter.madds += 2 * p * k + 2 * k * k + k
        return out


def adaptive_rank(current_norm, running_max_norm, k_min, k_max) -> int:
    """Gradient-magnitude-proportional rank, floored at k_min, capped at k_max."""
    k_min, k_max = int(k_min), int(k_max)
    if k_min < 1:
        raise ValueError("k_min must be positive")
    if k_min > k_max:
        raise ValueError(f"k_min={k_min} exceeds k_max={k_max}")
    current = float(current_norm)
    if current < 0.0:
        raise ValueError("negative gradient norm")
    ratio = current / max(float(running_max_norm), 1e-12)
    k = max(k_min, int(np.floor(k_max * ratio)))
    return min(k, k_max)


def factorize(hvp_op, p, k, rng, counter: HvpCounter | None = None,
              redraw_on_failure: bool = True) -> LowRankHessian:
    """Factor a symmetric operator given only v -> H v.

    Exactly 6k operator products.  If orthonormalization fails (the QR
    factor comes back non-finite or loses orthonormality), the Gaussian
    probe is redrawn once; a second failure raises LinAlgError.  Plain
    rank deficiency is not a failure, trailing directions just receive
    zero singular values.
    """
    p, k = int(p), int(k)
    if not (1 <= k <= p):
        raise ValueError(f"rank k={k} must lie in [1, p={p}]")
    if counter is None:
        counter = HvpCounter()

    attempts = 1 + (1 if redraw_on_failure else 0)
    last_error = None
    for _ in range(attempts):
        try:
            return _factorize_once(hvp_op, p, k, rng, counter)
        except np.linalg.LinAlgError as err:
            last_error = err
    raise np.linalg.LinAlgError(f"orthonormalization failed twice: {last_error}")


def _apply_block(hvp_op, block, counter: HvpCounter):
    out = np.empty_like(block)
    for i in range(block.shape[1]):
        out[:, i] = hvp_op(block[:, i])
        counter.count += 1
    return out


def _factorize_once(hvp_op, p, k, rng, counter: HvpCounter) -> LowRankHessian:
    pk = p * k
    omega = rng.standard_normal((p, k))
    counter.allocate(pk)

    counter.allocate(pk)                 # probe image Y0
    y = _apply_block(hvp_op, omega, counter)     # k products
    counter.release(pk)                  # omega dropped
    del omega

    for _ in range(POWER_ROUNDS):        # each round: 2k products, H (H y)
        counter.allocate(pk)
        z = _apply_block(hvp_op, y, counter)
        counter.release(pk)              # previous y dropped
        y = None
        counter.allocate(pk)
        y = _apply_block(hvp_op, z, counter)
        counter.release(pk)              # z dropped
        z = None

    counter.allocate(pk)                 # Q
    q, r = np.linalg.qr(y)
    counter.release(pk)                  # y dropped
    del y, r
    if not np.all(np.isfinite(q)):
        raise np.linalg.LinAlgError("non-finite orthonormal factor")
    ortho_defect = np.abs(q.T @ q - np.eye(k)).max()
    if ortho_defect > 1e-8:
        raise np.linalg.LinAlgError(f"orthonormality defect {ortho_defect:.2e}")

    counter.allocate(pk)                 # H Q
    hq = _apply_block(hvp_op, q, counter)        # k products
    counter.allocate(k * k)              # B
    b = q.T @ hq
    counter.release(pk)                  # H Q dropped
    del hq

    u, sigma, vt = np.linalg.svd(b)
    counter.release(k * k)               # B dropped
    return LowRankHessian(q=q, u=u, sigma=sigma, v=vt.T)


def apply_damped(factors: LowRankHessian, alpha, vec, counter: HvpCounter | None = None) -> np.ndarray:
    """(1 - alpha H~) @ vec through the factors; never forms a p x p array."""
    vec = np.asarray(vec, dtype=np.float64)
    out = vec - float(alpha) * factors.apply(vec, counter=counter)
    if counter is not None:
        counter.madds += factors.p
    return out
