"""Dataset distillation by differentiating through truncated training unrolls.

The package is organized around a small reverse-mode autodiff engine
(`autodiff`) that supports gradients of gradients, which is what the
meta-gradient strategies in `innerloop` are built on.  `schedule` decides
where the truncation window goes, `lrha` supplies randomized low-rank
Hessian factors for the backward products, `psp` adds patch-level
alignment, and `distill` ties everything into an outer optimization loop.
`oracle` holds the independent finite-difference and closed-form checks.
"""

from . import autodiff, data, distill, innerloop, lrha, models, oracle, psp, schedule

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "data",
    "distill",
    "innerloop",
    "lrha",
    "models",
    "oracle",
    "psp",
    "schedule",
    "__version__",
]
