"""Central finite-difference gradient checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    *,
    name: str = "fn",
    n_coords: int = 100,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradCheckResult:
    """Compare backward() against central differences on random coordinates.

    ``fn`` maps Tensors to a scalar Tensor. Coordinates are sampled across
    all inputs (with replacement when an input is smaller than its share).
    Error is ``|g_analytic - g_fd| / max(1, |g_fd|)``.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*leaves)
    loss.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    sizes = np.array([a.size for a in arrays], dtype=float)
    which = rng.choice(len(arrays), size=n_coords, p=sizes / sizes.sum())
    worst = 0.0
    for i in which:
        flat = arrays[i].reshape(-1)
        j = rng.integers(flat.size)
        orig = flat[j]
        flat[j] = orig + h
        fp = fn(*[Tensor(a) for a in arrays]).item()
        flat[j] = orig - h
        fm = fn(*[Tensor(a) for a in arrays]).item()
        flat[j] = orig
        fd = (fp - fm) / (2 * h)
        err = abs(analytic[i].reshape(-1)[j] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return GradCheckResult(name, worst, n_coords, tol)
