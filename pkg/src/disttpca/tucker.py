"""HOSVD and HOOI initializers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import matricize, multi_mode_product, rho, svd_top_r


@dataclass
class FactorEstimates:
    """Per-mode orthonormal factors, optionally with the projected core."""

    factors: list[np.ndarray]
    core: np.ndarray | None = None
    n_iter: int = 0
    history: list[float] = field(default_factory=list)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.factors)

    def reconstruct(self) -> np.ndarray:
        if self.core is None:
            raise ValueError("no core stored")
        return multi_mode_product(self.core, self.factors)


def check_ranks(dims: Sequence[int], ranks: Sequence[int]) -> list[int]:
    dims = list(dims)
    ranks = [int(r) for r in ranks]
    if len(ranks) != len(dims):
        raise ValueError(f"expected {len(dims)} ranks, got {len(ranks)}")
    total = int(np.prod(dims))
    for j, (p, r) in enumerate(zip(dims, ranks)):
        if not 0 <= r <= min(p, total // p):
            raise ValueError(f"rank {r} out of range for mode {j} of size {p}")
    return ranks


def project_core(tensor: np.ndarray, factors: Sequence[np.ndarray]) -> np.ndarray:
    return multi_mode_product(tensor, list(factors), transpose=True)


def hosvd(tensor: np.ndarray, ranks: Sequence[int]) -> FactorEstimates:
    """Truncated higher-order SVD: top-``r_j`` left singular vectors of every unfolding."""
    tensor = np.asarray(tensor, dtype=float)
    ranks = check_ranks(tensor.shape, ranks)
    factors = [svd_top_r(matricize(tensor, j), r)[0] for j, r in enumerate(ranks)]
    return FactorEstimates(factors, core=project_core(tensor, factors))


def hooi(
    tensor: np.ndarray,
    ranks: Sequence[int],
    max_iter: int = 50,
    tol: float = 1e-8,
) -> FactorEstimates:
    """Higher-order orthogonal iteration started from :func:`hosvd`.

    Each sweep updates modes in ascending order, each from the latest factors
    of the other modes.  Stops once the largest projection-distance change of
    a sweep drops below ``tol`` or after ``max_iter`` sweeps.  ``history``
    holds the objective ``||core||_F`` after every sweep.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    tensor = np.asarray(tensor, dtype=float)
    est = hosvd(tensor, ranks)
    factors = list(est.factors)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        change = 0.0
        for j, r in enumerate(est.ranks):
            partial = multi_mode_product(tensor, factors, skip=j, transpose=True)
            new = svd_top_r(matricize(partial, j), r)[0]
            change = max(change, rho(new, factors[j]))
            factors[j] = new
        history.append(float(np.linalg.norm(project_core(tensor, factors))))
        if change < tol:
            break
    return FactorEstimates(factors, core=project_core(tensor, factors), n_iter=n_iter, history=history)
