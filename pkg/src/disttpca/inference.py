"""Asymptotic inference for the squared projection distance of the aggregated estimator.

For the two-iteration distributed estimator, ``rho^2(U_hat, U)`` is
approximately normal with

    bias = 2 sigma^2 p_j ||Lambda_j^-1||_F^2 / L
    sd   = sqrt(8 p_j) sigma^2 ||Lambda_j^-2||_F / L

where ``Lambda_j`` holds the singular values of the mode-``j`` core unfolding.
The centering uses ``p_j`` rather than ``p_j - r_j``, which presumes ``r_j`` is
small relative to ``p_j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .estimators import estimate_noise_level
from .runtime import MachineState
from .tensor import matricize, multi_mode_product, rho, svd_top_r
from .tucker import FactorEstimates

# Acklam's rational approximation to the standard normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_quantile(q: float) -> float:
    """Inverse standard normal CDF.

    Acklam's approximation (relative error about 1e-9) followed by one Halley
    step against ``math.erfc``, which brings it to double precision.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    if q < _P_LOW:
        t = math.sqrt(-2.0 * math.log(q))
        x = (((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]) / \
            ((((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0)
    elif q <= 1.0 - _P_LOW:
        s = q - 0.5
        t = s * s
        x = (((((_A[0] * t + _A[1]) * t + _A[2]) * t + _A[3]) * t + _A[4]) * t + _A[5]) * s / \
            (((((_B[0] * t + _B[1]) * t + _B[2]) * t + _B[3]) * t + _B[4]) * t + 1.0)
    else:
        t = math.sqrt(-2.0 * math.log1p(-q))
        x = -(((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]) / \
            ((((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0)
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - q
    u = err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@dataclass(frozen=True)
class InferenceSummary:
    mode: int
    bias: float
    sd: float
    sigma_hat: float
    lambda_hat: tuple[float, ...]


def estimate_lambda(
    machine: MachineState | np.ndarray,
    fitted: FactorEstimates | Sequence[np.ndarray],
    j: int,
) -> np.ndarray:
    """Top ``r_j`` singular values of ``unfold_j(T x_{k != j} U_k^T)``, nonincreasing."""
    tensor = machine.tensor if isinstance(machine, MachineState) else np.asarray(machine, dtype=float)
    bases = fitted.factors if isinstance(fitted, FactorEstimates) else list(fitted)
    partial = multi_mode_product(tensor, bases, skip=j, transpose=True)
    return svd_top_r(matricize(partial, j), bases[j].shape[1])[1]


def inference_summary(
    sigma_hat: float,
    lambda_hat: Sequence[float],
    p_j: int,
    n_machines: int,
    mode: int = 0,
) -> InferenceSummary:
    lam = np.asarray(lambda_hat, dtype=float)
    if lam.size == 0 or np.any(lam <= 0):
        raise ValueError("singular values must be positive")
    if sigma_hat < 0 or p_j <= 0 or n_machines <= 0:
        raise ValueError("sigma_hat must be nonnegative and p_j, L positive")
    s2 = sigma_hat * sigma_hat
    inv2 = np.sum(lam ** -2.0)
    inv4 = np.sqrt(np.sum(lam ** -4.0))
    bias = 2.0 * s2 * p_j * inv2 / n_machines
    sd = math.sqrt(8.0 * p_j) * s2 * inv4 / n_machines
    return InferenceSummary(mode, float(bias), float(sd), float(sigma_hat), tuple(float(x) for x in lam))


def studentized(u_hat: np.ndarray, candidate: np.ndarray, summary: InferenceSummary) -> float:
    """``(rho^2(U_hat, candidate) - bias) / sd``."""
    return (rho(u_hat, candidate) ** 2 - summary.bias) / summary.sd


def confidence_region_contains(
    u_hat: np.ndarray,
    candidate: np.ndarray,
    summary: InferenceSummary,
    xi: float = 0.05,
) -> bool:
    """Whether ``candidate`` lies in the level ``1 - xi`` region around ``u_hat``."""
    if not 0.0 < xi < 1.0:
        raise ValueError("xi must lie in (0, 1)")
    z = normal_quantile(1.0 - xi / 2.0)
    return abs(rho(u_hat, candidate) ** 2 - summary.bias) <= z * summary.sd


def summarize(
    machines: Sequence[MachineState],
    fitted: FactorEstimates | Sequence[np.ndarray],
    machine_index: int = 0,
) -> list[InferenceSummary]:
    """Plug-in summaries for every mode, using one machine's tensor (the first by default)."""
    ordered = sorted(machines, key=lambda m: m.machine_id)
    source = ordered[machine_index]
    bases = fitted.factors if isinstance(fitted, FactorEstimates) else list(fitted)
    sigma_hat = estimate_noise_level(source, bases)
    return [
        inference_summary(sigma_hat, estimate_lambda(source, bases, j), source.dims[j], len(ordered), mode=j)
        for j in range(len(bases))
    ]
