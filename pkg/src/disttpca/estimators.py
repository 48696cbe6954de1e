"""Distributed tensor PCA protocols and their supporting statistics.

All protocols read machine data only through per-machine local operations
routed by a :class:`~disttpca.runtime.Coordinator`; the coordinator sees
nothing but the decoded subspace messages.  Aggregation always folds
machines in ascending ``machine_id``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .runtime import Coordinator, MachineState, check_machines
from .tensor import fix_signs, matricize, mode_product, multi_mode_product, singular_values, svd_top_r
from .tucker import FactorEstimates, hooi

RankSpec = Union[int, Sequence[int], Sequence[Sequence[int]]]


@dataclass
class HeteroEstimates:
    common: list[np.ndarray]
    individual: list[list[np.ndarray]]  # individual[machine][mode], machines in id order


@dataclass
class TransferEstimates:
    common: list[np.ndarray]
    individual: list[np.ndarray]  # target machine only
    weights: np.ndarray  # target first, then sources in the order given
    sigma_hat: np.ndarray | None = None


# ---------------------------------------------------------------------------
# local building blocks
# ---------------------------------------------------------------------------

def local_projected_matrix(
    machine: MachineState,
    j: int,
    factors: Sequence[np.ndarray | None] | None = None,
) -> np.ndarray:
    """``unfold_j(T x_{k != j} U_k^T)`` using the machine's initial factors.

    Shape ``p_j x prod_{k != j} r_k``.  The mode-``j`` factor is ignored and may be ``None``.
    """
    factors = machine.init_factors if factors is None else factors
    ndim = machine.tensor.ndim
    if factors is None or len(factors) != ndim:
        raise ValueError(f"machine {machine.machine_id} has no initial factors for all {ndim} modes")
    for k, f in enumerate(factors):
        if k != j and f is None:
            raise ValueError(f"machine {machine.machine_id} is missing the initial factor of mode {k}")
    partial = multi_mode_product(machine.tensor, list(factors), skip=j, transpose=True)
    return matricize(partial, j)


def hetero_local_matrix(machine: MachineState, j: int) -> np.ndarray:
    """Projected unfolding with the joint ``[U V]`` initial factors.

    Identical to :func:`local_projected_matrix`; the joint structure lives
    entirely in the width of the initial factors.
    """
    return local_projected_matrix(machine, j)


def local_estimates(machine: MachineState, ranks: Sequence[int]) -> list[np.ndarray]:
    """One-machine estimator: top-``r_j`` left singular vectors of every local projected unfolding."""
    return [svd_top_r(local_projected_matrix(machine, j), r)[0] for j, r in enumerate(ranks)]


def average_projections(bases: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """``sum_l w_l B_l B_l^T`` folded in the given order (uniform ``1/L`` weights by default)."""
    if not bases:
        raise ValueError("nothing to average")
    n = len(bases)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    if len(weights) != n:
        raise ValueError(f"{len(weights)} weights for {n} bases")
    p = bases[0].shape[0]
    acc = np.zeros((p, p))
    for w, b in zip(weights, bases):
        acc += w * (b @ b.T)
    return acc


def top_subspace(sym: np.ndarray, r: int) -> np.ndarray:
    """Leading ``r`` eigenvectors of a symmetric PSD matrix (its top left singular vectors)."""
    sym = 0.5 * (sym + sym.T)
    w, v = np.linalg.eigh(sym)
    order = np.argsort(-w, kind="stable")[:r]
    return fix_signs(np.ascontiguousarray(v[:, order]))


def complement_top(matrix: np.ndarray, basis: np.ndarray, r: int) -> np.ndarray:
    """Top-``r`` left singular vectors of ``(I - B B^T) matrix``, exactly orthogonal to ``B``.

    Works in coordinates of an orthonormal complement of ``Col(B)``, which has
    the same nonzero spectrum as the projected matrix.
    """
    p, k = basis.shape
    if r == 0:
        return np.zeros((p, 0))
    if r > p - k:
        raise ValueError(f"cannot fit rank {r} in the {p - k}-dimensional complement")
    q = np.linalg.qr(basis, mode="complete")[0][:, k:]
    inner = svd_top_r(q.T @ matrix, r)[0]
    return fix_signs(q @ inner)


def _per_machine_ranks(given: RankSpec, n_machines: int, n_modes: int) -> list[list[int]]:
    if isinstance(given, (int, np.integer)):
        return [[int(given)] * n_modes for _ in range(n_machines)]
    given = list(given)
    if given and all(isinstance(x, (int, np.integer)) for x in given):
        if len(given) != n_modes:
            raise ValueError(f"expected {n_modes} ranks, got {len(given)}")
        return [[int(x) for x in given] for _ in range(n_machines)]
    if len(given) != n_machines:
        raise ValueError(f"expected ranks for {n_machines} machines, got {len(given)}")
    out = [[int(x) for x in row] for row in given]
    if any(len(row) != n_modes for row in out):
        raise ValueError(f"each machine needs {n_modes} ranks")
    return out


def _mode_ranks(ranks: int | Sequence[int], n_modes: int) -> list[int]:
    if isinstance(ranks, (int, np.integer)):
        return [int(ranks)] * n_modes
    ranks = [int(r) for r in ranks]
    if len(ranks) != n_modes:
        raise ValueError(f"expected {n_modes} ranks, got {len(ranks)}")
    return ranks


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def homo_distributed_pca(
    machines: Sequence[MachineState],
    ranks: int | Sequence[int],
    coordinator: Coordinator | None = None,
) -> FactorEstimates:
    """One-shot projection averaging for machines sharing one Tucker model.

    Per mode: every machine sends the top-``r_j`` left singular vectors of its
    projected unfolding; the center averages the projection matrices and keeps
    the top-``r_j`` eigenvectors.  One upload round per mode.
    """
    coord = coordinator if coordinator is not None else Coordinator()
    ordered = check_machines(machines)
    if not ordered:
        raise ValueError("need at least one machine")
    ranks = _mode_ranks(ranks, ordered[0].tensor.ndim)
    factors = []
    for j, r in enumerate(ranks):
        msgs = coord.gather(ordered, j, lambda m, j=j, r=r: svd_top_r(local_projected_matrix(m, j), r)[0])
        factors.append(top_subspace(average_projections([msg.payload for msg in msgs]), r))
    return FactorEstimates(factors)


def pooled_pca(
    tensors: Sequence[np.ndarray] | Sequence[MachineState],
    ranks: int | Sequence[int],
    coordinator: Coordinator | None = None,
    max_iter: int = 50,
    tol: float = 1e-8,
) -> FactorEstimates:
    """Benchmark: average the raw tensors, then run HOOI on the mean.

    Given machine states, the tensors are shipped through the coordinator so
    the ledger records the full ``8 * prod(p)`` bytes per machine.
    """
    items = list(tensors)
    if not items:
        raise ValueError("need at least one tensor")
    if isinstance(items[0], MachineState):
        coord = coordinator if coordinator is not None else Coordinator()
        arrays = coord.upload_tensors(items)
    else:
        arrays = [np.asarray(t, dtype=float) for t in items]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("tensors do not share dimensions")
    mean = np.zeros(shape)
    for a in arrays:
        mean += a
    mean /= len(arrays)
    return hooi(mean, _mode_ranks(ranks, len(shape)), max_iter=max_iter, tol=tol)


def hetero_distributed_pca(
    machines: Sequence[MachineState],
    common_ranks: int | Sequence[int],
    individual_ranks: RankSpec,
    coordinator: Coordinator | None = None,
) -> HeteroEstimates:
    """Common/individual subspace estimation for machines with machine-specific components.

    Machines must carry joint ``[U V]`` initial factors.  Per mode: upload
    the top-``r_U`` local bases, average projections, broadcast the common
    estimate, then each machine extracts its individual part from the
    orthogonal complement.  The common components are assumed to occupy the
    leading singular positions.
    """
    coord = coordinator if coordinator is not None else Coordinator()
    ordered = check_machines(machines)
    if not ordered:
        raise ValueError("need at least one machine")
    n_modes = ordered[0].tensor.ndim
    common_ranks = _mode_ranks(common_ranks, n_modes)
    ind = _per_machine_ranks(individual_ranks, len(ordered), n_modes)
    common = []
    individual = [[None] * n_modes for _ in ordered]
    for j, r in enumerate(common_ranks):
        msgs = coord.gather(ordered, j, lambda m, j=j, r=r: svd_top_r(hetero_local_matrix(m, j), r)[0])
        u_hat = top_subspace(average_projections([msg.payload for msg in msgs]), r)
        common.append(u_hat)
        coord.broadcast(u_hat, ordered, j)
        for i, m in enumerate(ordered):
            individual[i][j] = complement_top(hetero_local_matrix(m, j), m.inbox[j], ind[i][j])
    return HeteroEstimates(common, individual)


def two_iteration_pca(
    machines: Sequence[MachineState],
    ranks: int | Sequence[int],
    coordinator: Coordinator | None = None,
) -> FactorEstimates:
    """Each machine refines its factors twice locally, then one projection-averaging round per mode."""
    coord = coordinator if coordinator is not None else Coordinator()
    ordered = check_machines(machines)
    if not ordered:
        raise ValueError("need at least one machine")
    ranks = _mode_ranks(ranks, ordered[0].tensor.ndim)

    def refine(m: MachineState) -> list[np.ndarray]:
        factors = m.init_factors
        for _ in range(2):
            factors = [svd_top_r(local_projected_matrix(m, j, factors), r)[0] for j, r in enumerate(ranks)]
        return factors

    refined = dict(zip((m.machine_id for m in ordered), coord._map(refine, ordered)))
    factors = []
    for j, r in enumerate(ranks):
        msgs = coord.gather(ordered, j, lambda m, j=j: refined[m.machine_id][j])
        factors.append(top_subspace(average_projections([msg.payload for msg in msgs]), r))
    return FactorEstimates(factors)


def transfer_pca(
    target: MachineState,
    sources: Sequence[MachineState],
    common_ranks: int | Sequence[int],
    target_individual_ranks: int | Sequence[int],
    weights: Sequence[float] | str = "adaptive",
    coordinator: Coordinator | None = None,
) -> TransferEstimates:
    """Weighted projection averaging on the target machine.

    ``weights`` lists the target's weight first, then the sources' in the
    given order, and must sum to one.  ``"adaptive"`` sets
    ``w_l proportional to sigma_hat_l^-2``, each machine estimating its own
    noise level from the joint bases of its projected unfoldings (joint rank
    = width of its initial factors).  Sources upload to the target; the
    target's own basis never leaves it.
    """
    coord = coordinator if coordinator is not None else Coordinator()
    sources = list(sources)
    everyone = [target] + sources
    check_machines(everyone)
    n_modes = target.tensor.ndim
    common_ranks = _mode_ranks(common_ranks, n_modes)
    target_ranks = _mode_ranks(target_individual_ranks, n_modes)

    sigma_hat = None
    if isinstance(weights, str):
        if weights != "adaptive":
            raise ValueError(f"unknown weighting {weights!r}")
        sigma_hat = np.array([local_noise_level(target)] + coord.gather_scalars(sources, local_noise_level))
        if sources:
            # gather_scalars returns id order; restore the caller's source order
            by_id = dict(zip(sorted(m.machine_id for m in sources), sigma_hat[1:]))
            sigma_hat[1:] = [by_id[m.machine_id] for m in sources]
        w = optimal_weights(sigma_hat)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(everyone),):
            raise ValueError(f"expected {len(everyone)} weights, got {w.size}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
    weight_of = {m.machine_id: wi for m, wi in zip(everyone, w)}

    common, individual = [], []
    for j, r in enumerate(common_ranks):
        local_u = lambda m, j=j, r=r: svd_top_r(hetero_local_matrix(m, j), r)[0]
        received = {msg.machine_id: msg.payload for msg in coord.gather(sources, j, local_u)} if sources else {}
        received[target.machine_id] = local_u(target)
        ids = sorted(received)
        u_hat = top_subspace(average_projections([received[i] for i in ids], [weight_of[i] for i in ids]), r)
        common.append(u_hat)
        individual.append(complement_top(hetero_local_matrix(target, j), u_hat, target_ranks[j]))
    return TransferEstimates(common, individual, w, sigma_hat)


# ---------------------------------------------------------------------------
# ranks
# ---------------------------------------------------------------------------

def estimate_local_joint_rank(matrix: np.ndarray, max_rank: int, tol: float = 1e-12) -> int:
    """Eigenvalue-ratio rank estimate ``argmax_{k <= max_rank} s_k / s_{k+1}``.

    Singular values below ``tol * s_1`` count as zero; ``s_{k+1}`` past the end is zero.
    """
    s = singular_values(matrix)
    if s.size == 0 or s[0] < tol:
        raise ValueError("all singular values are numerically zero")
    if not 1 <= max_rank <= s.size:
        raise ValueError(f"max_rank {max_rank} out of range 1..{s.size}")
    s = np.where(s < tol * s[0], 0.0, s)
    ext = np.append(s, 0.0)
    ratios = np.empty(max_rank)
    for k in range(max_rank):
        num, den = ext[k], ext[k + 1]
        if num == 0.0:
            ratios[k] = -np.inf
        elif den == 0.0:
            ratios[k] = np.inf
        else:
            ratios[k] = num / den
    return int(np.argmax(ratios)) + 1


def aggregate_ranks(local_ranks: Sequence[int]) -> int:
    """Median of the local rank estimates, halves rounded up."""
    return int(np.floor(np.median(np.asarray(local_ranks, dtype=float)) + 0.5))


def estimate_ranks(
    machines: Sequence[MachineState],
    max_rank: int,
    coordinator: Coordinator | None = None,
) -> list[int]:
    """Distributed rank determination: local eigenvalue-ratio estimates, aggregated by median.

    Uses each machine's (possibly overparametrized) initial factors to form
    the projected unfoldings.
    """
    coord = coordinator if coordinator is not None else Coordinator()
    ordered = check_machines(machines)
    out = []
    for j in range(ordered[0].tensor.ndim):
        local = coord.gather_scalars(
            ordered, lambda m, j=j: estimate_local_joint_rank(local_projected_matrix(m, j), max_rank)
        )
        out.append(aggregate_ranks([int(x) for x in local]))
    return out


def estimate_common_rank(
    machines: Sequence[MachineState],
    joint_ranks: RankSpec,
    delta0: float = 0.1,
    coordinator: Coordinator | None = None,
) -> list[int]:
    """Per mode, the number of eigenvalues of the averaged joint projections that are at least ``1 - delta0``.

    Returns 0 for a mode when no eigenvalue reaches the threshold.
    """
    if not 0 < delta0 < 1:
        raise ValueError("delta0 must lie in (0, 1)")
    coord = coordinator if coordinator is not None else Coordinator()
    ordered = check_machines(machines)
    n_modes = ordered[0].tensor.ndim
    joint = dict(zip((m.machine_id for m in ordered), _per_machine_ranks(joint_ranks, len(ordered), n_modes)))
    out = []
    for j in range(n_modes):
        msgs = coord.gather(
            ordered, j, lambda m, j=j: svd_top_r(hetero_local_matrix(m, j), joint[m.machine_id][j])[0]
        )
        w_bar = average_projections([msg.payload for msg in msgs])
        eig = np.linalg.eigvalsh(0.5 * (w_bar + w_bar.T))
        out.append(int(np.sum(eig >= 1.0 - delta0)))
    return out


def heterogeneity_measure(v_components: Sequence) -> float:
    """``min_{j,l} mean_{l' != l} (1 - ||V_{j,l}^T V_{j,l'}||_2)``.

    ``v_components[l][j]`` is machine ``l``'s individual basis for mode ``j``;
    a flat list of matrices is read as a single mode.
    """
    grid = [[np.asarray(v)] if np.ndim(v) == 2 else [np.asarray(x) for x in v] for v in v_components]
    n = len(grid)
    if n < 2:
        raise ValueError("need at least two machines")
    n_modes = len(grid[0])
    best = np.inf
    for j in range(n_modes):
        for a in range(n):
            total = 0.0
            for b in range(n):
                if b != a:
                    total += 1.0 - np.linalg.norm(grid[a][j].T @ grid[b][j], 2)
            best = min(best, total / (n - 1))
    return float(best)


# ---------------------------------------------------------------------------
# noise levels and weights
# ---------------------------------------------------------------------------

def projection_residual(tensor: np.ndarray, bases: Sequence[np.ndarray]) -> np.ndarray:
    """``T - T x_j P_j P_j^T`` over all modes."""
    tensor = np.asarray(tensor, dtype=float)
    core = multi_mode_product(tensor, list(bases), transpose=True)
    recon = core
    for j, b in enumerate(bases):
        recon = mode_product(recon, b, j)
    return tensor - recon


def estimate_noise_level(
    machine: MachineState | np.ndarray,
    fitted: FactorEstimates | Sequence[np.ndarray],
) -> float:
    """``||T - T x_j P_j P_j^T||_F / sqrt(prod p)`` with ``P_j`` the fitted (joint) bases."""
    tensor = machine.tensor if isinstance(machine, MachineState) else np.asarray(machine, dtype=float)
    bases = fitted.factors if isinstance(fitted, FactorEstimates) else list(fitted)
    return float(np.linalg.norm(projection_residual(tensor, bases)) / np.sqrt(tensor.size))


def local_joint_bases(machine: MachineState) -> list[np.ndarray]:
    """Top left singular vectors of every projected unfolding at the joint rank of the initial factors."""
    return [
        svd_top_r(hetero_local_matrix(machine, j), f.shape[1])[0]
        for j, f in enumerate(machine.init_factors)
    ]


def local_noise_level(machine: MachineState) -> float:
    return estimate_noise_level(machine, local_joint_bases(machine))


def optimal_weights(sigma: Sequence[float]) -> np.ndarray:
    """Inverse-variance weights ``sigma_l^-2 / sum_k sigma_k^-2``."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 1 or sigma.size == 0:
        raise ValueError("need a nonempty vector of noise levels")
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ValueError("noise levels must be positive")
    inv = sigma ** -2.0
    return inv / inv.sum()
