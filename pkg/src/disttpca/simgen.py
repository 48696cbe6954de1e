"""Seeded synthetic Tucker scenarios with their initializers and the reconstruction-error metric.

Random streams come from ``numpy.random.Philox`` keyed by
``SeedSequence(seed, spawn_key=(purpose, machine, mode))``, so each piece of a
scenario (core, factor, noise) has its own stream.  Changing ``L`` therefore
leaves the draws of the first machines untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .runtime import MachineState
from .tensor import matricize, multi_mode_product, qr_orthonormalize, singular_values, write_dtpt
from .tucker import hooi, hosvd

SAME_CORE = "same_core"
DIFFERENT_CORES = "different_cores"

# stream purposes
_CORE_U, _CORE_V, _FACTOR_U, _FACTOR_V, _NOISE = range(5)

_MAX_REDRAWS = 16
_DEGENERATE = 1e-10


def stream(seed: int, purpose: int, machine: int = 0, mode: int = 0) -> np.random.Generator:
    """Independent generator for one (purpose, machine, mode) triple."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), int(machine), int(mode)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ScenarioConfig:
    p: int
    r_u: int = 3
    r_v: int = 0
    lam: float = 1.0
    sigma: float | tuple[float, ...] = 1.0
    L: int = 1
    J: int = 3
    core_mode: str = SAME_CORE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.p < 1 or self.L < 1:
            raise ValueError("p and L must be positive")
        if self.J < 2:
            raise ValueError("need at least two modes")
        if self.r_u < 1 or self.r_v < 0 or self.r_u + self.r_v > self.p:
            raise ValueError(f"ranks r_u={self.r_u}, r_v={self.r_v} invalid for p={self.p}")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.core_mode not in (SAME_CORE, DIFFERENT_CORES):
            raise ValueError(f"unknown core_mode {self.core_mode!r}")
        s = self.sigmas
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("noise levels must be finite and nonnegative")

    @property
    def sigmas(self) -> np.ndarray:
        """Per-machine noise levels (a scalar is broadcast to all machines)."""
        s = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if s.size == 1:
            return np.full(self.L, float(s[0]))
        if s.size != self.L:
            raise ValueError(f"{s.size} noise levels for {self.L} machines")
        return s

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.p,) * self.J

    @property
    def joint_rank(self) -> int:
        return self.r_u + self.r_v


@dataclass
class GroundTruth:
    common: list[np.ndarray]
    individual: list[list[np.ndarray]]  # [machine][mode], width 0 when homogeneous
    cores: list[np.ndarray]
    clean: list[np.ndarray]
    noise: list[np.ndarray] = field(default_factory=list, repr=False)

    def joint(self, machine: int) -> list[np.ndarray]:
        return [np.hstack([u, v]) for u, v in zip(self.common, self.individual[machine])]


def _unfolding_spectra(core: np.ndarray) -> list[np.ndarray]:
    return [singular_values(matricize(core, j)) for j in range(core.ndim)]


def extreme_singular_value(core: np.ndarray, which: str = "min") -> float:
    """Smallest (or largest) singular value over all matricizations."""
    spectra = _unfolding_spectra(core)
    if which == "min":
        return float(min(s[-1] for s in spectra))
    if which == "max":
        return float(max(s[0] for s in spectra))
    raise ValueError("which must be 'min' or 'max'")


def scaled_core(rng: np.random.Generator, r: int, J: int, target: float, which: str = "min") -> np.ndarray:
    """Gaussian ``r^J`` core rescaled so its extreme matricization singular value equals ``target``.

    Draws whose smallest singular value is numerically zero are redrawn, at most 16 times.
    """
    for _ in range(_MAX_REDRAWS):
        g = rng.standard_normal((r,) * J)
        if extreme_singular_value(g, "min") > _DEGENERATE:
            return target * g / extreme_singular_value(g, which)
    raise RuntimeError(f"could not draw a nondegenerate {r}^{J} core in {_MAX_REDRAWS} tries")


def block_diagonal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Core with ``a`` in the leading corner block, ``b`` in the trailing one, zeros elsewhere."""
    if a.ndim != b.ndim:
        raise ValueError("blocks must have the same number of modes")
    out = np.zeros(tuple(x + y for x, y in zip(a.shape, b.shape)))
    out[tuple(slice(0, n) for n in a.shape)] = a
    out[tuple(slice(n, None) for n in a.shape)] = b
    return out


def _random_basis(rng: np.random.Generator, p: int, r: int) -> np.ndarray:
    return qr_orthonormalize(rng.standard_normal((p, r)))


def _individual_basis(rng: np.random.Generator, u: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return np.zeros((u.shape[0], 0))
    raw = rng.standard_normal((u.shape[0], r))
    raw = raw - u @ (u.T @ raw)
    v = qr_orthonormalize(raw)
    # one more projection removes the O(eps) component QR reintroduces
    v = v - u @ (u.T @ v)
    return qr_orthonormalize(v)


def _core_for(config: ScenarioConfig, machine: int) -> np.ndarray:
    key = machine if config.core_mode == DIFFERENT_CORES else 0
    g_u = scaled_core(stream(config.seed, _CORE_U, key), config.r_u, config.J, config.lam, "min")
    if config.r_v == 0:
        return g_u
    g_v = scaled_core(stream(config.seed, _CORE_V, key), config.r_v, config.J, config.lam / 2.0, "max")
    return block_diagonal(g_u, g_v)


def _generate(config: ScenarioConfig) -> tuple[list[MachineState], GroundTruth]:
    sigmas = config.sigmas
    common = [_random_basis(stream(config.seed, _FACTOR_U, 0, j), config.p, config.r_u) for j in range(config.J)]
    individual, cores, clean, noise, machines = [], [], [], [], []
    for ell in range(config.L):
        v = [_individual_basis(stream(config.seed, _FACTOR_V, ell, j), common[j], config.r_v) for j in range(config.J)]
        core = _core_for(config, ell)
        joint = [np.hstack([u, vj]) for u, vj in zip(common, v)]
        t_star = multi_mode_product(core, joint)
        z = sigmas[ell] * stream(config.seed, _NOISE, ell).standard_normal(config.dims)
        individual.append(v)
        cores.append(core)
        clean.append(t_star)
        noise.append(z)
        machines.append(MachineState(ell, t_star + z, noise_level_hint=float(sigmas[ell])))
    return machines, GroundTruth(common, individual, cores, clean, noise)


def gen_homogeneous(config: ScenarioConfig) -> tuple[list[MachineState], GroundTruth]:
    """``T_l = G x_j U_j + Z_l`` with one shared core and factors."""
    if config.r_v != 0:
        raise ValueError("homogeneous scenarios need r_v = 0")
    return _generate(config)


def gen_heterogeneous(config: ScenarioConfig) -> tuple[list[MachineState], GroundTruth]:
    """Common factors ``U_j`` plus machine-specific ``V_{j,l}`` orthogonal to them.

    The core is block-diagonal: the common block has smallest singular value
    ``lam`` and the individual block has largest singular value ``lam / 2``.
    Per-machine ``sigma`` vectors give transfer scenarios.
    """
    if config.r_v < 1:
        raise ValueError("heterogeneous scenarios need r_v >= 1")
    return _generate(config)


# ---------------------------------------------------------------------------
# initial factors
# ---------------------------------------------------------------------------

def initialize(
    machines: Sequence[MachineState],
    ranks: int | Sequence[int],
    method: str = "hooi",
    truth: GroundTruth | None = None,
    max_iter: int = 20,
    tol: float = 1e-6,
) -> None:
    """Fill ``init_factors`` of every machine.

    ``"hooi"`` and ``"hosvd"`` use only the machine's own tensor.  ``"oracle"``
    copies the true (joint) factors from ``truth``, which isolates the
    aggregation step from initialization quality.
    """
    for m in machines:
        n_modes = m.tensor.ndim
        rk = [int(ranks)] * n_modes if isinstance(ranks, (int, np.integer)) else list(ranks)
        if method == "hooi":
            m.init_factors = hooi(m.tensor, rk, max_iter=max_iter, tol=tol).factors
        elif method == "hosvd":
            m.init_factors = hosvd(m.tensor, rk).factors
        elif method == "oracle":
            if truth is None:
                raise ValueError("oracle initialization needs the ground truth")
            m.init_factors = [f.copy() for f in truth.joint(m.machine_id)]
        else:
            raise ValueError(f"unknown initialization {method!r}")


def gen_spike(p: int, lam: float, sigma: float, L: int, seed: int = 0) -> tuple[list[MachineState], GroundTruth]:
    """Rank-one cube ``lam e_1 o e_1 o e_1`` plus Gaussian noise on ``L`` machines."""
    e1 = np.zeros((p, 1))
    e1[0, 0] = 1.0
    core = np.full((1, 1, 1), float(lam))
    t_star = multi_mode_product(core, [e1] * 3)
    machines, noise = [], []
    for ell in range(L):
        z = sigma * stream(seed, _NOISE, ell).standard_normal((p, p, p))
        noise.append(z)
        machines.append(MachineState(ell, t_star + z, noise_level_hint=float(sigma)))
    empty = np.zeros((p, 0))
    truth = GroundTruth([e1.copy() for _ in range(3)], [[empty] * 3 for _ in range(L)], [core] * L, [t_star] * L, noise)
    return machines, truth


def adversarial_init(lam: float, p: int, noises: Sequence[np.ndarray]) -> list[list[np.ndarray]]:
    """Initial factors that satisfy the usual accuracy assumption yet bias every local estimate the same way.

    For the rank-one spike along ``e_1`` in every mode, mode 0 and mode 2 start
    exactly at ``e_1``.  The mode-1 start is ``(Q, z / (lam Q))`` where ``z``
    collects the noise entries ``Z[p-1, k, 0]`` for ``k = 1..p-1`` and
    ``Q = sqrt((1 + sqrt(1 - 4 |z|^2 / lam^2)) / 2)``, which makes it a unit vector.
    Raises ``ValueError`` when ``4 |z|^2 / lam^2 >= 1``.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    e1 = np.zeros((p, 1))
    e1[0, 0] = 1.0
    out = []
    for ell, z_full in enumerate(noises):
        z_full = np.asarray(z_full, dtype=float)
        if z_full.shape != (p, p, p):
            raise ValueError(f"noise tensor {ell} has shape {z_full.shape}, expected {(p, p, p)}")
        z = z_full[p - 1, 1:, 0]
        ratio = 4.0 * float(z @ z) / lam ** 2
        if ratio >= 1.0:
            raise ValueError(
                f"machine {ell}: 4|z|^2/lam^2 = {ratio:.3f} >= 1, the construction needs a larger signal"
            )
        q = np.sqrt((1.0 + np.sqrt(1.0 - ratio)) / 2.0)
        u2 = np.concatenate([[q], z / (lam * q)]).reshape(p, 1)
        out.append([e1.copy(), u2, e1.copy()])
    return out


# ---------------------------------------------------------------------------
# evaluation and export
# ---------------------------------------------------------------------------

def reconstruction_error(bases: Sequence[np.ndarray], tensor: np.ndarray) -> float:
    """``||T - T x_j P_j P_j^T||_F / ||T||_F``."""
    tensor = np.asarray(tensor, dtype=float)
    bases = list(bases)
    if len(bases) != tensor.ndim:
        raise ValueError(f"need {tensor.ndim} bases, got {len(bases)}")
    for j, b in enumerate(bases):
        if b.ndim != 2 or b.shape[0] != tensor.shape[j]:
            raise ValueError(f"basis {j} of shape {b.shape} does not match dimension {tensor.shape[j]}")
    norm = np.linalg.norm(tensor)
    if norm == 0:
        raise ValueError("reconstruction error is undefined for a zero tensor")
    recon = multi_mode_product(multi_mode_product(tensor, bases, transpose=True), bases)
    return float(np.linalg.norm(tensor - recon) / norm)


def write_scenario(directory: str | Path, machines: Sequence[MachineState], truth: GroundTruth) -> list[Path]:
    """Write the noisy and clean tensors of every machine plus the true cores and factors as DTPT1 files; returns the paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, array: np.ndarray) -> None:
        path = out / name
        write_dtpt(path, array)
        written.append(path)

    for j, u in enumerate(truth.common):
        put(f"U_{j}.dtpt", u)
    for m in machines:
        ell = m.machine_id
        put(f"T_{ell}.dtpt", m.tensor)
        put(f"Tstar_{ell}.dtpt", truth.clean[ell])
        put(f"G_{ell}.dtpt", truth.cores[ell])
        for j, v in enumerate(truth.individual[ell]):
            if v.shape[1]:
                put(f"V_{ell}_{j}.dtpt", v)
    return written
