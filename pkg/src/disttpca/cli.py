"""Command-line Monte Carlo driver.

Subcommands
-----------
``simulate``    run a grid of seeded scenarios and write one CSV row per (method, cell, rep, mode)
``coverage``    confidence-region coverage for the homogeneous model
``eval-recon``  reconstruction error of DTPT1 tensors under DTPT1 bases
``gen``         write scenario tensors and ground truth as DTPT1 files

Configs are flat ``key = value`` text; lists use ``[a, b, c]`` and ``#``
starts a comment.  Exit codes: 0 success, 2 config error, 3 IO error.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .estimators import (
    hetero_distributed_pca,
    hetero_local_matrix,
    homo_distributed_pca,
    local_projected_matrix,
    pooled_pca,
    transfer_pca,
    two_iteration_pca,
)
from .inference import confidence_region_contains, summarize
from .runtime import Coordinator, MachineState
from .simgen import (
    DIFFERENT_CORES,
    SAME_CORE,
    GroundTruth,
    ScenarioConfig,
    gen_heterogeneous,
    gen_homogeneous,
    initialize,
    reconstruction_error,
    write_scenario,
)
from .tensor import TensorFormatError, read_dtpt, rho, sin_theta, svd_top_r

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3

RUN_RECORD_FIELDS = (
    "method", "p", "L", "gamma", "rep", "mode", "rho_error", "sin_theta_error",
    "recon_error", "upload_bytes", "download_bytes", "coverage_hit", "wall_ms",
)

SCENARIOS = ("homogeneous", "heterogeneous", "transfer")
METHODS_FOR = {
    "homogeneous": {"distributed", "pooled", "single", "two_iteration"},
    "heterogeneous": {"distributed", "pooled", "single", "transfer"},
    "transfer": {"distributed", "pooled", "single", "transfer"},
}
COVERAGE_METHODS = {"two_iteration", "pooled"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    scenario: str = "homogeneous"
    p: list[int] = field(default_factory=lambda: [50])
    L: list[int] = field(default_factory=lambda: [10])
    gamma: list[float] = field(default_factory=lambda: [0.9])
    core_mode: list[str] = field(default_factory=lambda: [SAME_CORE])
    methods: list[str] = field(default_factory=lambda: ["distributed"])
    r_u: int = 3
    r_v: int = 0
    J: int = 3
    sigma: float = 1.0
    sigma_source: float = 1.0
    reps: int = 100
    base_seed: int = 0
    out_path: str = "results.csv"
    init: str = "hooi"
    xi: float = 0.05

    def cells(self) -> list[tuple[int, int, float, str]]:
        return [(p, L, g, cm) for p in self.p for L in self.L for g in self.gamma for cm in self.core_mode]

    def validate(self, coverage: bool = False) -> "ExperimentConfig":
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        for name in ("p", "L", "gamma", "core_mode", "methods"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if any(p < 1 for p in self.p) or any(L < 1 for L in self.L):
            raise ConfigError("p and L must be positive")
        if any(not math.isfinite(g) for g in self.gamma):
            raise ConfigError("gamma values must be finite")
        if self.J < 2:
            raise ConfigError("J must be at least 2")
        if self.r_u < 1 or self.r_v < 0:
            raise ConfigError("need r_u >= 1 and r_v >= 0")
        if any(self.r_u + self.r_v > p for p in self.p):
            raise ConfigError("r_u + r_v exceeds p")
        if self.scenario == "homogeneous" and self.r_v != 0:
            raise ConfigError("homogeneous scenarios need r_v = 0")
        if self.scenario != "homogeneous" and self.r_v < 1:
            raise ConfigError(f"{self.scenario} scenarios need r_v >= 1")
        if self.scenario == "transfer" and any(L < 2 for L in self.L):
            raise ConfigError("transfer scenarios need a target and at least one source (L >= 2)")
        for cm in self.core_mode:
            if cm not in (SAME_CORE, DIFFERENT_CORES):
                raise ConfigError(f"unknown core_mode {cm!r}")
        if self.sigma < 0 or self.sigma_source < 0:
            raise ConfigError("noise levels must be nonnegative")
        if self.init not in ("hooi", "hosvd", "oracle"):
            raise ConfigError(f"unknown init {self.init!r}")
        if not 0 < self.xi < 1:
            raise ConfigError("xi must lie in (0, 1)")
        allowed = COVERAGE_METHODS if coverage else METHODS_FOR[self.scenario]
        for m in self.methods:
            if m not in allowed:
                raise ConfigError(f"method {m!r} is not available here; choose from {sorted(allowed)}")
        if coverage and self.scenario != "homogeneous":
            raise ConfigError("coverage runs need the homogeneous scenario")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods are listed twice")
        return self


_KEY_ALIASES = {"seed": "base_seed", "out": "out_path", "method": "methods"}
_LIST_KEYS = {"p": int, "L": int, "gamma": float, "core_mode": str, "methods": str}


def _scalar(raw: str, kind: type, key: str):
    raw = raw.strip().strip('"').strip("'")
    try:
        if kind is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError
            return int(value)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines into an :class:`ExperimentConfig` (not yet validated)."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _KEY_ALIASES.get(key, key)
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: {key!r} given twice")
        if key in _LIST_KEYS:
            kind = _LIST_KEYS[key]
            if raw.startswith("["):
                if not raw.endswith("]"):
                    raise ConfigError(f"line {lineno}: unterminated list")
                items = [s for s in raw[1:-1].split(",") if s.strip()]
            else:
                items = [raw]
            values[key] = [_scalar(s, kind, key) for s in items]
        else:
            if raw.startswith("["):
                raise ConfigError(f"line {lineno}: {key!r} takes a single value")
            kind = {"int": int, "float": float, "str": str}[types[key]]
            values[key] = _scalar(raw, kind, key)
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# running one replicate
# ---------------------------------------------------------------------------

def _rep_seed(base_seed: int, rep: int) -> int:
    # the same rep index shares its seed across grid cells (common random numbers)
    return int(np.random.SeedSequence((int(base_seed), int(rep))).generate_state(1, np.uint64)[0])


def _scenario(cfg: ExperimentConfig, p: int, L: int, gamma: float, core_mode: str, rep: int):
    sigma: float | tuple[float, ...] = cfg.sigma
    if cfg.scenario == "transfer":
        sigma = (cfg.sigma,) + (cfg.sigma_source,) * (L - 1)
    sc = ScenarioConfig(
        p=p, r_u=cfg.r_u, r_v=cfg.r_v, lam=float(p) ** gamma, sigma=sigma, L=L, J=cfg.J,
        core_mode=core_mode, seed=_rep_seed(cfg.base_seed, rep),
    )
    if cfg.scenario == "homogeneous":
        return gen_homogeneous(sc)
    return gen_heterogeneous(sc)


def _estimate(
    method: str, cfg: ExperimentConfig, machines: list[MachineState], coord: Coordinator
) -> list[np.ndarray]:
    """Common-factor estimates of every mode for one method."""
    r = cfg.r_u
    if method == "pooled":
        return pooled_pca(machines, r, coordinator=coord).factors
    if method == "single":
        local = hetero_local_matrix if cfg.r_v else local_projected_matrix
        return [svd_top_r(local(machines[0], j), r)[0] for j in range(cfg.J)]
    if method == "two_iteration":
        return two_iteration_pca(machines, r, coordinator=coord).factors
    if method == "transfer":
        return transfer_pca(machines[0], machines[1:], r, cfg.r_v, coordinator=coord).common
    if cfg.scenario == "homogeneous":
        return homo_distributed_pca(machines, r, coordinator=coord).factors
    return hetero_distributed_pca(machines, r, cfg.r_v, coordinator=coord).common


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _run_task(cfg: ExperimentConfig, cell: tuple, rep: int, coverage: bool, timing: bool) -> list[list[str]]:
    p, L, gamma, core_mode = cell
    machines, truth = _scenario(cfg, p, L, gamma, core_mode, rep)
    initialize(machines, cfg.r_u + cfg.r_v, cfg.init, truth)
    rows = []
    for method in cfg.methods:
        coord = Coordinator()
        start = time.perf_counter()
        factors = _estimate(method, cfg, machines, coord)
        hits: list[int | None] = [None] * cfg.J
        if coverage:
            for s in summarize(machines, factors):
                hits[s.mode] = int(confidence_region_contains(factors[s.mode], truth.common[s.mode], s, cfg.xi))
        wall = (time.perf_counter() - start) * 1e3 if timing else None
        recon = reconstruction_error(factors, truth.clean[0]) if cfg.scenario == "homogeneous" else None
        for j, (est, u) in enumerate(zip(factors, truth.common)):
            rows.append([_fmt(v) for v in (
                method, p, L, float(gamma), rep, j, rho(est, u), sin_theta(est, u), recon,
                coord.ledger.upload_bytes, coord.ledger.download_bytes, hits[j], wall,
            )])
    return rows


def run_grid(
    cfg: ExperimentConfig,
    coverage: bool = False,
    threads: int = 1,
    timing: bool = False,
) -> list[list[str]]:
    """All rows in (cell, rep, method, mode) order, whatever order tasks finish in."""
    tasks = [(cell, rep) for cell in cfg.cells() for rep in range(cfg.reps)]
    work: Callable = lambda t: _run_task(cfg, t[0], t[1], coverage, timing)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(work, tasks))
    else:
        chunks = [work(t) for t in tasks]
    return [row for chunk in chunks for row in chunk]


def rows_to_csv(rows: Iterable[Sequence[str]], header: Sequence[str] = RUN_RECORD_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def summarize_rows(rows: list[list[str]], coverage: bool) -> str:
    """Per (method, cell) mean and standard error of the mode-0 error, plus coverage when present."""
    groups: dict[tuple, list[list[str]]] = {}
    for row in rows:
        if row[5] == "0":
            groups.setdefault((row[0], row[1], row[2], row[3]), []).append(row)
    lines = []
    for (method, p, L, gamma), grp in groups.items():
        errs = np.array([float(r[6]) for r in grp])
        se = errs.std(ddof=1) / math.sqrt(errs.size) if errs.size > 1 else float("nan")
        line = f"{method:>13} p={p} L={L} gamma={gamma}: mean rho={errs.mean():.5f} se={se:.5f} n={errs.size}"
        if coverage:
            cov = np.mean([float(r[11]) for r in grp])
            line += f" coverage={cov:.3f}"
        lines.append(line)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# reconstruction evaluation
# ---------------------------------------------------------------------------

def eval_reconstruction(bases_files: Sequence[str | Path], tensor_files: Sequence[str | Path]) -> list[tuple[str, float]]:
    """Reconstruction error of every tensor file under one set of basis files (one per mode).

    Reads everything before computing, so any unreadable file aborts the whole evaluation.
    """
    bases = [read_dtpt(f) for f in bases_files]
    for f, b in zip(bases_files, bases):
        if b.ndim != 2:
            raise TensorFormatError(f"{f}: a basis must be a matrix, got {b.ndim} modes")
    tensors = [read_dtpt(f) for f in tensor_files]
    out = []
    for f, t in zip(tensor_files, tensors):
        if t.ndim != len(bases) or any(b.shape[0] != d for b, d in zip(bases, t.shape)):
            raise ConfigError(f"{f}: dims {t.shape} do not match the basis dims {[b.shape[0] for b in bases]}")
        out.append((str(f), reconstruction_error(bases, t)))
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disttpca", description="Distributed tensor PCA experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def grid_flags(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", required=True, help="key=value experiment file")
        sp.add_argument("--out", help="output CSV (overrides the config)")
        sp.add_argument("--seed", type=int, help="base seed (overrides the config)")
        sp.add_argument("--reps", type=int, help="replicates per cell (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads")
        sp.add_argument("--timing", action="store_true", help="fill wall_ms (makes the CSV nondeterministic)")

    grid_flags(sub.add_parser("simulate", help="Monte Carlo error and communication study"))
    grid_flags(sub.add_parser("coverage", help="confidence-region coverage study"))

    ev = sub.add_parser("eval-recon", help="reconstruction error of DTPT1 tensors")
    ev.add_argument("--bases", nargs="+", required=True, help="one DTPT1 basis matrix per mode")
    ev.add_argument("--tensors", nargs="+", required=True, help="DTPT1 tensors to evaluate")
    ev.add_argument("--out", help="output CSV (stdout when omitted)")

    gen = sub.add_parser("gen", help="write scenario tensors as DTPT1 files")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--reps", type=int, help="replicates per cell (default 1)")
    return parser


def _resolve(args: argparse.Namespace, coverage: bool = False) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "out", None) is not None:
        overrides["out_path"] = args.out
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.reps is not None:
        overrides["reps"] = args.reps
    return replace(cfg, **overrides).validate(coverage=coverage)


def _cmd_grid(args: argparse.Namespace, coverage: bool) -> int:
    cfg = _resolve(args, coverage)
    if args.threads < 1:
        raise ConfigError("threads must be at least 1")
    out = Path(cfg.out_path)
    if not out.parent.is_dir() or not os.access(out.parent, os.W_OK):
        raise OSError(f"{out}: directory is missing or not writable")
    rows = run_grid(cfg, coverage=coverage, threads=args.threads, timing=args.timing)
    _atomic_write(out, rows_to_csv(rows))
    print(summarize_rows(rows, coverage))
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    results = eval_reconstruction(args.bases, args.tensors)
    mean = float(np.mean([e for _, e in results]))
    text = rows_to_csv([[f, repr(e)] for f, e in results] + [["average", repr(mean)]], header=("tensor", "recon_error"))
    if args.out:
        _atomic_write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_gen(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    overrides = {"reps": args.reps if args.reps is not None else 1}
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    cfg = replace(cfg, **overrides).validate()
    root = Path(args.out)
    count = 0
    for p, L, gamma, core_mode in cfg.cells():
        for rep in range(cfg.reps):
            machines, truth = _scenario(cfg, p, L, gamma, core_mode, rep)
            sub = root / f"p{p}_L{L}_gamma{gamma:g}_{core_mode}" / f"rep{rep}"
            count += len(write_scenario(sub, machines, truth))
    print(f"wrote {count} files under {root}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_grid(args, coverage=False)
        if args.command == "coverage":
            return _cmd_grid(args, coverage=True)
        if args.command == "eval-recon":
            return _cmd_eval(args)
        return _cmd_gen(args)
    except (OSError, TensorFormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
