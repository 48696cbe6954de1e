"""Dense tensor kernels: unfolding, mode products, truncated SVD, subspace distances.

Tensors are plain C-ordered ``numpy.ndarray`` objects with at least two modes.
Modes are 0-based throughout the package.

The mode-``j`` unfolding moves axis ``j`` to the front and flattens the rest in
C order, so the remaining indices vary with the last one fastest.  Under this
convention the Tucker identity reads::

    unfold(G x_0 U_0 ... x_{J-1} U_{J-1}, j) = U_j unfold(G, j) kron(U_0, .., U_{j-1}, U_{j+1}, .., U_{J-1}).T

with ``numpy.kron`` ordering (first factor slowest).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

DTPT_MAGIC = b"DTPT"
DTPT_VERSION = 1


class TensorFormatError(ValueError):
    """Raised when a DTPT1 byte stream is malformed."""


def _check_mode(ndim: int, j: int) -> None:
    if not 0 <= j < ndim:
        raise IndexError(f"mode {j} out of range for a {ndim}-mode tensor")


def matricize(tensor: np.ndarray, j: int) -> np.ndarray:
    """Mode-``j`` unfolding, shape ``(p_j, prod(p) / p_j)``."""
    tensor = np.asarray(tensor)
    _check_mode(tensor.ndim, j)
    return np.moveaxis(tensor, j, 0).reshape(tensor.shape[j], -1)


def tensorize(matrix: np.ndarray, dims: Sequence[int], j: int) -> np.ndarray:
    """Inverse of :func:`matricize`."""
    dims = tuple(int(d) for d in dims)
    _check_mode(len(dims), j)
    matrix = np.asarray(matrix)
    rest = int(np.prod(dims)) // dims[j] if dims[j] else 0
    if matrix.shape != (dims[j], rest):
        raise ValueError(f"matrix of shape {matrix.shape} cannot be folded into {dims} along mode {j}")
    moved = (dims[j],) + dims[:j] + dims[j + 1:]
    return np.ascontiguousarray(np.moveaxis(matrix.reshape(moved), 0, j))


def mode_product(tensor: np.ndarray, matrix: np.ndarray, j: int) -> np.ndarray:
    """Mode-``j`` product ``T x_j M``: contracts mode ``j`` of ``T`` with the columns of ``M``."""
    tensor = np.asarray(tensor)
    matrix = np.asarray(matrix)
    _check_mode(tensor.ndim, j)
    if matrix.ndim != 2 or matrix.shape[1] != tensor.shape[j]:
        raise ValueError(
            f"matrix of shape {matrix.shape} does not match mode {j} of size {tensor.shape[j]}"
        )
    out = np.tensordot(matrix, tensor, axes=(1, j))
    return np.ascontiguousarray(np.moveaxis(out, 0, j))


def multi_mode_product(
    tensor: np.ndarray,
    matrices: Sequence[np.ndarray | None],
    skip: int | None = None,
    transpose: bool = False,
) -> np.ndarray:
    """Apply ``T x_k M_k`` for every mode ``k`` except ``skip``.

    Entries of ``matrices`` that are ``None`` are skipped as well.  With
    ``transpose=True`` each ``M_k.T`` is used, which is the projection
    ``T x_k U_k^T`` onto factor bases.
    """
    out = np.asarray(tensor)
    if len(matrices) != out.ndim:
        raise ValueError(f"need {out.ndim} matrices, got {len(matrices)}")
    for k, m in enumerate(matrices):
        if k == skip or m is None:
            continue
        out = mode_product(out, m.T if transpose else m, k)
    return out


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def kron_all(matrices: Sequence[np.ndarray]) -> np.ndarray:
    out = np.ones((1, 1))
    for m in matrices:
        out = np.kron(out, m)
    return out


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made nonnegative
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def svd_top_r(matrix: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``r`` left singular vectors and singular values of ``matrix``.

    Wide and square inputs go through a symmetric eigendecomposition of the
    Gram matrix ``M M^T``; tall inputs use LAPACK's SVD.  Only the column space
    of the returned basis is meaningful.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise ValueError("svd_top_r expects a matrix")
    rows, cols = m.shape
    if not 0 <= r <= min(rows, cols):
        raise ValueError(f"rank {r} out of range for a {rows}x{cols} matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if rows <= cols:
        gram = m @ m.T
        gram = 0.5 * (gram + gram.T)
        w, v = np.linalg.eigh(gram)
        order = np.argsort(-w, kind="stable")[:r]
        values = np.sqrt(np.clip(w[order], 0.0, None))
        vectors = v[:, order]
    else:
        u, s, _ = np.linalg.svd(m, full_matrices=False)
        vectors, values = u[:, :r], s[:r]
    return fix_signs(np.ascontiguousarray(vectors)), values


def singular_values(matrix: np.ndarray) -> np.ndarray:
    """All singular values in nonincreasing order."""
    m = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return np.linalg.svd(m, compute_uv=False)


def qr_orthonormalize(matrix: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis of ``Col(matrix)`` via reduced QR, with ``diag(R) > 0``."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[1] > m.shape[0]:
        raise ValueError(f"cannot orthonormalize a matrix of shape {m.shape}")
    q, r = np.linalg.qr(m)
    d = np.diag(r)
    if np.any(np.abs(d) < tol):
        raise np.linalg.LinAlgError("matrix is rank deficient")
    return np.ascontiguousarray(q * np.sign(d))


def orthonormality_error(basis: np.ndarray) -> float:
    basis = np.asarray(basis)
    return float(np.linalg.norm(basis.T @ basis - np.eye(basis.shape[1])))


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"basis shapes differ: {a.shape} vs {b.shape}")
    return a, b


def sin_theta(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius sin-theta distance ``sqrt(r - sum cos^2)`` between two subspaces.

    Evaluated as ``||(I - A A^T) B||_F``, which equals the principal-angle
    formula but keeps full relative accuracy when the subspaces nearly agree.
    """
    a, b = _check_pair(a, b)
    return float(np.linalg.norm(b - a @ (a.T @ b)))


def rho(a: np.ndarray, b: np.ndarray) -> float:
    """Projection distance ``||A A^T - B B^T||_F`` without forming ``p x p`` matrices."""
    a, b = _check_pair(a, b)
    ra = np.linalg.norm(b - a @ (a.T @ b))
    rb = np.linalg.norm(a - b @ (b.T @ a))
    return float(np.sqrt(ra * ra + rb * rb))


def projector(basis: np.ndarray) -> np.ndarray:
    basis = np.asarray(basis)
    return basis @ basis.T


# ---------------------------------------------------------------------------
# DTPT1 binary format: b"DTPT", u8 version, u8 J, J x u64 dims, float64 data, all little-endian
# ---------------------------------------------------------------------------

def to_dtpt_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=float)
    if not 1 <= array.ndim <= 255:
        raise ValueError("DTPT1 supports 1 to 255 modes")
    header = DTPT_MAGIC + struct.pack("<BB", DTPT_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f8").tobytes()


def from_dtpt_bytes(data: bytes) -> np.ndarray:
    if len(data) < 6 or data[:4] != DTPT_MAGIC:
        raise TensorFormatError("bad magic")
    version, ndim = struct.unpack_from("<BB", data, 4)
    if version != DTPT_VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if ndim < 1:
        raise TensorFormatError("tensor has no modes")
    offset = 6 + 8 * ndim
    if len(data) < offset:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", data, 6)
    count = int(np.prod(dims, dtype=np.uint64))
    if len(data) != offset + 8 * count:
        raise TensorFormatError(f"expected {count} values for dims {dims}, got {(len(data) - offset) / 8:g}")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
    return values.astype(float).reshape(dims)


def write_dtpt(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(to_dtpt_bytes(array))


def read_dtpt(path: str | Path) -> np.ndarray:
    try:
        return from_dtpt_bytes(Path(path).read_bytes())
    except TensorFormatError as exc:
        raise TensorFormatError(f"{path}: {exc}") from None
