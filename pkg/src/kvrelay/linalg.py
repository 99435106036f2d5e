"""Dense linear-algebra kernels for selection and backfill.

All float64, all deterministic. Orthonormal bases come from Householder QR
with greedy column pivoting (rank truncated by pivot-norm threshold);
singular values and right singular vectors come from a one-sided Jacobi
sweep. Shared conventions:

  * basis vectors are sign-fixed so their first entry above 1e-12 in
    magnitude is non-negative;
  * numeric rank counts singular values above ``tol * sigma_max`` with
    ``tol = max(rows, cols) * machine_eps`` by default;
  * top-k breaks score ties toward the smaller global position and
    returns positions sorted ascending.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput
from .kv import as_index_list

_EPS = float(np.finfo(np.float64).eps)
_SIGN_TOL = 1e-12
_ORTHO_TOL = 1e-10


def _default_rank_tol(shape: tuple[int, int]) -> float:
    return max(shape) * _EPS


def _fix_column_signs(q: np.ndarray) -> np.ndarray:
    """Flip columns so the first entry with |x| > 1e-12 is non-negative."""
    q = np.array(q)
    for j in range(q.shape[1]):
        nz = np.nonzero(np.abs(q[:, j]) > _SIGN_TOL)[0]
        if nz.size and q[nz[0], j] < 0:
            q[:, j] = -q[:, j]
    return q


def _householder_vector(x: np.ndarray) -> tuple[np.ndarray, float]:
    # Essential-part reflector: (I - beta v v^T) x lands on a multiple of e1,
    # with v[0] normalized to 1. beta == 0 means x is already aligned.
    v = x.copy()
    v[0] = 1.0
    sigma = float(x[1:] @ x[1:])
    if sigma == 0.0:
        return v, 0.0
    mu = math.sqrt(x[0] * x[0] + sigma)
    v0 = x[0] - mu if x[0] <= 0 else -sigma / (x[0] + mu)
    beta = 2.0 * v0 * v0 / (sigma + v0 * v0)
    v[1:] = x[1:] / v0
    return v, beta


def _pivoted_qr_basis(a: np.ndarray, rel_tol: float) -> tuple[np.ndarray, int]:
    """Orthonormal basis (columns) for the column space of ``a``.

    Greedy column pivoting: each step reflects the trailing column of
    largest norm; the sweep stops once that norm falls to ``rel_tol``
    relative to the first pivot, which is the rank truncation.
    """
    a = np.array(a, dtype=np.float64)
    m, n = a.shape
    steps: list[tuple[int, np.ndarray, float]] = []
    scale = None
    for j in range(min(m, n)):
        norms = np.sqrt((a[j:, j:] ** 2).sum(axis=0))
        pick = int(np.argmax(norms))
        pivot = float(norms[pick])
        if scale is None:
            scale = pivot
        if pivot <= rel_tol * scale or pivot == 0.0:
            break
        if pick != 0:
            a[:, [j, j + pick]] = a[:, [j + pick, j]]
        v, beta = _householder_vector(a[j:, j].copy())
        if beta != 0.0:
            a[j:, j:] -= beta * np.outer(v, v @ a[j:, j:])
        steps.append((j, v, beta))
    rank = len(steps)
    q = np.eye(m, rank)
    for j, v, beta in reversed(steps):
        if beta != 0.0:
            q[j:, :] -= beta * np.outer(v, v @ q[j:, :])
    return q, rank


@dataclass(frozen=True)
class OrthoBasis:
    """Orthonormal columns spanning the row space of some matrix."""

    basis: np.ndarray  # (ambient_dim, rank)
    rank: int

    def __post_init__(self):
        basis = np.array(self.basis, dtype=np.float64)
        if basis.ndim != 2 or basis.shape[1] != self.rank:
            raise DimensionMismatch("basis must be (ambient_dim, rank)")
        gram_err = np.abs(basis.T @ basis - np.eye(self.rank)).max() if self.rank else 0.0
        if gram_err > _ORTHO_TOL:
            raise DimensionMismatch(f"basis columns are not orthonormal (err {gram_err:g})")
        basis.flags.writeable = False
        object.__setattr__(self, "basis", basis)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]


def orthonormal_basis(m, rel_tol: float | None = None) -> OrthoBasis:
    """Orthonormal basis Q (d x r) for the row space of ``m`` (K x d)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch("expected a 2-D matrix")
    k, d = m.shape
    if k == 0:
        raise EmptyInput("cannot build a basis from zero rows")
    if d == 0:
        raise DimensionMismatch("row dimension must be positive")
    if rel_tol is None:
        rel_tol = _default_rank_tol((k, d))
    q, rank = _pivoted_qr_basis(m.T, rel_tol)
    return OrthoBasis(basis=_fix_column_signs(q), rank=rank)


def project_out(x, basis: OrthoBasis) -> np.ndarray:
    """Residual of every row of ``x`` against the basis: x - (x Q) Q^T."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch("expected a 2-D matrix")
    if x.shape[1] != basis.ambient_dim:
        raise DimensionMismatch(
            f"rows have dim {x.shape[1]} but basis lives in dim {basis.ambient_dim}"
        )
    if basis.rank == 0:
        return x.copy()
    q = basis.basis
    return x - (x @ q) @ q.T


def _jacobi_right_vectors(a: np.ndarray, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Jacobi: returns (singular values desc, right vectors as columns)."""
    w = np.array(a, dtype=np.float64)
    n = w.shape[1]
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp = w[:, p]
                wq = w[:, q]
                app = float(wp @ wp)
                aqq = float(wq @ wq)
                apq = float(wp @ wq)
                if app == 0.0 or aqq == 0.0:
                    continue
                if abs(apq) <= 1e-15 * math.sqrt(app * aqq):
                    continue
                zeta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                w[:, p], w[:, q] = c * wp - s * wq, s * wp + c * wq
                v[:, p], v[:, q] = c * v[:, p] - s * v[:, q], s * v[:, p] + c * v[:, q]
                rotated = True
        if not rotated:
            break
    sigmas = np.sqrt((w * w).sum(axis=0))
    order = np.argsort(-sigmas, kind="stable")
    return sigmas[order], v[:, order]


@dataclass(frozen=True)
class PrincipalSubspace:
    """Top right-singular directions of a residual matrix, as rows."""

    rows: np.ndarray  # (p, ambient_dim)
    singular_values: tuple[float, ...]

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise DimensionMismatch("rows must be a (p, d) matrix")
        sig = tuple(float(s) for s in self.singular_values)
        if len(sig) != rows.shape[0]:
            raise DimensionMismatch("one singular value per subspace row")
        if any(s < 0 for s in sig) or any(a < b for a, b in zip(sig, sig[1:])):
            raise ValueError("singular values must be non-negative and non-increasing")
        p = rows.shape[0]
        gram_err = np.abs(rows @ rows.T - np.eye(p)).max() if p else 0.0
        if gram_err > _ORTHO_TOL:
            raise DimensionMismatch(f"subspace rows are not orthonormal (err {gram_err:g})")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "singular_values", sig)

    @property
    def subspace_rank(self) -> int:
        return self.rows.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.rows.shape[1]


def principal_subspace(r_mat, max_rank: int, rank_tol: float | None = None) -> PrincipalSubspace:
    """Top ``min(max_rank, numeric rank)`` right singular directions of ``r_mat``.

    Zero or empty input yields an empty subspace rather than an error.
    """
    if max_rank < 1:
        raise ValueError("max_rank must be at least 1")
    r_mat = np.asarray(r_mat, dtype=np.float64)
    if r_mat.ndim != 2:
        raise DimensionMismatch("expected a 2-D matrix")
    n, d = r_mat.shape
    if n == 0 or d == 0:
        return PrincipalSubspace(rows=np.zeros((0, d)), singular_values=())
    sigmas, vectors = _jacobi_right_vectors(r_mat)
    s_max = float(sigmas[0])
    if s_max == 0.0:
        return PrincipalSubspace(rows=np.zeros((0, d)), singular_values=())
    tol = _default_rank_tol((n, d)) if rank_tol is None else float(rank_tol)
    if tol < 0:
        raise ValueError("rank_tol must be non-negative")
    rank = int(np.count_nonzero(sigmas > tol * s_max))
    p = min(max_rank, rank)
    rows = _fix_column_signs(vectors[:, :p]).T
    return PrincipalSubspace(rows=rows, singular_values=tuple(float(s) for s in sigmas[:p]))


def numeric_rank(m, tol: float | None = None) -> int:
    """Count of singular values above ``tol * sigma_max``; 0 for zero input."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch("expected a 2-D matrix")
    if m.size == 0:
        return 0
    if tol is None:
        tol = _default_rank_tol(m.shape)
    if tol < 0:
        raise ValueError("tol must be non-negative")
    sigmas, _ = _jacobi_right_vectors(m)
    s_max = float(sigmas[0])
    if s_max == 0.0:
        return 0
    return int(np.count_nonzero(sigmas > tol * s_max))


def top_k_indices(scores, k: int, eligible) -> tuple[int, ...]:
    """The ``min(k, |eligible|)`` highest-scoring positions, sorted ascending.

    Ties are broken deterministically toward the smaller global position;
    positions missing from ``scores`` count as 0.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    idx = as_index_list(eligible)
    ranked = sorted(idx, key=lambda pos: (-float(scores.get(pos, 0.0)), pos))
    return tuple(sorted(ranked[:k]))
