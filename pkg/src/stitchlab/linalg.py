"""Dense float64 linear algebra used by the solvers and similarity indices.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64. The SVD is a
one-sided (Hestenes) Jacobi iteration with a fixed round-robin pair order, so
results are deterministic and do not depend on LAPACK's SVD driver. Tall
inputs are reduced to a square triangular factor with a Householder QR first.
"""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InvalidInput, ShapeMismatch

DEFAULT_RANK_TOL = 1e-12
_MAX_SWEEPS = 80


class SvdResult(NamedTuple):
    U: np.ndarray  # m x r, orthonormal columns
    S: np.ndarray  # r, descending
    V: np.ndarray  # n x r, orthonormal columns


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite, C-contiguous float64 2-D array."""
    m = np.array(x, dtype=np.float64, copy=True)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return np.ascontiguousarray(m)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Circle-method schedule: n-1 (or n) rounds of disjoint column pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        p, q = [], []
        for i in range(k // 2):
            a, b = players[i], players[k - 1 - i]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_square(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = a.shape[1]
    w = a.copy()
    v = np.eye(n)
    if n == 1:
        return w, np.linalg.norm(w, axis=0), v
    tol = n * np.finfo(np.float64).eps
    schedule = _round_robin(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p, q in schedule:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha) * np.sqrt(beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * gamma)  # inf gives t = 0
                sign = np.where(zeta >= 0, 1.0, -1.0)
                t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    sv = np.linalg.norm(w, axis=0)
    return w, sv, v


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not in ``filled`` by an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(filled)]
    e = 0
    for j in np.flatnonzero(~filled):
        while True:
            cand = np.zeros(m)
            cand[e % m] = 1.0
            e += 1
            for b in basis:
                cand -= (b @ cand) * b
            for b in basis:  # second pass for stability
                cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > 0.5:
                break
        u[:, j] = cand / nrm
        basis.append(u[:, j])
    return u


def svd(m) -> SvdResult:
    """Thin singular value decomposition ``m = U @ diag(S) @ V.T``.

    ``r = min(rows, cols)``; singular values are sorted in descending order
    and exact zero singular values get an orthonormal completion in ``U``.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows < cols:
        u, s, v = svd(a.T)
        return SvdResult(v, s, u)
    if rows > cols:
        q, r = np.linalg.qr(a, mode="reduced")
    else:
        q, r = None, a
    w, s, v = _jacobi_square(r)
    order = np.argsort(-s, kind="stable")
    s, w, v = s[order], w[:, order], v[:, order]
    filled = s > np.finfo(np.float64).tiny
    u = np.zeros_like(w)
    u[:, filled] = w[:, filled] / s[filled]
    if not filled.all():
        u = _complete_basis(u, filled)
        s = np.where(filled, s, 0.0)
    if q is not None:
        u = q @ u
    return SvdResult(u, s, v)


def numerical_rank(s: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rank_tol * s[0]))


def pseudoinverse(m, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse; singular values below ``rank_tol * s_max`` are dropped."""
    if not rank_tol > 0:
        raise InvalidInput("rank_tol must be positive")
    a = as_matrix(m)
    u, s, v = svd(a)
    k = numerical_rank(s, rank_tol)
    if k == 0:
        return np.zeros((a.shape[1], a.shape[0]))
    return (v[:, :k] / s[:k]) @ u[:, :k].T


def center_columns(x) -> np.ndarray:
    """Subtract each column's mean (``C @ x`` with the centering matrix ``C``)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise InvalidInput("center_columns needs a 2-D matrix with at least one row")
    return a - a.mean(axis=0, keepdims=True)


def gram(x) -> np.ndarray:
    """Linear-kernel Gram matrix ``x @ x.T``."""
    a = as_matrix(x)
    return a @ a.T


def frobenius_inner(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"frobenius_inner: {a.shape} vs {b.shape}")
    return float(np.einsum("ij,ij->", a, b))


def save_csv(path, m) -> None:
    """Write a matrix as headerless comma-separated decimals (round-trips exactly)."""
    a = np.atleast_2d(np.asarray(m, dtype=np.float64))
    np.savetxt(Path(path), a, delimiter=",", fmt="%.17g")


def load_csv(path) -> np.ndarray:
    return np.loadtxt(Path(path), delimiter=",", dtype=np.float64, ndmin=2)
