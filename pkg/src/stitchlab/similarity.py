"""Representational similarity indices on activation matrices.

All inputs are ``(samples, features)`` matrices. CCA-type indices whiten
each side through the SVD of the centered matrix, which is the same as using
the eigendecomposition of its covariance; directions whose singular value
falls below ``rank_tol * s_max`` are discarded rather than regularized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import linalg
from .errors import DegenerateInput, ShapeMismatch, ZeroNorm

INDEX_NAMES = ("KA", "CKA", "RV", "R2LR", "CCA", "SVCCA")
_SLACK = 1e-9


@dataclass
class SimilarityReport:
    index_name: str
    value: float
    n_samples: int
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.index_name not in INDEX_NAMES:
            raise ValueError(f"unknown index {self.index_name!r}")
        if not np.isfinite(self.value):
            raise ValueError("similarity value must be finite")
        if self.index_name in ("KA", "CKA", "RV", "CCA", "SVCCA") and not (
            -_SLACK <= self.value <= 1 + _SLACK
        ):
            raise ValueError(f"{self.index_name}={self.value} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(
            {"index": self.index_name, "value": float(self.value), "n": int(self.n_samples), "meta": self.meta},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "SimilarityReport":
        d = json.loads(line)
        return cls(d["index"], float(d["value"]), int(d["n"]), dict(d.get("meta", {})))


def _same_rows(x, y, name):
    x = linalg.as_matrix(x, "x")
    y = linalg.as_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"{name}: row counts differ ({x.shape[0]} vs {y.shape[0]})")
    return x, y


def kernel_alignment(k, l) -> float:
    """Uncentered alignment <K, L>_F / (|K|_F |L|_F)."""
    k = linalg.as_matrix(k, "k")
    l = linalg.as_matrix(l, "l")
    if k.shape != l.shape:
        raise ShapeMismatch(f"kernel_alignment: {k.shape} vs {l.shape}")
    nk, nl = np.linalg.norm(k), np.linalg.norm(l)
    if nk == 0 or nl == 0:
        raise ZeroNorm("kernel_alignment: Gram matrix has zero norm")
    return linalg.frobenius_inner(k, l) / (nk * nl)


def center_gram(k) -> np.ndarray:
    """Double centering ``C K C``."""
    k = linalg.as_matrix(k, "k")
    k = k - k.mean(axis=0, keepdims=True)
    return k - k.mean(axis=1, keepdims=True)


def cka(k, l) -> float:
    """Centered kernel alignment of two Gram matrices."""
    kc, lc = center_gram(k), center_gram(l)
    scale_k = max(1.0, np.abs(k).max())
    scale_l = max(1.0, np.abs(l).max())
    if np.linalg.norm(kc) <= 1e-12 * scale_k or np.linalg.norm(lc) <= 1e-12 * scale_l:
        raise ZeroNorm("cka: centered Gram matrix vanishes (constant representation)")
    return kernel_alignment(kc, lc)


def rv(x, y) -> float:
    """Linear CKA (RV coefficient) computed in feature space.

    ``|X^T Y|_F^2 / (|X^T X|_F |Y^T Y|_F)`` on column-centered ``X`` and ``Y``;
    the feature counts of ``x`` and ``y`` may differ.
    """
    x, y = _same_rows(x, y, "rv")
    if x.shape[0] < 2:
        raise DegenerateInput("rv needs at least two samples")
    xc, yc = linalg.center_columns(x), linalg.center_columns(y)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx <= 1e-24 * max(1.0, np.abs(x).max()) ** 2 or yy <= 1e-24 * max(1.0, np.abs(y).max()) ** 2:
        raise ZeroNorm("rv: constant representation")
    return float(np.linalg.norm(xc.T @ yc) ** 2 / (xx * yy))


def with_bias_column(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.hstack([a, np.ones((a.shape[0], 1))])


def r2_lr(a, b, with_bias: bool = False) -> float:
    """Coefficient of determination of the least-squares fit ``A^+ B``.

    The denominator is the uncentered ``|B|_F^2``; values can be negative only
    in the degenerate no-bias case.
    """
    a, b = _same_rows(a, b, "r2_lr")
    nb = np.linalg.norm(b)
    if nb == 0:
        raise ZeroNorm("r2_lr: target has zero norm")
    if with_bias:
        a = with_bias_column(a)
    m = linalg.pseudoinverse(a) @ b
    return 1.0 - np.linalg.norm(a @ m - b) ** 2 / nb**2


def _whitened_basis(x, rank_tol):
    u, s, _ = linalg.svd(linalg.center_columns(x))
    return u[:, : linalg.numerical_rank(s, rank_tol)]


def canonical_correlations(x, y, rank_tol: float = linalg.DEFAULT_RANK_TOL) -> np.ndarray:
    x, y = _same_rows(x, y, "cca")
    n = x.shape[0]
    if n <= max(x.shape[1], y.shape[1]):
        raise DegenerateInput(f"cca needs more samples than features (n={n})")
    ux = _whitened_basis(x, rank_tol)
    uy = _whitened_basis(y, rank_tol)
    if ux.shape[1] == 0 or uy.shape[1] == 0:
        raise DegenerateInput("cca: a representation is constant")
    rho = linalg.svd(ux.T @ uy).S
    return np.clip(rho, 0.0, 1.0)


def cca_mean(x, y, rank_tol: float = linalg.DEFAULT_RANK_TOL) -> float:
    """Mean canonical correlation over ``min(rank X, rank Y)`` directions."""
    return float(canonical_correlations(x, y, rank_tol).mean())


def svd_truncate(x, var_fraction: float) -> np.ndarray:
    """Coordinates of centered ``x`` in its fewest leading singular directions
    that explain at least ``var_fraction`` of the total variance."""
    if not 0 < var_fraction <= 1:
        raise ValueError("var_fraction must lie in (0, 1]")
    u, s, _ = linalg.svd(linalg.center_columns(x))
    energy = s**2
    total = energy.sum()
    if total == 0:
        raise DegenerateInput("svcca: a representation is constant")
    if var_fraction == 1:
        keep = linalg.numerical_rank(s)
    else:
        keep = int(np.searchsorted(np.cumsum(energy) / total, var_fraction - 1e-15) + 1)
        keep = min(keep, linalg.numerical_rank(s))
    return u[:, :keep] * s[:keep]


def svcca(x, y, var_fraction: float = 0.99) -> float:
    x, y = _same_rows(x, y, "svcca")
    if x.shape[0] <= max(x.shape[1], y.shape[1]):
        raise DegenerateInput("svcca needs more samples than features")
    return cca_mean(svd_truncate(x, var_fraction), svd_truncate(y, var_fraction))


def compute(index_name: str, x, y, **kwargs) -> SimilarityReport:
    """Evaluate one index on two activation matrices and wrap it in a report."""
    meta: dict[str, Any] = {}
    if index_name == "CKA":
        value = cka(linalg.gram(x), linalg.gram(y))
    elif index_name == "KA":
        value = kernel_alignment(linalg.gram(x), linalg.gram(y))
    elif index_name == "RV":
        value = rv(x, y)
    elif index_name == "R2LR":
        meta["with_bias"] = bool(kwargs.get("with_bias", False))
        value = r2_lr(x, y, with_bias=meta["with_bias"])
    elif index_name == "CCA":
        value = cca_mean(x, y)
    elif index_name == "SVCCA":
        meta["var_fraction"] = float(kwargs.get("var_fraction", 0.99))
        value = svcca(x, y, meta["var_fraction"])
    else:
        raise ValueError(f"unknown index {index_name!r}")
    return SimilarityReport(index_name, float(value), int(np.shape(x)[0]), meta)
