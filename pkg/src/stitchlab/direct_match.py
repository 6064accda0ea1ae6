"""Matching two activation matrices without a task signal.

Every solver takes ``A`` (model 1, ``rows x c1``) and ``B`` (model 2,
``rows x c2``) and returns a :class:`MatchSolution` with ``A @ m + bias ~ B``.
Bias handling follows the usual convention of solving on an all-ones augmented
``A``; for the rank-constrained and L1 problems this is done by centering,
which leaves the intercept unpenalized and unconstrained.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import linalg
from .errors import MissingStitchedActs, NotConverged, ShapeMismatch
from .nnet.model import ActivationTensor, Model, flatten, to_torch, from_torch

SPARSITY_THRESHOLD = 1e-4
MAX_ROWS = 100_000
TRANSFORM_CLASSES = ("General", "Orthogonal", "RankK", "SparseL1", "Weighted")


@dataclass
class MatchSolution:
    m: np.ndarray
    bias: np.ndarray
    transform_class: str = "General"
    residual_fro: float = 0.0
    rank: int = 0
    sparsity: float = 0.0
    params: dict = field(default_factory=dict)

    def apply(self, a) -> np.ndarray:
        return np.asarray(a, dtype=np.float64) @ self.m + self.bias

    def sidecar(self) -> dict:
        return {
            "class": self.transform_class,
            "alpha": self.params.get("alpha"),
            "k": self.params.get("k"),
            "rank": int(self.rank),
            "residual_fro": float(self.residual_fro),
            "sparsity": float(self.sparsity),
            "bias": [float(v) for v in self.bias],
            "params": {k: v for k, v in self.params.items() if k not in ("alpha", "k", "objective_trace")},
        }


def sparsity_of(m, threshold: float = SPARSITY_THRESHOLD) -> float:
    m = np.asarray(m)
    return float(np.mean(np.abs(m) < threshold)) if m.size else 0.0


def matrix_rank(m) -> int:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0 or not np.any(m):
        return 0
    return linalg.numerical_rank(linalg.svd(m).S, 1e-10)


def _finish(a, b, m, bias, cls, **params) -> MatchSolution:
    resid = float(np.linalg.norm(a @ m + bias - b))
    return MatchSolution(m, bias, cls, resid, matrix_rank(m), sparsity_of(m), params)


def save_solution(path, sol: MatchSolution, extra: dict | None = None) -> None:
    """Write ``<path>.csv`` (the matrix) and ``<path>.json`` (metadata sidecar)."""
    path = Path(path)
    linalg.save_csv(path.with_suffix(".csv"), sol.m)
    meta = sol.sidecar()
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_solution(path) -> tuple[MatchSolution, dict]:
    path = Path(path)
    m = linalg.load_csv(path.with_suffix(".csv"))
    meta = json.loads(path.with_suffix(".json").read_text())
    params = dict(meta.get("params", {}))
    for key in ("alpha", "k"):
        if meta.get(key) is not None:
            params[key] = meta[key]
    sol = MatchSolution(m, np.asarray(meta["bias"], dtype=np.float64), meta["class"],
                        float(meta["residual_fro"]), int(meta["rank"]), float(meta["sparsity"]), params)
    return sol, meta


def _prepare(a, b, max_rows, seed):
    a = linalg.as_matrix(a, "A")
    b = linalg.as_matrix(b, "B")
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"A has {a.shape[0]} rows, B has {b.shape[0]}")
    if max_rows is not None and a.shape[0] > max_rows:
        idx = np.sort(np.random.default_rng(seed).choice(a.shape[0], size=max_rows, replace=False))
        a, b = a[idx], b[idx]
    return a, b


def ls_match(a, b, with_bias: bool = True, max_rows: int | None = MAX_ROWS, seed: int = 0) -> MatchSolution:
    """Minimum-norm least-squares map ``A^+ B`` (bias via an appended ones column)."""
    a, b = _prepare(a, b, max_rows, seed)
    if with_bias:
        aug = np.hstack([a, np.ones((a.shape[0], 1))])
        sol = linalg.pseudoinverse(aug) @ b
        m, bias = sol[:-1], sol[-1]
    else:
        m, bias = linalg.pseudoinverse(a) @ b, np.zeros(b.shape[1])
    return _finish(a, b, m, bias, "General", with_bias=with_bias)


def procrustes_match(a, b, max_rows: int | None = MAX_ROWS, seed: int = 0) -> MatchSolution:
    """Best orthogonal map: ``U V^T`` from the SVD of ``A^T B``."""
    a, b = _prepare(a, b, max_rows, seed)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch("Procrustes needs equal channel counts")
    u, _, v = linalg.svd(a.T @ b)
    return _finish(a, b, u @ v.T, np.zeros(b.shape[1]), "Orthogonal")


def rrr_match(a, b, k: int, with_bias: bool = True, max_rows: int | None = MAX_ROWS, seed: int = 0) -> MatchSolution:
    """Reduced-rank regression ``M_LS V_k V_k^T`` with ``V`` from the SVD of ``A M_LS``."""
    a, b = _prepare(a, b, max_rows, seed)
    if not 0 <= k <= b.shape[1]:
        raise ShapeMismatch(f"rank {k} outside [0, {b.shape[1]}]")
    if with_bias:
        mean_a, mean_b = a.mean(axis=0), b.mean(axis=0)
        ac, bc = a - mean_a, b - mean_b
    else:
        ac, bc = a, b
    m_ls = linalg.pseudoinverse(ac) @ bc
    _, _, v = linalg.svd(ac @ m_ls)
    vk = v[:, :k]
    m = m_ls @ vk @ vk.T
    bias = mean_b - mean_a @ m if with_bias else np.zeros(b.shape[1])
    return _finish(a, b, m, bias, "RankK", k=int(k), with_bias=with_bias)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_alpha_max(a, b, with_bias: bool = True) -> float:
    """Smallest ``alpha`` with an all-zero solution: ``max |A^T B| / n``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if with_bias:
        a, b = a - a.mean(axis=0), b - b.mean(axis=0)
    return float(np.abs(a.T @ b).max() / a.shape[0])


def lasso_match(a, b, alpha: float, max_iter: int = 10_000, tol: float = 1e-8, with_bias: bool = True,
                max_rows: int | None = MAX_ROWS, seed: int = 0, warm_start: np.ndarray | None = None) -> MatchSolution:
    """L1-regularized least squares by cyclic coordinate descent.

    Minimizes ``(1/(2n)) |A M - B|_F^2 + alpha |M|_1``. Output columns are
    independent problems, so each coordinate update is applied to all of them
    at once. Stops when the largest coefficient change in a sweep drops below
    ``tol``; otherwise warns with :class:`NotConverged` and returns the last iterate.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    a, b = _prepare(a, b, max_rows, seed)
    n = a.shape[0]
    if with_bias:
        mean_a, mean_b = a.mean(axis=0), b.mean(axis=0)
        ac, bc = a - mean_a, b - mean_b
    else:
        ac, bc = a, b
    g = ac.T @ ac / n
    c = ac.T @ bc / n
    bb = float(np.sum(bc * bc) / n)
    m = np.zeros((a.shape[1], b.shape[1])) if warm_start is None else np.array(warm_start, dtype=np.float64)
    diag = np.diag(g).copy()

    def objective(m):
        return 0.5 * (np.sum(m * (g @ m)) - 2 * np.sum(m * c) + bb) + alpha * np.abs(m).sum()

    trace = [objective(m)]
    converged = False
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        delta = 0.0
        for i in range(a.shape[1]):
            if diag[i] == 0:
                new = np.zeros(b.shape[1])
            else:
                rho = c[i] - g[i] @ m + diag[i] * m[i]
                new = soft_threshold(rho, alpha) / diag[i]
            delta = max(delta, float(np.abs(new - m[i]).max()))
            m[i] = new
        trace.append(objective(m))
        if delta < tol:
            converged = True
            break
    bias = mean_b - mean_a @ m if with_bias else np.zeros(b.shape[1])
    sol = _finish(a, b, m, bias, "SparseL1", alpha=float(alpha), with_bias=with_bias, sweeps=sweeps,
                  converged=converged, objective=trace[-1], objective_trace=trace)
    if not converged:
        warnings.warn(NotConverged(f"lasso stopped after {max_iter} sweeps", sol), stacklevel=2)
    return sol


# weighted matching

_SCHEME_RE = re.compile(r"^(\w+)(?:\(([-+0-9.eE]+)\))?$")
WEIGHT_KINDS = ("Ones", "GradSumOutput", "GradArgmaxOutput", "GradSumLogits", "GradArgmaxLogits",
                "ActivationPower", "HardThreshold", "SoftThreshold", "SoftThresholdZero")


@dataclass(frozen=True)
class WeightScheme:
    kind: str
    param: float | None = None  # exponent or percentile
    normalization: str = "MinMax"  # MinMax | MaxScaled | None

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight scheme {self.kind!r}")
        if self.kind == "ActivationPower" and not (self.param is not None and self.param >= 1):
            raise ValueError("ActivationPower needs an exponent >= 1")
        if self.kind in ("HardThreshold", "SoftThreshold") and not (self.param is not None and 0 <= self.param < 100):
            raise ValueError("threshold schemes need a percentile in [0, 100)")
        if self.normalization not in ("MinMax", "MaxScaled", "None"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def parse(cls, text: str, normalization: str = "MinMax") -> "WeightScheme":
        match = _SCHEME_RE.match(text.strip())
        if not match:
            raise ValueError(f"cannot parse weight scheme {text!r}")
        kind, param = match.groups()
        return cls(kind, float(param) if param is not None else None, normalization)

    def __str__(self) -> str:
        return self.kind if self.param is None else f"{self.kind}({self.param:g})"

    @property
    def needs_stitched(self) -> bool:
        return self.kind in ("SoftThreshold", "SoftThresholdZero")


def normalize_weights(wu: np.ndarray, normalization: str = "MinMax") -> np.ndarray:
    if normalization == "None":
        return wu
    lo, hi = float(wu.min()), float(wu.max())
    if normalization == "MinMax":
        return (wu - lo) / (hi - lo) if hi > lo else np.ones_like(wu)
    # MaxScaled: shift by the minimum, divide by the maximum
    return (wu - lo) / hi if hi != 0 else np.ones_like(wu)


def _task_gradients(model2: Model, layer: str, acts: np.ndarray, kind: str, batch: int = 500) -> np.ndarray:
    out = []
    dtype = model2.dtype
    for i in range(0, acts.shape[0], batch):
        x = to_torch(acts[i:i + batch], dtype).requires_grad_(True)
        logits = model2.head(x, layer)
        g = logits if kind.endswith("Logits") else torch.softmax(logits, dim=1)
        if "Argmax" in kind:
            pick = torch.argmax(g.detach(), dim=1, keepdim=True)
            f = g.gather(1, pick).sum()
        else:
            f = g.sum()
        (grad,) = torch.autograd.grad(f, x)
        out.append(from_torch(grad))
    return np.concatenate(out)


def build_weights(scheme: WeightScheme, model2: Model | None, layer: str | None, acts_b,
                  stitched_acts=None) -> np.ndarray:
    """Weight matrix with the shape of the flattened target activations."""
    data = acts_b.data if isinstance(acts_b, ActivationTensor) else np.asarray(acts_b)
    b = flatten(data)
    kind = scheme.kind
    if kind == "Ones":
        return np.ones_like(b)
    if kind.startswith("Grad"):
        if model2 is None or layer is None:
            raise ValueError("gradient schemes need model 2 and the matched layer")
        wu = flatten(_task_gradients(model2, layer, data, kind))
        return normalize_weights(wu, scheme.normalization)
    if kind == "ActivationPower":
        return normalize_weights(b, scheme.normalization) ** scheme.param
    if kind == "HardThreshold":
        return (b > np.percentile(b, scheme.param)).astype(np.float64)
    if stitched_acts is None:
        raise MissingStitchedActs(f"{kind} weighting needs the current stitched activations A M")
    threshold = 0.0 if kind == "SoftThresholdZero" else float(np.percentile(b, scheme.param))
    am = np.asarray(stitched_acts, dtype=np.float64).reshape(b.shape)
    return 1.0 - ((b < threshold) & (am < threshold)).astype(np.float64)


def weight_refresher(scheme: WeightScheme, model2, layer, acts_b) -> Callable[[np.ndarray], np.ndarray] | np.ndarray:
    """Static weights, or a callable ``A M -> W`` for schemes that depend on the iterate."""
    if scheme.needs_stitched:
        return lambda am: build_weights(scheme, model2, layer, acts_b, stitched_acts=am)
    return build_weights(scheme, model2, layer, acts_b)


def wms_match(a, b, w, lr: float = 1e-2, epochs: int = 200, batch: int = 64, seed: int = 0,
              init: str | MatchSolution = "ls", with_bias: bool = True, max_rows: int | None = MAX_ROWS,
              scheme: str = "") -> MatchSolution:
    """Weighted least squares ``min |(A M + bias - B) o W|_F`` with minibatch Adam.

    ``w`` is a fixed matrix shaped like ``b`` or a callable mapping the current
    ``A M + bias`` to a matrix; callables are re-evaluated at every epoch.
    Returns the iterate with the smallest full-data objective.
    """
    a, b = _prepare(a, b, None, seed)
    dynamic = callable(w)
    if not dynamic:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != b.shape:
            raise ShapeMismatch(f"weights {w.shape} do not match targets {b.shape}")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
    rows_idx = None
    if max_rows is not None and a.shape[0] > max_rows:
        rows_idx = np.sort(np.random.default_rng(seed).choice(a.shape[0], size=max_rows, replace=False))
        a, b = a[rows_idx], b[rows_idx]
        if not dynamic:
            w = w[rows_idx]

    if isinstance(init, MatchSolution):
        m0, b0 = init.m, init.bias
    elif init == "ls":
        start = ls_match(a, b, with_bias=with_bias, max_rows=None)
        m0, b0 = start.m, start.bias
    elif init == "zeros":
        m0, b0 = np.zeros((a.shape[1], b.shape[1])), np.zeros(b.shape[1])
    else:
        raise ValueError(f"unknown init {init!r}")

    ta = torch.from_numpy(a)
    tb = torch.from_numpy(b)
    m = torch.tensor(m0, dtype=torch.float64, requires_grad=True)
    bias = torch.tensor(b0, dtype=torch.float64, requires_grad=with_bias)
    params = [m, bias] if with_bias else [m]
    opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(seed)

    def current_weights():
        if not dynamic:
            return torch.from_numpy(w)
        with torch.no_grad():
            am = (ta @ m + bias).numpy()
        return torch.from_numpy(np.asarray(w(am), dtype=np.float64))

    def full_objective(tw):
        with torch.no_grad():
            return float(torch.linalg.norm((ta @ m + bias - tb) * tw))

    tw = current_weights()
    best = (full_objective(tw), m.detach().clone(), bias.detach().clone())
    trace = [best[0]]
    n = a.shape[0]
    for _ in range(epochs):
        if dynamic:
            tw = current_weights()
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch):
            idx = perm[i:i + batch]
            resid = (ta[idx] @ m + bias - tb[idx]) * tw[idx]
            loss = (resid * resid).sum(dim=1).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        obj = full_objective(tw)
        trace.append(obj)
        if obj < best[0]:
            best = (obj, m.detach().clone(), bias.detach().clone())
    m_best = best[1].numpy()
    b_best = best[2].numpy() if with_bias else np.zeros(b.shape[1])
    return _finish(a, b, m_best, b_best, "Weighted", scheme=str(scheme), objective=best[0],
                   objective_trace=trace, with_bias=with_bias)
