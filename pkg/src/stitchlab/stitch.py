"""Stitching two frozen networks with a trainable per-position affine map.

A stitched network runs model 1 up to ``layer_l``, optionally max-pools the
activations down to model 2's spatial size, applies the stitcher at every
spatial position (1x1 convolution semantics) and finishes with model 2 from
``layer_m`` on. Only the stitcher is ever optimized; the host networks stay
frozen in inference mode.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import direct_match, linalg, similarity
from .errors import (BottleneckNotSupported, ConfigError, Diverged, NonDivisibleShapes, ShapeMismatch,
                     ZeroDenominator)
from .nnet.data import Dataset
from .nnet.model import EVAL_BATCH, ActivationTensor, Model, flatten, from_torch, to_torch

log = logging.getLogger(__name__)

SPARSITY_THRESHOLD = direct_match.SPARSITY_THRESHOLD
METRIC_ROWS = 20_000
TRACE_KEYS = ("epoch", "task_loss", "rel_acc", "cka", "r2lr", "cca", "svcca", "sparsity")


@dataclass
class StitchingLayer:
    """Affine map ``a @ matrix + bias`` applied to every spatial position.

    ``form="full"`` stores ``m`` (c1 x c2); ``form="bottleneck"`` stores the
    factors ``p`` (c1 x k) and ``q`` (k x c2) with ``matrix = p @ q``.
    """

    form: str
    bias: np.ndarray
    m: np.ndarray | None = None
    p: np.ndarray | None = None
    q: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.form == "full":
            if self.m is None:
                raise ShapeMismatch("full stitcher needs m")
            self.m = np.asarray(self.m, dtype=np.float64)
        elif self.form == "bottleneck":
            if self.p is None or self.q is None:
                raise ShapeMismatch("bottleneck stitcher needs p and q")
            self.p = np.asarray(self.p, dtype=np.float64)
            self.q = np.asarray(self.q, dtype=np.float64)
            if self.p.shape[1] != self.q.shape[0]:
                raise ShapeMismatch(f"factor shapes {self.p.shape} and {self.q.shape} do not chain")
        else:
            raise ValueError(f"unknown stitcher form {self.form!r}")
        if self.bias.shape[0] != self.c_out:
            raise ShapeMismatch(f"bias has {self.bias.shape[0]} entries, map outputs {self.c_out}")

    @classmethod
    def full(cls, m, bias=None) -> "StitchingLayer":
        m = np.asarray(m, dtype=np.float64)
        return cls("full", np.zeros(m.shape[1]) if bias is None else bias, m=m)

    @classmethod
    def bottleneck(cls, p, q, bias=None) -> "StitchingLayer":
        q = np.asarray(q, dtype=np.float64)
        return cls("bottleneck", np.zeros(q.shape[1]) if bias is None else bias, p=p, q=q)

    @property
    def matrix(self) -> np.ndarray:
        return self.m if self.form == "full" else self.p @ self.q

    @property
    def c_in(self) -> int:
        return (self.m if self.form == "full" else self.p).shape[0]

    @property
    def c_out(self) -> int:
        return (self.m if self.form == "full" else self.q).shape[1]

    @property
    def k(self) -> int:
        return self.p.shape[1] if self.form == "bottleneck" else min(self.m.shape)

    def apply(self, flat) -> np.ndarray:
        return np.asarray(flat, dtype=np.float64) @ self.matrix + self.bias

    def copy(self) -> "StitchingLayer":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class FrankensteinNetwork:
    model1: Model
    model2: Model
    layer_l: str
    layer_m: str
    stitcher: StitchingLayer | None = None
    adapter: tuple[int, int] | None = None  # target (w, h) of the max-pool adapter

    def __post_init__(self):
        w1, h1, c1 = self.model1.activation_shape(self.layer_l)
        w2, h2, c2 = self.model2.activation_shape(self.layer_m)
        if self.model1.spec.classes != self.model2.spec.classes:
            raise ShapeMismatch("models disagree on the class count")
        if (w1, h1) != (w2, h2):
            if w1 < w2 or h1 < h2:
                raise ShapeMismatch(f"cannot upsample {w1}x{h1} to {w2}x{h2}")
            if w1 % w2 or h1 % h2:
                raise NonDivisibleShapes(f"{w1}x{h1} is not a multiple of {w2}x{h2}")
            object.__setattr__(self, "adapter", (w2, h2))
        else:
            object.__setattr__(self, "adapter", None)
        if self.stitcher is not None and (self.stitcher.c_in, self.stitcher.c_out) != (c1, c2):
            raise ShapeMismatch(f"stitcher maps {self.stitcher.c_in}->{self.stitcher.c_out}, layers need {c1}->{c2}")

    @property
    def channels(self) -> tuple[int, int]:
        return self.model1.activation_shape(self.layer_l)[2], self.model2.activation_shape(self.layer_m)[2]

    @property
    def is_self_stitch(self) -> bool:
        return self.model1 is self.model2 and self.layer_l == self.layer_m

    def with_stitcher(self, stitcher: StitchingLayer) -> "FrankensteinNetwork":
        return replace(self, stitcher=stitcher)


def frankenstein(model1: Model, model2: Model, layer_l: str, layer_m: str | None = None,
                 stitcher: StitchingLayer | None = None) -> FrankensteinNetwork:
    return FrankensteinNetwork(model1, model2, layer_l, layer_l if layer_m is None else layer_m, stitcher)


# spatial adapter

def pool_adapter(acts, target_w: int, target_h: int) -> ActivationTensor:
    """Non-overlapping window max down to ``target_w x target_h``."""
    t = acts if isinstance(acts, ActivationTensor) else ActivationTensor(np.asarray(acts), "")
    n, w, h, c = t.data.shape
    if w < target_w or h < target_h or w % target_w or h % target_h:
        raise NonDivisibleShapes(f"cannot pool {w}x{h} to {target_w}x{target_h}")
    kw, kh = w // target_w, h // target_h
    pooled = t.data.reshape(n, target_w, kw, target_h, kh, c).max(axis=(2, 4))
    return ActivationTensor(pooled, t.layer, t.tap)


def _pool_torch(a: torch.Tensor, adapter) -> torch.Tensor:
    if adapter is None:
        return a
    kw, kh = a.shape[2] // adapter[0], a.shape[3] // adapter[1]
    return F.max_pool2d(a, (kw, kh))


# torch plumbing

def _apply_torch(a: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-position affine map on ``(n, c1, w, h)``."""
    return torch.einsum("ncwh,cd->ndwh", a, weight) + bias[None, :, None, None]


def _source_torch(f: FrankensteinNetwork, batch) -> torch.Tensor:
    x = batch.inputs if isinstance(batch, Dataset) else batch
    if isinstance(x, ActivationTensor):
        raise TypeError("pass raw inputs, not activations")
    x = to_torch(np.asarray(x), f.model1.dtype)
    with torch.no_grad():
        out = torch.cat([_pool_torch(f.model1.features(x[i:i + EVAL_BATCH], f.layer_l), f.adapter)
                         for i in range(0, x.shape[0], EVAL_BATCH)])
    return out.contiguous()


def _stitcher_tensors(s: StitchingLayer, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.as_tensor(s.matrix, dtype=dtype), torch.as_tensor(s.bias, dtype=dtype)


def stitched_logits(f: FrankensteinNetwork, batch) -> np.ndarray:
    if f.stitcher is None:
        raise ShapeMismatch("network has no stitcher")
    src = _source_torch(f, batch)
    w, b = _stitcher_tensors(f.stitcher, f.model2.dtype)
    logits = []
    with torch.no_grad():
        for i in range(0, src.shape[0], EVAL_BATCH):
            z = _apply_torch(src[i:i + EVAL_BATCH].to(w.dtype), w, b).contiguous()
            logits.append(f.model2.head(z, f.layer_m))
    return torch.cat(logits).numpy()


def stitched_forward(f: FrankensteinNetwork, batch) -> np.ndarray:
    """Class probabilities of ``T_M(S(R_L(x)))`` for a Dataset or ``(n, w, h, c)`` array."""
    z = stitched_logits(f, batch).astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def source_activations(f: FrankensteinNetwork, batch) -> ActivationTensor:
    """Model 1 activations at ``layer_l`` after the spatial adapter."""
    return ActivationTensor(from_torch(_source_torch(f, batch)), f.layer_l, f.model1.tap_of(f.layer_l))


# initialization

_INIT_RE = re.compile(r"^(LeastSquares|Random|Identity)(?:\(([-+0-9.eE]+)\))?$")


def parse_init(text: str) -> tuple[str, float | None]:
    match = _INIT_RE.match(text.strip())
    if not match:
        raise ConfigError(f"unknown init mode {text!r}")
    return match.group(1), None if match.group(2) is None else float(match.group(2))


def init_stitcher(mode: str, model1: Model, model2: Model, layer: str, data, layer_m: str | None = None,
                  form: str = "full", k: int | None = None, seed: int = 0) -> StitchingLayer:
    """Starting point for a stitcher between ``layer`` of model 1 and ``layer_m`` of model 2.

    ``LeastSquares`` solves ``ls_match(with_bias=True)`` on the training-split
    activations (``rrr_match`` for the bottleneck form). ``Random(scale)`` draws
    entries from ``Normal(0, scale**2)`` with a default scale of ``1/sqrt(c1)``.
    ``Identity`` needs equal channel counts.
    """
    f = frankenstein(model1, model2, layer, layer_m)
    c1, c2 = f.channels
    kind, scale = parse_init(mode)
    if form == "bottleneck":
        if k is None or not 1 <= k <= min(c1, c2):
            raise ConfigError(f"bottleneck rank k={k} outside [1, {min(c1, c2)}]")
    elif form != "full":
        raise ConfigError(f"unknown stitcher form {form!r}")

    if kind == "Identity":
        if c1 != c2:
            raise ConfigError(f"identity init needs c1 == c2, got {c1} and {c2}")
        eye = np.eye(c1)
        if form == "full":
            return StitchingLayer.full(eye)
        return StitchingLayer.bottleneck(eye[:, :k], eye[:k])

    if kind == "Random":
        rng = np.random.default_rng(seed)
        std = 1.0 / math.sqrt(c1) if scale is None else scale
        if form == "full":
            return StitchingLayer.full(rng.normal(0.0, std, size=(c1, c2)))
        return StitchingLayer.bottleneck(rng.normal(0.0, std, size=(c1, k)), rng.normal(0.0, std, size=(k, c2)))

    a, b = paired_activations(f, data)
    if form == "full":
        sol = direct_match.ls_match(a, b, with_bias=True)
        return StitchingLayer.full(sol.m, sol.bias)
    return bottleneck_from_rrr(a, b, k)


def bottleneck_from_rrr(a, b, k: int) -> StitchingLayer:
    """Factor the reduced-rank regression map as ``(M_LS V_k) @ V_k^T``."""
    a, b = direct_match._prepare(a, b, direct_match.MAX_ROWS, 0)
    sol = direct_match.rrr_match(a, b, k)
    ac, bc = a - a.mean(axis=0), b - b.mean(axis=0)
    m_ls = linalg.pseudoinverse(ac) @ bc
    vk = linalg.svd(ac @ m_ls).V[:, :k]
    return StitchingLayer.bottleneck(m_ls @ vk, vk.T, sol.bias)


def paired_activations(f: FrankensteinNetwork, data) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (model 1 after adapter, model 2) activation matrices on ``data``."""
    split = data if isinstance(data, StitchSplit) else prepare_split(f, data, target_acts=True)
    return split.flat_source(), split.flat_target()


# cached evaluation data

@dataclass
class StitchSplit:
    """Frozen-network quantities a stitcher needs on one data split."""

    source: torch.Tensor  # model 1 activations after adapter, torch layout
    target_probs: torch.Tensor  # model 2 outputs (soft labels)
    labels: torch.Tensor
    target_acts: torch.Tensor | None = None  # model 2 activations at layer_m

    def __len__(self) -> int:
        return self.source.shape[0]

    @property
    def model2_accuracy(self) -> float:
        return float((self.target_probs.argmax(dim=1) == self.labels).double().mean())

    def flat_source(self) -> np.ndarray:
        return flatten(from_torch(self.source))

    def flat_target(self) -> np.ndarray:
        return flatten(from_torch(self.target_acts))

    def subset(self, n: int) -> "StitchSplit":
        ta = None if self.target_acts is None else self.target_acts[:n]
        return StitchSplit(self.source[:n], self.target_probs[:n], self.labels[:n], ta)


def prepare_split(f: FrankensteinNetwork, data: Dataset, target_acts: bool = True) -> StitchSplit:
    src = _source_torch(f, data)
    x = to_torch(data.inputs, f.model2.dtype)
    with torch.no_grad():
        logits = torch.cat([f.model2.logits(x[i:i + EVAL_BATCH]) for i in range(0, x.shape[0], EVAL_BATCH)])
        acts = None
        if target_acts:
            acts = torch.cat([f.model2.features(x[i:i + EVAL_BATCH], f.layer_m)
                              for i in range(0, x.shape[0], EVAL_BATCH)])
    probs = torch.softmax(logits.double(), dim=1).to(f.model2.dtype)
    return StitchSplit(src, probs, torch.as_tensor(data.labels), acts)


def _as_split(f: FrankensteinNetwork, data, target_acts: bool) -> StitchSplit:
    if isinstance(data, StitchSplit):
        return data
    return prepare_split(f, data, target_acts)


# evaluation

def relative_accuracy(f: FrankensteinNetwork, data) -> float:
    """Stitched accuracy over model 2 accuracy on ``data``; can exceed 1."""
    split = _as_split(f, data, target_acts=False)
    acc2 = split.model2_accuracy
    if acc2 == 0:
        raise ZeroDenominator("model 2 has zero accuracy on this split")
    return evaluate(f, split)["accuracy"] / acc2


def _stitched_split_logits(f: FrankensteinNetwork, split: StitchSplit, w, b) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for i in range(0, len(split), EVAL_BATCH):
            z = _apply_torch(split.source[i:i + EVAL_BATCH], w, b).contiguous()
            out.append(f.model2.head(z, f.layer_m))
    return torch.cat(out)


def evaluate(f: FrankensteinNetwork, data, metrics: Sequence[str] = ()) -> dict:
    """Accuracy, relative accuracy, soft cross-entropy to model 2 and similarity indices."""
    split = _as_split(f, data, target_acts=bool(metrics))
    w, b = _stitcher_tensors(f.stitcher, f.model2.dtype)
    logits = _stitched_split_logits(f, split, w, b)
    # argmax on torch returns the first maximum as well
    acc = float((logits.argmax(dim=1) == split.labels).double().mean())
    acc2 = split.model2_accuracy
    ce = float(-(split.target_probs.double() * F.log_softmax(logits.double(), dim=1)).sum(dim=1).mean())
    out = {"accuracy": acc, "model2_accuracy": acc2, "rel_acc": acc / acc2 if acc2 else float("nan"), "cross_entropy": ce}
    if metrics:
        out.update(similarity_metrics(f.stitcher, split, metrics))
    return out


def similarity_metrics(s: StitchingLayer, split: StitchSplit, metrics: Sequence[str],
                       max_rows: int = METRIC_ROWS) -> dict:
    """Indices between transformed model 1 activations and model 2 activations."""
    a = split.flat_source()
    b = split.flat_target()
    if a.shape[0] > max_rows:
        idx = np.sort(np.random.default_rng(0).choice(a.shape[0], size=max_rows, replace=False))
        a, b = a[idx], b[idx]
    t = s.apply(a)
    out = {}
    for name in metrics:
        if name == "cka":
            out["cka"] = similarity.rv(t, b)
        elif name == "r2lr":
            out["r2lr"] = similarity.r2_lr(t, b, with_bias=True)
        elif name == "cca":
            out["cca"] = similarity.cca_mean(t, b)
        elif name == "svcca":
            out["svcca"] = similarity.svcca(t, b)
        else:
            raise ConfigError(f"unknown trace metric {name!r}")
    return out


# training

@dataclass(frozen=True)
class StitchTrainConfig:
    loss: str = "SoftCE_to_Model2"  # or "HardCE"
    init: str = "LeastSquares"  # LeastSquares | Random | Random(scale) | Identity
    form: str = "full"  # or "bottleneck"
    k: int | None = None
    lr: float = 1e-3
    lr_milestones: tuple = ()  # fractions of training where lr drops by lr_gamma
    lr_gamma: float = 0.1
    epochs: int = 30
    batch: int = 64
    l1_weight: float = 0.0
    l1_mode: str = "orthant"  # or "subgradient"
    cka_penalty_weight: float = 0.0
    seed: int = 0
    metrics: tuple = ()  # any of cka, r2lr, cca, svcca
    train_limit: int | None = None  # use only the first n training samples

    def __post_init__(self):
        if self.loss not in ("SoftCE_to_Model2", "HardCE"):
            raise ConfigError(f"unknown stitching loss {self.loss!r}")
        parse_init(self.init)
        if self.form not in ("full", "bottleneck"):
            raise ConfigError(f"unknown stitcher form {self.form!r}")
        if self.l1_weight < 0 or self.cka_penalty_weight < 0:
            raise ConfigError("penalty weights must be non-negative")
        if self.l1_mode not in ("orthant", "subgradient"):
            raise ConfigError(f"unknown l1 mode {self.l1_mode!r}")
        if self.epochs < 0 or self.batch < 1 or self.lr < 0:
            raise ConfigError("epochs >= 0, batch >= 1 and lr >= 0 required")
        object.__setattr__(self, "lr_milestones", tuple(self.lr_milestones))
        object.__setattr__(self, "metrics", tuple(self.metrics))

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= max(1, math.floor(frac * self.epochs)) for frac in self.lr_milestones)
        return self.lr * self.lr_gamma**drops


def torch_rv(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Differentiable linear CKA of row-aligned matrices."""
    x = x - x.mean(dim=0, keepdim=True)
    y = y - y.mean(dim=0, keepdim=True)
    xy = (x.T @ y).square().sum()
    return xy / ((x.T @ x).square().sum().sqrt() * (y.T @ y).square().sum().sqrt())


def _rows(t: torch.Tensor) -> torch.Tensor:
    return t.permute(0, 2, 3, 1).reshape(-1, t.shape[1])


def stitch_objective(model2: Model, layer_m: str, weight: torch.Tensor, bias: torch.Tensor, source: torch.Tensor,
                     targets: torch.Tensor, cfg: StitchTrainConfig, target_acts: torch.Tensor | None = None,
                     include_l1: bool = True) -> torch.Tensor:
    """Mean task loss on a batch plus the configured penalties.

    ``targets`` are model 2 probabilities for the soft loss and class labels for the hard loss.
    """
    z = _apply_torch(source, weight, bias)
    logits = model2.head(z, layer_m)
    if cfg.loss == "SoftCE_to_Model2":
        loss = -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()
    else:
        loss = F.cross_entropy(logits, targets)
    if cfg.cka_penalty_weight > 0:
        if target_acts is None:
            raise ConfigError("the CKA penalty needs model 2 activations")
        loss = loss + cfg.cka_penalty_weight * torch_rv(_rows(z), _rows(target_acts))
    if include_l1 and cfg.l1_weight > 0:
        loss = loss + cfg.l1_weight * weight.abs().sum()
    return loss


def _l1_pseudo_gradient(w: torch.Tensor, alpha: float) -> torch.Tensor:
    """Replace ``w.grad`` by the minimum-norm subgradient of ``loss + alpha |w|_1``.

    Returns the orthant each entry may move in during the step; entries that
    leave it are reset to zero afterwards, which is what makes exact zeros stick.
    """
    with torch.no_grad():
        g = w.grad
        sign = torch.sign(w)
        at_zero = sign == 0
        pg = torch.where(at_zero, torch.sign(g) * torch.clamp(g.abs() - alpha, min=0.0), g + alpha * sign)
        w.grad = pg
        return torch.where(at_zero, -torch.sign(pg), sign)


def _layer_from_params(form, params, dtype=np.float64) -> StitchingLayer:
    arrs = [p.detach().numpy().astype(dtype) for p in params]
    if form == "full":
        return StitchingLayer.full(arrs[0], arrs[1])
    return StitchingLayer.bottleneck(arrs[0], arrs[1], arrs[2])


def _validation_objective(f, split, s, cfg, task_loss) -> float:
    # the training objective evaluated on the validation split
    obj = task_loss
    if cfg.l1_weight > 0:
        obj += cfg.l1_weight * float(np.abs(s.matrix).sum())
    if cfg.cka_penalty_weight > 0:
        obj += cfg.cka_penalty_weight * similarity_metrics(s, split, ("cka",))["cka"]
    return obj


def train_stitcher(f: FrankensteinNetwork, cfg: StitchTrainConfig, train, val,
                   init: StitchingLayer | None = None, trace_path=None) -> tuple[StitchingLayer, list[dict]]:
    """Fit the stitcher of ``f`` by backpropagating the task loss through frozen model 2.

    ``train`` and ``val`` are Datasets or prepared :class:`StitchSplit` objects.
    The returned layer is the iterate with the lowest validation objective over
    the epoch boundaries (epoch 0 is the initialization); ``meta`` records its
    epoch and the end-of-training values.
    """
    need_acts = cfg.cka_penalty_weight > 0
    tr = _as_split(f, train, target_acts=need_acts or cfg.init.startswith("LeastSquares"))
    va = _as_split(f, val, target_acts=bool(cfg.metrics) or need_acts)
    if cfg.train_limit is not None:
        tr = tr.subset(cfg.train_limit)
    if init is None:
        init = init_stitcher(cfg.init, f.model1, f.model2, f.layer_l, tr, f.layer_m, cfg.form, cfg.k, cfg.seed)
    if (init.form, init.k if init.form == "bottleneck" else None) != (cfg.form, cfg.k if cfg.form == "bottleneck" else None):
        raise ConfigError("initial stitcher does not match the configured form")
    f = f.with_stitcher(init)

    dtype = f.model2.dtype
    if init.form == "full":
        params = [torch.tensor(init.m, dtype=dtype), torch.tensor(init.bias, dtype=dtype)]
    else:
        params = [torch.tensor(init.p, dtype=dtype), torch.tensor(init.q, dtype=dtype),
                  torch.tensor(init.bias, dtype=dtype)]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(cfg.seed)
    targets = tr.target_probs if cfg.loss == "SoftCE_to_Model2" else tr.labels
    orthant = cfg.l1_weight > 0 and cfg.l1_mode == "orthant" and cfg.form == "full"

    def weight_of(ps):
        return ps[0] if cfg.form == "full" else ps[0] @ ps[1]

    def record(epoch: int, s: StitchingLayer) -> dict:
        ev = evaluate(f.with_stitcher(s), va, cfg.metrics)
        rec = {"epoch": epoch, "task_loss": ev["cross_entropy"], "rel_acc": ev["rel_acc"]}
        for key in ("cka", "r2lr", "cca", "svcca"):
            if key in ev:
                rec[key] = ev[key]
        rec["sparsity"] = direct_match.sparsity_of(s.matrix)
        if s.form == "bottleneck":
            rec["rank"] = direct_match.matrix_rank(s.matrix)
        rec["objective"] = _validation_objective(f, va, s, cfg, ev["cross_entropy"])
        return rec

    trace = [record(0, init)]
    best, best_obj, best_epoch = init.copy(), trace[0]["objective"], 0
    n = len(tr)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch - 1)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, cfg.batch):
            idx = perm[i:i + cfg.batch]
            acts = tr.target_acts[idx] if need_acts else None
            loss = stitch_objective(f.model2, f.layer_m, weight_of(params), params[-1], tr.source[idx],
                                    targets[idx], cfg, acts, include_l1=not orthant)
            if not torch.isfinite(loss):
                raise Diverged(f"non-finite stitching loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if orthant:
                orthant_sign = _l1_pseudo_gradient(params[0], cfg.l1_weight)
            opt.step()
            if orthant:
                with torch.no_grad():
                    params[0][torch.sign(params[0]) != orthant_sign] = 0.0
        current = _layer_from_params(cfg.form, params)
        rec = record(epoch, current)
        trace.append(rec)
        if rec["objective"] < best_obj:
            best, best_obj, best_epoch = current, rec["objective"], epoch
        log.debug("epoch %d %s", epoch, rec)
    best.meta = {"best_epoch": best_epoch, "final": trace[-1], "r2lr_with_bias": True, "config": cfg.to_dict()}
    if trace_path is not None:
        write_trace(trace_path, trace)
    return best, trace


def train_stitcher_cka_penalty(f: FrankensteinNetwork, cfg: StitchTrainConfig, train, val,
                               init: StitchingLayer | None = None) -> tuple[StitchingLayer, list[dict]]:
    """Self-stitch training that also pushes the minibatch CKA to model 2 down."""
    if cfg.cka_penalty_weight == 0:
        return train_stitcher(f, cfg, train, val, init=init)
    if not (f.model1 is f.model2 and f.layer_l == f.layer_m):
        raise ConfigError("the CKA penalty experiment stitches a model to itself")
    metrics = tuple(dict.fromkeys(cfg.metrics + ("cka",)))
    return train_stitcher(f, replace(cfg, metrics=metrics), train, val, init=init)


def write_trace(path, trace: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps({k: rec[k] for k in TRACE_KEYS if k in rec}, sort_keys=False) + "\n")


# structural analyses

def sparsify(s: StitchingLayer, threshold: float = SPARSITY_THRESHOLD) -> tuple[StitchingLayer, float]:
    if s.form != "full":
        raise BottleneckNotSupported("sparsify needs a full stitching matrix")
    m = np.where(np.abs(s.m) < threshold, 0.0, s.m)
    out = StitchingLayer.full(m, s.bias.copy())
    out.meta = dict(s.meta)
    return out, float(np.mean(m == 0)) if m.size else 0.0


def interpolate(m1: StitchingLayer, m2: StitchingLayer, lam: float) -> StitchingLayer:
    """``lam * m1 + (1 - lam) * m2`` entrywise, biases included."""
    if m1.form != m2.form:
        raise ShapeMismatch("cannot interpolate stitchers of different forms")
    if m1.form == "full":
        if m1.m.shape != m2.m.shape:
            raise ShapeMismatch(f"{m1.m.shape} vs {m2.m.shape}")
        if lam == 1:
            return m1.copy()
        if lam == 0:
            return m2.copy()
        return StitchingLayer.full(lam * m1.m + (1 - lam) * m2.m, lam * m1.bias + (1 - lam) * m2.bias)
    if m1.p.shape != m2.p.shape or m1.q.shape != m2.q.shape:
        raise ShapeMismatch("bottleneck factor shapes differ")
    if lam == 1:
        return m1.copy()
    if lam == 0:
        return m2.copy()
    return StitchingLayer.bottleneck(lam * m1.p + (1 - lam) * m2.p, lam * m1.q + (1 - lam) * m2.q,
                                     lam * m1.bias + (1 - lam) * m2.bias)


MODE_CONNECT_FLOOR = 0.80


def mode_connectivity_sweep(pairs, grid, f: FrankensteinNetwork, data, floor: float = MODE_CONNECT_FLOOR) -> list[dict]:
    """Relative accuracy along the segment between pairs of trained stitchers.

    ``pairs`` holds ``(s1, s2)`` or ``(s1, s2, tag)``. A pair is admitted only
    when both endpoints reach ``floor`` relative accuracy; otherwise a single
    record with ``skipped=True`` and the reason is emitted.
    """
    split = _as_split(f, data, target_acts=False)
    records = []
    for i, pair in enumerate(pairs):
        s1, s2 = pair[0], pair[1]
        tag = pair[2] if len(pair) > 2 else i
        ends = [relative_accuracy(f.with_stitcher(s), split) for s in (s1, s2)]
        if min(ends) < floor:
            reason = f"endpoint relative accuracy {min(ends):.4f} below {floor:.2f}"
            log.info("pair %s skipped: %s", tag, reason)
            records.append({"pair": tag, "skipped": True, "reason": reason, "endpoint_rel_acc": ends})
            continue
        for lam in grid:
            ra = relative_accuracy(f.with_stitcher(interpolate(s1, s2, float(lam))), split)
            records.append({"pair": tag, "skipped": False, "lambda": float(lam), "rel_acc": ra,
                            "endpoint_rel_acc": ends})
    return records


def admissible(model1: Model, layer_l: str, model2: Model, layer_m: str) -> bool:
    w1, h1, _ = model1.activation_shape(layer_l)
    w2, h2, _ = model2.activation_shape(layer_m)
    return w1 >= w2 and h1 >= h2 and w1 % w2 == 0 and h1 % h2 == 0


def cross_layer_grid(model1: Model, model2: Model, cfg: StitchTrainConfig, train: Dataset, val: Dataset,
                     layers: Sequence[str] | None = None) -> list[dict]:
    """Train a stitcher for every admissible (earlier-or-equal spatial size) layer pair."""
    from .nnet.spec import default_taps

    if model1.spec.classes != model2.spec.classes:
        raise ShapeMismatch("models disagree on the class count")
    layers = list(layers) if layers is not None else default_taps(model1.spec)
    records = []
    for li in layers:
        for lj in layers:
            if not admissible(model1, li, model2, lj):
                continue
            f = frankenstein(model1, model2, li, lj)
            s, trace = train_stitcher(f, cfg, train, val)
            ev = evaluate(f.with_stitcher(s), val)
            records.append({"layer_l": li, "layer_m": lj, "rel_acc": ev["rel_acc"],
                            "cross_entropy": ev["cross_entropy"], "best_epoch": s.meta["best_epoch"]})
    return records


# persistence

def save_stitcher(path, s: StitchingLayer) -> None:
    """``<path>.csv`` holds the effective matrix; the sidecar adds form, k and factors."""
    sol = direct_match.MatchSolution(
        s.matrix, s.bias, "RankK" if s.form == "bottleneck" else "General", 0.0,
        direct_match.matrix_rank(s.matrix), direct_match.sparsity_of(s.matrix),
        {"k": int(s.k)} if s.form == "bottleneck" else {})
    extra = {"form": s.form, "k": int(s.k)}
    if s.form == "bottleneck":
        extra["factors"] = {"p": s.p.tolist(), "q": s.q.tolist()}
    direct_match.save_solution(path, sol, extra)


def load_stitcher(path) -> StitchingLayer:
    sol, meta = direct_match.load_solution(path)
    if meta.get("form", "full") == "bottleneck":
        return StitchingLayer.bottleneck(np.array(meta["factors"]["p"]), np.array(meta["factors"]["q"]), sol.bias)
    return StitchingLayer.full(sol.m, sol.bias)
