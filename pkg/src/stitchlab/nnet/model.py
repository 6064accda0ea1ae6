"""Trainable networks with a representation-map / task-map split.

Networks are flat sequences of ops, one per layer descriptor, so the split at
any named layer ``L`` is ``ops[:L+1]`` followed by ``ops[L+1:]`` and the
composition runs exactly the same code as the full forward pass.

Activation tensors use ``(n, w, h, c)`` layout; ``w`` and ``h`` are the two
spatial axes of torch's ``(n, c, w, h)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatch, UnknownLayer
from .spec import BatchNorm, Conv, Dense, GlobalAvgPool, Logits, NetworkSpec, ReLU, ResBlock

TAPS = ("PostBN_PreReLU", "PostAdd", "PostReLU", "Output")
EVAL_BATCH = 1000


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        y = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return y + (x if self.shortcut is None else self.shortcut(x))


class _GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3), keepdim=True)


class _Dense(nn.Module):
    def __init__(self, c_in: int, c_out: int, keep_spatial: bool):
        super().__init__()
        self.linear = nn.Linear(c_in, c_out)
        self.keep_spatial = keep_spatial

    def forward(self, x):
        y = self.linear(x.flatten(1))
        return y[:, :, None, None] if self.keep_spatial else y


class Net(nn.Module):
    """Torch realization of a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        w, h, c = spec.input_shape
        ops = []
        for layer, (w2, h2, c2) in zip(spec.layers, spec.shapes()):
            if isinstance(layer, Conv):
                ops.append(nn.Conv2d(c, c2, layer.kernel, layer.stride, layer.kernel // 2, bias=layer.bias))
            elif isinstance(layer, BatchNorm):
                ops.append(nn.BatchNorm2d(c))
            elif isinstance(layer, ReLU):
                ops.append(nn.ReLU())
            elif isinstance(layer, GlobalAvgPool):
                ops.append(_GlobalAvgPool())
            elif isinstance(layer, Dense):
                ops.append(_Dense(c * w * h, c2, keep_spatial=True))
            elif isinstance(layer, Logits):
                ops.append(_Dense(c * w * h, c2, keep_spatial=False))
            elif isinstance(layer, ResBlock):
                ops.append(_ResBlock(c, c2, layer.stride))
            w, h, c = w2, h2, c2
        self.ops = nn.ModuleList(ops)

    def run(self, x, start: int = 0, stop: int | None = None):
        # conv kernels may return channels-last tensors; normalizing the memory
        # format keeps the split composition bitwise equal to the full pass
        x = x.contiguous()
        for op in self.ops[start:stop]:
            x = op(x).contiguous()
        return x


@dataclass
class ActivationTensor:
    data: np.ndarray  # (n, w, h, c)
    layer: str
    tap: str = "PostBN_PreReLU"

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeMismatch(f"activation tensor must be rank 4, got {self.data.shape}")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def c(self) -> int:
        return self.data.shape[3]


def flatten(acts) -> np.ndarray:
    """``(n, w, h, c)`` to ``(n*w*h, c)``; row ``(i*w + x)*h + y`` holds pixel ``(x, y)`` of sample ``i``."""
    data = acts.data if isinstance(acts, ActivationTensor) else np.asarray(acts)
    return np.asarray(data, dtype=np.float64).reshape(-1, data.shape[-1])


def unflatten(mat: np.ndarray, n: int, w: int, h: int, layer: str = "", tap: str = "PostBN_PreReLU",
              dtype=np.float32) -> ActivationTensor:
    mat = np.asarray(mat)
    if mat.shape[0] != n * w * h:
        raise ShapeMismatch(f"cannot unflatten {mat.shape} into n={n}, w={w}, h={h}")
    return ActivationTensor(mat.reshape(n, w, h, mat.shape[1]).astype(dtype, copy=False), layer, tap)


def to_torch(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(n, w, h, c)`` numpy to ``(n, c, w, h)`` torch."""
    return torch.as_tensor(np.ascontiguousarray(x)).to(dtype).permute(0, 3, 1, 2).contiguous()


def from_torch(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).contiguous().cpu().numpy()


@dataclass
class Model:
    """A network plus its provenance. Parameters are frozen (no grad) outside training."""

    spec: NetworkSpec
    net: Net
    seed: int = 0
    train_meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def layer_index(self, layer: str) -> int:
        try:
            return self.spec.names.index(layer)
        except ValueError:
            raise UnknownLayer(f"no layer named {layer!r}") from None

    def tap_of(self, layer: str) -> str:
        kind = self.spec.layers[self.layer_index(layer)]
        if isinstance(kind, BatchNorm):
            return "PostBN_PreReLU"
        if isinstance(kind, ResBlock):
            return "PostAdd"
        if isinstance(kind, ReLU):
            return "PostReLU"
        return "Output"

    def activation_shape(self, layer: str) -> tuple[int, int, int]:
        return self.spec.shapes()[self.layer_index(layer)]

    # torch-level split

    def features(self, x: torch.Tensor, layer: str) -> torch.Tensor:
        return self.net.run(x, 0, self.layer_index(layer) + 1)

    def head(self, a: torch.Tensor, layer: str) -> torch.Tensor:
        """Logits of the task map applied to activations ``a`` (torch layout)."""
        return self.net.run(a, self.layer_index(layer) + 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net.run(x)

    def to_float64(self) -> "Model":
        net = copy.deepcopy(self.net).double()
        return Model(self.spec, net, self.seed, dict(self.train_meta))

    def clone(self) -> "Model":
        return Model(self.spec, copy.deepcopy(self.net), self.seed, copy.deepcopy(self.train_meta))


def new_model(spec: NetworkSpec, seed: int) -> Model:
    torch.manual_seed(seed)
    return Model(spec, Net(spec), seed)


def _batched(fn, x: torch.Tensor, batch: int = EVAL_BATCH) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([fn(x[i:i + batch]) for i in range(0, x.shape[0], batch)])


def _inputs(model: Model, batch) -> torch.Tensor:
    data = batch.inputs if hasattr(batch, "inputs") else batch
    if isinstance(data, torch.Tensor):
        return data.to(model.dtype)
    return to_torch(np.asarray(data), model.dtype)


def representation_map(model: Model, batch, layer: str) -> ActivationTensor:
    """Activations of ``batch`` (a Dataset or ``(n, w, h, c)`` array) at ``layer``."""
    x = _inputs(model, batch)
    out = _batched(lambda b: model.features(b, layer), x)
    return ActivationTensor(from_torch(out), layer, model.tap_of(layer))


def task_logits(model: Model, acts, layer: str) -> np.ndarray:
    data = acts.data if isinstance(acts, ActivationTensor) else np.asarray(acts)
    expected = model.activation_shape(layer)
    if tuple(data.shape[1:]) != tuple(expected):
        raise ShapeMismatch(f"activations {data.shape[1:]} do not fit layer {layer} {expected}")
    a = to_torch(data, model.dtype)
    return _batched(lambda b: model.head(b, layer), a).numpy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def task_map(model: Model, acts, layer: str) -> np.ndarray:
    """Class probabilities produced by the upper part of ``model`` from activations at ``layer``."""
    return softmax(task_logits(model, acts, layer).astype(np.float64))


def forward_logits(model: Model, batch) -> np.ndarray:
    x = _inputs(model, batch)
    return _batched(model.logits, x).numpy()


def forward(model: Model, batch) -> np.ndarray:
    return softmax(forward_logits(model, batch).astype(np.float64))


def predict(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(probs, axis=1)


def accuracy_of(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(probs) == np.asarray(labels)))


def accuracy(model: Model, data) -> float:
    return accuracy_of(forward_logits(model, data), data.labels)


def loss_value(logits: torch.Tensor, targets: torch.Tensor, loss_kind: str) -> torch.Tensor:
    """Mean cross-entropy against hard labels or soft probability targets."""
    if loss_kind in ("CrossEntropyHard", "hard"):
        return F.cross_entropy(logits, targets)
    if loss_kind in ("CrossEntropySoft", "soft"):
        return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def backward(model: Model, inputs, targets, loss_kind: str = "CrossEntropyHard", at: str = "params"):
    """Gradient of the mean loss on ``inputs``.

    ``at="params"`` returns ``{parameter name: gradient}``; a layer name returns
    the gradient with respect to that layer's activations in ``(n, w, h, c)`` layout.
    """
    x = _inputs(model, inputs)
    t = torch.as_tensor(np.asarray(targets))
    t = t.long() if loss_kind in ("CrossEntropyHard", "hard") else t.to(model.dtype)
    if at == "params":
        params = dict(model.net.named_parameters())
        for p in params.values():
            p.requires_grad_(True)
        try:
            loss = loss_value(model.logits(x), t, loss_kind)
            grads = torch.autograd.grad(loss, list(params.values()))
        finally:
            for p in params.values():
                p.requires_grad_(False)
        return {name: g.numpy() for name, g in zip(params, grads)}
    with torch.no_grad():
        a = model.features(x, at)
    a.requires_grad_(True)
    loss = loss_value(model.head(a, at), t, loss_kind)
    (g,) = torch.autograd.grad(loss, a)
    return from_torch(g)


def parameter_count(model: Model, layer: str) -> int:
    op = model.net.ops[model.layer_index(layer)]
    return sum(p.numel() for p in op.parameters())
