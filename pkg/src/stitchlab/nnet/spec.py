"""Layer descriptors and network specifications.

A :class:`NetworkSpec` is an ordered list of layer descriptors. Every
descriptor carries a ``name``; the output of any named layer is a tap that
can be read by :func:`stitchlab.nnet.representation_map`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Union

from ..errors import ConfigError


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    bias: bool = True
    name: str = ""


@dataclass(frozen=True)
class BatchNorm:
    name: str = ""


@dataclass(frozen=True)
class ReLU:
    name: str = ""


@dataclass(frozen=True)
class GlobalAvgPool:
    name: str = ""


@dataclass(frozen=True)
class Dense:
    out_dim: int
    name: str = ""


@dataclass(frozen=True)
class Logits:
    classes: int
    name: str = "logits"


@dataclass(frozen=True)
class ResBlock:
    """conv-BN-ReLU-conv-BN plus shortcut; output is taken after the addition."""

    out_channels: int
    stride: int = 1
    name: str = ""


Layer = Union[Conv, BatchNorm, ReLU, GlobalAvgPool, Dense, Logits, ResBlock]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv, BatchNorm, ReLU, GlobalAvgPool, Dense, Logits, ResBlock)}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple = (16, 16, 1)  # (w, h, c)
    width_multiplier: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        named = []
        for i, layer in enumerate(self.layers):
            if not layer.name:
                layer = replace(layer, name=f"{type(layer).__name__.lower()}{i}")
            named.append(layer)
        object.__setattr__(self, "layers", tuple(named))
        self.validate()

    def validate(self) -> None:
        if self.width_multiplier < 1:
            raise ConfigError("width_multiplier must be a positive integer")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")
        if not self.layers or not isinstance(self.layers[-1], Logits):
            raise ConfigError("a spec must end with exactly one Logits layer")
        if sum(isinstance(layer, Logits) for layer in self.layers) != 1:
            raise ConfigError("a spec must contain exactly one Logits layer")
        self.shapes()

    def width(self, layer: Layer) -> int:
        if isinstance(layer, Dense):
            return layer.out_dim * self.width_multiplier
        return layer.out_channels * self.width_multiplier

    def shapes(self) -> list[tuple[int, int, int]]:
        """Activation shape ``(w, h, c)`` after every layer (Logits: ``(1, 1, classes)``)."""
        w, h, c = self.input_shape
        out = []
        for layer in self.layers:
            if isinstance(layer, (Conv, ResBlock)):
                stride = layer.stride
                k = layer.kernel if isinstance(layer, Conv) else 3
                pad = k // 2
                w = (w + 2 * pad - k) // stride + 1
                h = (h + 2 * pad - k) // stride + 1
                c = self.width(layer)
            elif isinstance(layer, GlobalAvgPool):
                w = h = 1
            elif isinstance(layer, Dense):
                w, h, c = 1, 1, self.width(layer)
            elif isinstance(layer, Logits):
                w, h, c = 1, 1, layer.classes
            if w < 1 or h < 1:
                raise ConfigError(f"layer {layer.name} reduces spatial size below 1")
            out.append((w, h, c))
        return out

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def classes(self) -> int:
        return self.layers[-1].classes

    def to_dict(self) -> dict:
        return {
            "layers": [{"type": type(layer).__name__, **asdict(layer)} for layer in self.layers],
            "input_shape": list(self.input_shape),
            "width_multiplier": self.width_multiplier,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for item in d["layers"]:
            item = dict(item)
            kind = _LAYER_TYPES.get(item.pop("type", None))
            if kind is None:
                raise ConfigError(f"unknown layer type in {item}")
            allowed = {f.name for f in fields(kind)}
            layers.append(kind(**{k: v for k, v in item.items() if k in allowed}))
        return cls(tuple(layers), tuple(d.get("input_shape", (16, 16, 1))), int(d.get("width_multiplier", 1)))


MICRO10_WIDTHS = (8, 8, 16, 16, 16, 32, 32, 32)
MICRO10_STRIDES = (1, 1, 2, 1, 1, 2, 1, 1)
MICRO10_KERNELS = (3, 3, 3, 3, 3, 3, 3, 1)


def micro10(classes: int = 10, width_multiplier: int = 1, input_shape=(16, 16, 1)) -> NetworkSpec:
    """Tiny-10 topology at desk scale: taps ``Layer1`` ... ``Layer8`` sit after batchnorm."""
    layers: list = []
    for i, (width, stride, k) in enumerate(zip(MICRO10_WIDTHS, MICRO10_STRIDES, MICRO10_KERNELS), start=1):
        layers += [
            Conv(width, kernel=k, stride=stride, bias=False, name=f"conv{i}"),
            BatchNorm(name=f"Layer{i}"),
            ReLU(name=f"relu{i}"),
        ]
    layers += [GlobalAvgPool(name="gap"), Logits(classes)]
    return NetworkSpec(tuple(layers), input_shape, width_multiplier)


def microres(classes: int = 10, width_multiplier: int = 1, input_shape=(16, 16, 1),
             widths=(8, 16, 32), blocks_per_level: int = 2) -> NetworkSpec:
    """Three-level residual network; taps ``Layer0.0`` and ``LayerX.Y`` (after the addition)."""
    layers: list = [
        Conv(widths[0], bias=False, name="conv0"),
        BatchNorm(name="Layer0.0"),
        ReLU(name="relu0"),
    ]
    for level, width in enumerate(widths, start=1):
        for block in range(blocks_per_level):
            stride = 2 if (level > 1 and block == 0) else 1
            layers += [
                ResBlock(width, stride=stride, name=f"Layer{level}.{block}"),
                ReLU(name=f"relu{level}.{block}"),
            ]
    layers += [GlobalAvgPool(name="gap"), Logits(classes)]
    return NetworkSpec(tuple(layers), input_shape, width_multiplier)


PRESETS = {"micro10": micro10, "microres": microres}


def preset(name: str, **kwargs) -> NetworkSpec:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(PRESETS)}") from None


def default_taps(spec: NetworkSpec) -> list[str]:
    """Layers whose names start with ``Layer`` (the matching points of the presets)."""
    return [name for name in spec.names if name.startswith("Layer")]


__all__ = [
    "BatchNorm", "Conv", "Dense", "GlobalAvgPool", "Logits", "NetworkSpec", "ReLU", "ResBlock",
    "default_taps", "micro10", "microres", "preset",
]
