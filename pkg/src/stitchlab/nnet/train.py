"""Supervised training of the host networks."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from ..errors import ConfigError, Diverged
from .data import Dataset
from .model import Model, accuracy, new_model, to_torch
from .spec import NetworkSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd_nesterov"  # or "adam"
    lr: float = 0.05
    momentum: float = 0.9
    lr_milestones: tuple = (1 / 3, 2 / 3)  # fractions of training
    lr_gamma: float = 0.1
    weight_decay: float = 1e-4
    batch: int = 64
    epochs: int = 30
    seed: int = 0
    data_order_seed: int | None = None
    augment: bool = False  # flips/crops hook; not implemented at desk scale

    def __post_init__(self):
        if self.optimizer not in ("sgd_nesterov", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch < 1 or self.lr < 0:
            raise ConfigError("epochs >= 0, batch >= 1 and lr >= 0 required")
        if self.augment:
            raise ConfigError("data augmentation is not available at desk scale")
        object.__setattr__(self, "lr_milestones", tuple(self.lr_milestones))

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(spec: NetworkSpec, data: Dataset, cfg: TrainConfig, extra: dict | None = None) -> str:
    payload = {
        "spec": spec.to_dict(),
        "data": {"seed": data.generator_seed, "n": len(data), "classes": data.classes,
                 "shape": list(data.inputs.shape[1:]), **(extra or {})},
        "train": cfg.to_dict(),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(epoch >= max(1, math.floor(frac * cfg.epochs)) for frac in cfg.lr_milestones)
    return cfg.lr * cfg.lr_gamma**drops


def _mean_loss(model: Model, x: torch.Tensor, y: torch.Tensor, batch: int = 1000) -> float:
    model.net.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, x.shape[0], batch):
            total += F.cross_entropy(model.logits(x[i:i + batch]), y[i:i + batch], reduction="sum").item()
    return total / x.shape[0]


def train(spec: NetworkSpec, data: Dataset, cfg: TrainConfig = TrainConfig()) -> Model:
    """Train a fresh network; identical ``(spec, data, cfg)`` gives identical weights."""
    model = new_model(spec, cfg.seed)
    net = model.net
    x = to_torch(data.inputs)
    y = torch.as_tensor(data.labels)
    params = list(net.parameters())
    for p in params:
        p.requires_grad_(True)
    if cfg.optimizer == "sgd_nesterov":
        opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, nesterov=True, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    order = torch.Generator().manual_seed(cfg.data_order_seed if cfg.data_order_seed is not None else cfg.seed)

    history = [_mean_loss(model, x, y)]
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = lr_at_epoch(cfg, epoch)
        net.train()
        perm = torch.randperm(len(y), generator=order)
        running, seen = 0.0, 0
        for i in range(0, len(y), cfg.batch):
            idx = perm[i:i + cfg.batch]
            loss = F.cross_entropy(net.run(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise Diverged(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
            seen += len(idx)
        history.append(running / seen)
        log.debug("epoch %d loss %.4f", epoch, history[-1])

    model = Model(spec, net, cfg.seed)
    model.train_meta = {
        "epochs": cfg.epochs,
        "config": cfg.to_dict(),
        "loss_history": history,
        "train_accuracy": accuracy(model, data),
        "data_seed": data.generator_seed,
        "n_train": len(data),
    }
    return model
