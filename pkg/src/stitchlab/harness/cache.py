"""Trained-model cache keyed by a content hash of (spec, data, training config)."""

from __future__ import annotations

import logging
import os
from pathlib import Path

from ..nnet import data as nd
from ..nnet.io import load_model, save_model
from ..nnet.model import Model
from ..nnet.spec import NetworkSpec, preset
from ..nnet.train import TrainConfig, config_hash, train
from .config import DataConfig, ExperimentConfig

log = logging.getLogger(__name__)
ENV_VAR = "STITCHLAB_CACHE"


def cache_dir() -> Path:
    root = Path(os.environ.get(ENV_VAR) or Path.home() / ".cache" / "stitchlab")
    root.mkdir(parents=True, exist_ok=True)
    return root


def datasets(cfg: DataConfig) -> tuple[nd.Dataset, nd.Dataset]:
    return nd.synth_splits(cfg.seed, cfg.n_train, cfg.n_test, classes=cfg.classes, noise=cfg.noise)


def get_model(spec: NetworkSpec, data: nd.Dataset, train_cfg: TrainConfig, noise: float) -> Model:
    key = config_hash(spec, data, train_cfg, {"noise": noise})
    path = cache_dir() / f"{key}.mdl"
    if path.exists():
        log.info("model cache hit %s", path)
        return load_model(path)
    log.info("training model %s", key)
    model = train(spec, data, train_cfg)
    tmp = path.with_suffix(".tmp")
    save_model(tmp, model)
    tmp.replace(path)
    # reload so cached and fresh runs see the same float32 weights
    return load_model(path)


def get_twins(cfg: ExperimentConfig, width_multiplier: int | None = None):
    """``(model1, model2, train split, test split)`` for an experiment config."""
    train_split, test_split = datasets(cfg.data)
    if cfg.model_files:
        missing = [p for p in cfg.model_files if not Path(p).exists()]
        if not missing:
            return (*(load_model(p) for p in cfg.model_files), train_split, test_split)
    mult = cfg.width_multiplier if width_multiplier is None else width_multiplier
    spec = preset(cfg.model, classes=cfg.data.classes, width_multiplier=mult)
    models = [get_model(spec, train_split, cfg.train_config(seed), cfg.data.noise) for seed in cfg.model_seeds]
    if cfg.model_files:
        for path, model in zip(cfg.model_files, models):
            if not Path(path).exists():
                save_model(path, model)
    return models[0], models[1], train_split, test_split
