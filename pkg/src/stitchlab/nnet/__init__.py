"""Minimal convolutional network runtime with representation/task map split."""

from .data import Dataset, synth_dataset, synth_splits
from .io import load_activations, load_model, save_activations, save_model
from .model import (
    ActivationTensor,
    Model,
    accuracy,
    accuracy_of,
    backward,
    flatten,
    forward,
    forward_logits,
    new_model,
    representation_map,
    softmax,
    task_logits,
    task_map,
    unflatten,
)
from .spec import NetworkSpec, default_taps, micro10, microres, preset
from .train import TrainConfig, train

__all__ = [
    "ActivationTensor", "Dataset", "Model", "NetworkSpec", "TrainConfig",
    "accuracy", "accuracy_of", "backward", "default_taps", "flatten", "forward", "forward_logits",
    "load_activations", "load_model", "micro10", "microres", "new_model", "preset",
    "representation_map", "save_activations", "save_model", "softmax", "synth_dataset",
    "synth_splits", "task_logits", "task_map", "train", "unflatten",
]
