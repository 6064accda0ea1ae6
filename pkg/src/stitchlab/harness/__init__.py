"""Experiment configs, model cache, metric records and the command line."""

from .cache import cache_dir, get_model, get_twins
from .config import EXPERIMENTS, ExperimentConfig, apply_overrides, load_config
from .records import MetricRecord, RecordWriter, read_records, strip_wall_time
from .report import baseline_no_transform, emit_plot_data, summarize
from .experiments import run_experiment

__all__ = [
    "EXPERIMENTS", "ExperimentConfig", "MetricRecord", "RecordWriter", "apply_overrides", "baseline_no_transform",
    "cache_dir", "emit_plot_data", "get_model", "get_twins", "load_config", "read_records", "run_experiment",
    "strip_wall_time", "summarize",
]
