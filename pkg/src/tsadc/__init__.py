"""Anomaly detection for multivariate time series trained on contaminated data.

A masking + conditional diffusion decontaminator regenerates possibly
anomalous regions; a time-then-graph model reconstructs the observation.
Their two reconstruction errors are combined into the anomaly score.
"""

from .config import Config
from .data import Dataset, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .pipeline import detect, evaluate_variants, fit, run, sweep

__version__ = "0.1.0"

__all__ = [
    "Config",
    "Dataset",
    "SyntheticConfig",
    "generate_synthetic",
    "load_dataset",
    "save_dataset",
    "fit",
    "detect",
    "evaluate_variants",
    "run",
    "sweep",
]
