"""Cross-city few-shot traffic forecasting with a multi-scale pattern bank.

Pipeline: masked spatio-temporal pretraining on data-rich source cities,
clustering of patch embeddings into a multi-scale pattern bank, pattern
querying + self-expressive graph reconstruction on the data-scarce target
city, and short/long-term fusion forecasting trained under first-order
meta-learning.
"""

from .bank import PatternBank, build_bank, kmeans_cosine, load_bank, silhouette
from .data import (
    CityDataset,
    SyntheticSpec,
    generate_synthetic_corpus,
    load_city,
    make_patches,
    resample_to_base_interval,
    sample_mask,
    save_city,
    split_few_shot,
)
from .experiment import ExperimentConfig, run_ablations, run_experiment
from .forecast import TransferModel, forecast_loss
from .meta import MetaConfig, finetune, meta_train, reptile_epoch, sample_task
from .metrics import MetricsReport, compute_metrics, ha_baseline
from .pretrain import PretrainConfig, load_pretrained

# submodules stay addressable under their own names (pretrain the module
# hosts pretrain() the function)
from . import aggregation, bank, data, experiment, forecast, meta, metrics, \
    nn, pretrain, report  # noqa: E402,F401

__version__ = "0.1.0"

__all__ = [
    "PatternBank", "build_bank", "kmeans_cosine", "load_bank", "silhouette",
    "CityDataset", "SyntheticSpec", "generate_synthetic_corpus", "load_city",
    "make_patches", "resample_to_base_interval", "sample_mask", "save_city",
    "split_few_shot",
    "ExperimentConfig", "run_ablations", "run_experiment",
    "TransferModel", "forecast_loss",
    "MetaConfig", "finetune", "meta_train", "reptile_epoch", "sample_task",
    "MetricsReport", "compute_metrics", "ha_baseline",
    "PretrainConfig", "load_pretrained",
    "aggregation", "bank", "data", "experiment", "forecast", "meta",
    "metrics", "nn", "pretrain", "report",
    "__version__",
]
