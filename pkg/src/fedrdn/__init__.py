"""Federated learning simulator with randomized data normalization (FedRDN) for feature-skewed clients."""

__version__ = "0.1.0"

from .augmentation import (  # noqa: E402
    AugmentationPipeline,
    ChannelStats,
    StatsRegistry,
    apply_pipeline,
    dataset_channel_stats,
    image_channel_stats,
    normalize_image,
    rdn_test_transform,
    rdn_train_transform,
    rdnv_reference_stats,
)
from .datasets import FederationData, SkewConfig, generate_synthetic, load_idx_partitioned  # noqa: E402
from .federation import AlgorithmConfig, aggregate_weighted, run_experiment  # noqa: E402
from .model import MLP, ModelSpec, SmallCNN, forward, init_params, loss_and_grad  # noqa: E402
from .params import ParameterVector, param_axpy, sgd_step  # noqa: E402
