"""Category-level neural field prior with a code-conditioned meta-network.

A single meta-network maps compact per-instance (shape, color) codes to the
full parameter set of an instance field — multi-resolution hash tables plus
MLP weights — trained jointly with a codebook over a multiview dataset.
New instances are inverted by optimizing codes only; retrieval, code
swapping, mesh extraction, a denoise-and-finetune quality pass, and storage
accounting ride on top.
"""

from . import (autodiff, checkpoints, denoise, field, gradcheck, hashgrid,
               hypernet, metrics, scene_io, training)
from .checkpoints import load_checkpoint, save_checkpoint
from .field import (FieldConfig, NerfParams, RenderConfig, field_eval,
                    init_nerf_params, render_image)
from .hashgrid import HashGridConfig
from .hypernet import (Codebook, HypernetConfig, HypernetParams,
                       InstanceCodes, init_hypernetwork, predict_instance,
                       swap_codes)
from .training import (PriorModel, TrainConfig, TTOConfig, query, rng_stream,
                       test_time_optimize, train_prior, train_query_net,
                       trivial_embedding)

__all__ = [
    "autodiff", "checkpoints", "denoise", "field", "gradcheck", "hashgrid",
    "hypernet", "metrics", "scene_io", "training",
    "load_checkpoint", "save_checkpoint",
    "FieldConfig", "NerfParams", "RenderConfig", "field_eval",
    "init_nerf_params", "render_image", "HashGridConfig",
    "Codebook", "HypernetConfig", "HypernetParams", "InstanceCodes",
    "init_hypernetwork", "predict_instance", "swap_codes",
    "PriorModel", "TrainConfig", "TTOConfig", "query", "rng_stream",
    "test_time_optimize", "train_prior", "train_query_net",
    "trivial_embedding",
]

__version__ = "0.1.0"
