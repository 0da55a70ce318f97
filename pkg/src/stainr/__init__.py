"""Desk-scale document stain removal: autodiff, model, data, training, CLI."""

from .autodiff import GradTape, Tensor, backward, gradcheck, no_grad
from .config import TrainConfig, load_config
from .errors import ConfigError, DataError, NumericError, ShapeError, StainrError
from .losses import MetricsReport, SSIMConfig, mae, mse_loss, psnr, ssim, ssim_loss, ssim_value, total_loss
from .memory import DocMemoryParams, MemoryBank, address_memory, cosine_similarity, docmemory_forward, init_docmemory, protomix, read_memory
from .model import ModelConfig, ModelParams, build_model, model_forward
from .optim import OptimState, adamw_step, cosine_anneal_lr
from .synthdata import ImagePair, StainModel, apply_stain, gen_dataset, gen_document, load_pairs, make_pair
from .training import evaluate, restore_array, restore_tiled, train

__version__ = "0.1.0"

__all__ = [
    "GradTape", "Tensor", "backward", "gradcheck", "no_grad",
    "TrainConfig", "load_config",
    "ConfigError", "DataError", "NumericError", "ShapeError", "StainrError",
    "MetricsReport", "SSIMConfig", "mae", "mse_loss", "psnr", "ssim",
    "ssim_loss", "ssim_value", "total_loss",
    "DocMemoryParams", "MemoryBank", "address_memory", "cosine_similarity",
    "docmemory_forward", "init_docmemory", "protomix", "read_memory",
    "ModelConfig", "ModelParams", "build_model", "model_forward",
    "OptimState", "adamw_step", "cosine_anneal_lr",
    "ImagePair", "StainModel", "apply_stain", "gen_dataset", "gen_document",
    "load_pairs", "make_pair",
    "evaluate", "restore_array", "restore_tiled", "train",
    "__version__",
]
