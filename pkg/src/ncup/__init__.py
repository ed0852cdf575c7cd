"""Sparsity-aware joint upsampling of flow fields with normalized convolutions."""

from .flowio import epe, flow_to_color, read_flo, write_flo
from .nconv import NConvKernel, conf_pool, conf_unpool, nconv_forward
from .sparsify import SparseGrid, forward_map, read_back
from .tensor import Tensor
from .train import DataConfig, LossConfig, gen_synthetic, train_loop
from .upsampler import (
    InterpNetConfig,
    NCUPModel,
    WeightsNetConfig,
    bilinear_baseline,
    load_model,
    ncup_upsample,
    save_model,
)

__all__ = [
    "DataConfig",
    "InterpNetConfig",
    "LossConfig",
    "NConvKernel",
    "NCUPModel",
    "SparseGrid",
    "Tensor",
    "WeightsNetConfig",
    "bilinear_baseline",
    "conf_pool",
    "conf_unpool",
    "epe",
    "flow_to_color",
    "forward_map",
    "gen_synthetic",
    "load_model",
    "ncup_upsample",
    "nconv_forward",
    "read_back",
    "read_flo",
    "save_model",
    "train_loop",
    "write_flo",
]
