"""Fully-binarized vision transformers on packed XNOR/popcount kernels."""

__version__ = "0.1.0"

from .bitops import BitMatrix, pack_signs, scaled_gemm, unpack, xnor_popcount_gemm
from .layers import PrecisionConfig, TinyViT, ViTArch

__all__ = [
    "BitMatrix",
    "PrecisionConfig",
    "TinyViT",
    "ViTArch",
    "pack_signs",
    "scaled_gemm",
    "unpack",
    "xnor_popcount_gemm",
]
