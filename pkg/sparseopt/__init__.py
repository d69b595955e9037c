"""
Sparse training with a proximal AdamW optimizer and block-sparse inference kernels.
"""

from .optimizer import OptimizerConfig, SparseOptimizer, sparsity_report
from .prox_core import ProxConfig

__all__ = [
    "OptimizerConfig",
    "ProxConfig",
    "SparseOptimizer",
    "sparsity_report",
]

__version__ = "0.1.0"
