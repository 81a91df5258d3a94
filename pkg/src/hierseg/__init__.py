"""Nested-region segmentation networks with a hierarchical dice loss, on a numpy autodiff engine."""

from .autodiff import Tensor, backward, finite_diff_check
from .architectures import NetConfig, build_network, forward
from .losses import LossParams, compute_loss, hdice_loss, aggregate_hierarchy
from .trainer import TrainConfig, train, evaluate

__version__ = "0.1.0"
