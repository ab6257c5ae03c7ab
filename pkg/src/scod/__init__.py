"""Hybrid spiking/conventional single-shot object detector in numpy."""

__version__ = "0.1.0"

from .config import NetworkConfig, load_config
from .costmodel import flops_conv, flops_spiking_conv, profile_network
from .multibox import Box, generate_default_boxes, match_and_encode, multibox_loss, nms
from .network import Detection, Model, build_network, train_epoch
from .spiking import LifState, encode_rate, lif_step
from .evaluate import average_precision, mean_average_precision

__all__ = [
    "Box", "Detection", "LifState", "Model", "NetworkConfig", "average_precision", "build_network",
    "encode_rate", "flops_conv", "flops_spiking_conv", "generate_default_boxes", "lif_step", "load_config",
    "match_and_encode", "mean_average_precision", "multibox_loss", "nms", "profile_network", "train_epoch",
]
