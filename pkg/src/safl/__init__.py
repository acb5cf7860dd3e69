"""Attention-guided partial-layer federated fine-tuning, simulated on numpy."""

from .encoder import EncoderConfig, FreezeMask, ModelState, forward
from .fedsim import FedConfig, Strategy, run_centralized, run_federated
from .privacy import PrivacyLedger, PrivacyParams
from .selector import SelectionMask, layer_scores, select_top_k
from .tensor import RngStream, Tensor

__all__ = [
    "EncoderConfig", "FreezeMask", "ModelState", "forward",
    "FedConfig", "Strategy", "run_centralized", "run_federated",
    "PrivacyLedger", "PrivacyParams",
    "SelectionMask", "layer_scores", "select_top_k",
    "RngStream", "Tensor",
]  # fmt: skip

__version__ = "0.1.0"
