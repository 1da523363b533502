"""AEGAN: image synthesis through an autoencoder embedding, an embedding-space GAN and an adversarial denoiser."""

from .runtime import apply_thread_limit

apply_thread_limit()

from .networks import AEGAN, NetworkConfig
from .config import TrainConfig, TrainState

__all__ = ["AEGAN", "NetworkConfig", "TrainConfig", "TrainState"]
__version__ = "0.1.0"
