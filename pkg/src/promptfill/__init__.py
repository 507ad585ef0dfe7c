"""Prompt-filled vision-language pretraining on a synthetic shapes corpus.

Image-only, text-only and paired inputs all reach one fusion backbone: the
missing side is filled with prompts selected from a learnable pool.
"""

from .config import ConfigError, TrainConfig, load_config
from .model import Unifier, itc_embed

__version__ = "0.1.0"

__all__ = ["ConfigError", "TrainConfig", "Unifier", "itc_embed", "load_config"]
