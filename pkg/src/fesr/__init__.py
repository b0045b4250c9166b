"""Facial expression synthesis with a conditional adversarial autoencoder, trained
jointly with an expression recognizer."""

from .datamodel import ExperimentConfig
from .variants import VARIANTS, get_variant

__all__ = ["ExperimentConfig", "VARIANTS", "get_variant"]
__version__ = "0.1.0"
