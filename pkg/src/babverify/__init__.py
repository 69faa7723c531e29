"""Branch-and-bound verification of ReLU networks with learned branching and bounding."""

from .bab import BabConfig, VerificationResult, verify
from .model import InputDomain, Layer, PropertySpec, VerificationNetwork, evaluate, merge_property

__version__ = "0.1.0"

__all__ = ["BabConfig", "VerificationResult", "verify", "InputDomain", "Layer", "PropertySpec",
           "VerificationNetwork", "evaluate", "merge_property"]
