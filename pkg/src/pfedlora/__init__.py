"""Personalized federated LoRA tuning with saliency-based mask search."""

from .adapters import LoraPair, dense_rank
from .backbone import Backbone, BackboneConfig, InjectionSite
from .estimators import FederatedLoraTuner, SaliencyMaskSearch
from .federation import RunConfig, run_federated

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneConfig",
    "FederatedLoraTuner",
    "InjectionSite",
    "LoraPair",
    "RunConfig",
    "SaliencyMaskSearch",
    "dense_rank",
    "run_federated",
]
