"""Learning from label proportions with optimal-transport pseudo-labels.

Stage 1 fits a classifier to bag proportions; stage 2 alternates entropic OT
labeling inside each bag with noise-robust supervised training.
"""

from .llp_data import LabeledDataset, LLPDataset, make_bags, two_moons
from .model import MlpClassifier
from .ot_core import SinkhornConfig, exact_ot, sinkhorn
from .pipeline import TrainConfig, run_two_stage

__all__ = [
    "LabeledDataset",
    "LLPDataset",
    "MlpClassifier",
    "SinkhornConfig",
    "TrainConfig",
    "exact_ot",
    "make_bags",
    "run_two_stage",
    "sinkhorn",
    "two_moons",
]
__version__ = "0.1.0"
