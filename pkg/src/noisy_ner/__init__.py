"""Named-entity tagging under annotation noise with a confidence-aware linear-chain CRF."""

from noisy_ner.confidence import ScheduleConfig, Strategy
from noisy_ner.corpus import Corpus, TagSet, entity_prf, read_conll, write_conll
from noisy_ner.noise import NoiseLedger, PerturbationConfig, perturb
from noisy_ner.trainer import (
    Checkpoint,
    CRFTagger,
    SelfTrainConfig,
    TrainConfig,
    fit,
    fit_supervised,
    grid_search_tau,
    self_train,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CRFTagger",
    "Corpus",
    "NoiseLedger",
    "PerturbationConfig",
    "ScheduleConfig",
    "SelfTrainConfig",
    "Strategy",
    "TagSet",
    "TrainConfig",
    "entity_prf",
    "fit",
    "fit_supervised",
    "grid_search_tau",
    "perturb",
    "read_conll",
    "self_train",
    "write_conll",
]
