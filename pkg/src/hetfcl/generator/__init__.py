from .backends import BACKEND_KINDS, GeneratorBackend, MockBackend, ToyDDPMBackend, train_toy_ddpm
from .prototypes import (
    NoLocalSamples,
    Prototype,
    UnseenClassError,
    aggregate_prototypes,
    federated_prototype_update,
    init_prototype,
    load_prototypes,
    manifest_hash,
    save_prototypes,
    train_prototype_round,
)
from .schedule import NoiseSchedule, forward_chain, forward_diffuse
from .synth import PROVENANCE, SyntheticCache, SyntheticDataset, per_class_count, synthesize

__all__ = [
    "BACKEND_KINDS", "GeneratorBackend", "MockBackend", "ToyDDPMBackend", "train_toy_ddpm",
    "NoLocalSamples", "Prototype", "UnseenClassError", "aggregate_prototypes",
    "federated_prototype_update", "init_prototype", "load_prototypes", "manifest_hash",
    "save_prototypes", "train_prototype_round", "NoiseSchedule", "forward_chain",
    "forward_diffuse", "PROVENANCE", "SyntheticCache", "SyntheticDataset", "per_class_count",
    "synthesize",
]
