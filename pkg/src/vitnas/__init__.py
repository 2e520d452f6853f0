"""One-shot NAS for vision transformers.

Train a single weight-entangled supernet, then search it evolutionarily for
high-accuracy subnets under a parameter budget; subnets run directly on
sliced (inherited) weights.
"""

__version__ = "0.1.0"

from .metrics import Geometry, ModelCost, cost, count_flops, count_params
from .space import (ArchConfig, LayerGene, RangeTriple, SpaceSpec, cardinality,
                    crossover, expand, mutate, parse_arch_key, preset,
                    sample_uniform, validate)
from .supernet import (DisjointStore, EntangledStore, SubnetView, build,
                       build_disjoint, disjoint_view, extract, forward,
                       subnet_view, trainable_params, view)
from .trainer import TrainConfig, TrainLog, finetune, top1_accuracy, train_standalone, train_supernet
from .evolution import (Candidate, SearchConfig, evaluate, evolve,
                        inherited_fitness, random_search)

__all__ = [
    "ArchConfig", "Candidate", "DisjointStore", "EntangledStore", "Geometry",
    "LayerGene", "ModelCost", "RangeTriple", "SearchConfig", "SpaceSpec",
    "SubnetView", "TrainConfig", "TrainLog", "build", "build_disjoint",
    "cardinality", "cost", "count_flops", "count_params", "crossover",
    "disjoint_view", "evaluate", "evolve", "expand", "extract", "finetune",
    "forward", "inherited_fitness", "mutate", "parse_arch_key", "preset",
    "random_search", "sample_uniform", "subnet_view", "top1_accuracy",
    "trainable_params", "train_standalone", "train_supernet", "validate", "view",
]
