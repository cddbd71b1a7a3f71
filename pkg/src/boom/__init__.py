"""Model merging, multi-task contrastive training and bagging-style fusion at desk scale."""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .merge import MergeRecipe, merge
from .synth import Corpus, DatasetSpec, generate_corpus, load_corpus, save_corpus, split_ood
from .trainer import EncoderArch, TrainConfig, train
from .bagging import BaggingPlan, IncrementalPlan, run_incremental, run_static
from .evalkit import compare_strategies, eval_model
from .interaction import compute_interaction, cut_threshold, hierarchical_cluster

__all__ = [
    "Checkpoint", "load_checkpoint", "save_checkpoint", "MergeRecipe", "merge",
    "Corpus", "DatasetSpec", "generate_corpus", "load_corpus", "save_corpus", "split_ood",
    "EncoderArch", "TrainConfig", "train", "BaggingPlan", "IncrementalPlan",
    "run_incremental", "run_static", "compare_strategies", "eval_model",
    "compute_interaction", "cut_threshold", "hierarchical_cluster",
]
