"""Desk-scale laboratory for input- and activation-level prompting,
normalization tuning, attention-distance analysis, and the sample
complexity of prompt training on a constructed two-layer attention model.
"""

from .tensor import Tape, Tensor, finite_diff_grad
from .layers import LayeredModel, forward_with_hook, make_toy_cnn, make_toy_vit
from .prompting import PromptSpec, TrainConfig, RunRecord, build_adaptation, train
from .theory import SyntheticTaskSpec, build_constructed_vit, verify_lemma1
from .analysis import avg_attention_distance, linear_cka, normtune_from_ap

__all__ = [
    "Tape", "Tensor", "finite_diff_grad",
    "LayeredModel", "forward_with_hook", "make_toy_cnn", "make_toy_vit",
    "PromptSpec", "TrainConfig", "RunRecord", "build_adaptation", "train",
    "SyntheticTaskSpec", "build_constructed_vit", "verify_lemma1",
    "avg_attention_distance", "linear_cka", "normtune_from_ap",
]
