"""Multimodal speech recognition under audio masking.

A numpy reverse-mode autodiff core, an attentive seq2seq ASR model with four
ways of injecting a global image vector, a filterbank+pitch front-end,
word-level masking / incongruent-image protocols and WER reporting.
"""

from .data import (
    ManifestRecord,
    SyntheticTaskConfig,
    Vocabulary,
    WordAlignment,
    build_vocab,
    collate,
    generate_synthetic,
    load_manifest,
    pool_spatial,
    write_manifest,
)
from .evaluation import build_report, corpus_wer, edit_distance, masked_word_recovery
from .masking import MaskLog, MaskSpec, apply_mask, incongruent_shuffle, mask_dataset, mask_stats
from .models import ASRModel, FusionVariant, ModelConfig, ModelParams
from .tensor import Tensor, backward, grad_check, no_grad
from .training import TrainConfig, train

__version__ = "0.1.0"
