"""Data-to-text generation with copy attention, penalised beam search and diverse ensembling."""

from .autodiff import ParamStore, Parameter, Tensor, grad_check, no_grad, precision, set_precision
from .config import OptimizerConfig, RunConfig
from .decoding import (
    DecodeConfig,
    Hypothesis,
    beam_search,
    block_repeat_beginnings,
    coverage_penalty,
    length_penalty,
    rerank_score,
)
from .metrics import MetricsReport, attribute_coverage, bleu, perplexity, rouge_l
from .mr_data import (
    ATTRIBUTES,
    Example,
    MeaningRepresentation,
    Vocabulary,
    build_vocab,
    linearize,
    load_dataset,
    parse_mr,
    tokenize,
)
from .seq2seq import ModelConfig, Seq2Seq, joint_token_distribution
from .training import (
    Adam,
    Ensemble,
    EnsembleConfig,
    EnsembleTrainer,
    make_copy_labels,
    mixture_loglik,
    nll_loss,
    select_inference_model,
    smcl_assign,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ParamStore",
    "Parameter",
    "Tensor",
    "grad_check",
    "no_grad",
    "precision",
    "set_precision",
    "OptimizerConfig",
    "RunConfig",
    "DecodeConfig",
    "Hypothesis",
    "beam_search",
    "block_repeat_beginnings",
    "coverage_penalty",
    "length_penalty",
    "rerank_score",
    "MetricsReport",
    "attribute_coverage",
    "bleu",
    "perplexity",
    "rouge_l",
    "ATTRIBUTES",
    "Example",
    "MeaningRepresentation",
    "Vocabulary",
    "build_vocab",
    "linearize",
    "load_dataset",
    "parse_mr",
    "tokenize",
    "ModelConfig",
    "Seq2Seq",
    "joint_token_distribution",
    "Adam",
    "Ensemble",
    "EnsembleConfig",
    "EnsembleTrainer",
    "make_copy_labels",
    "mixture_loglik",
    "nll_loss",
    "select_inference_model",
    "smcl_assign",
    "train",
]

