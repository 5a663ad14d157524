"""Prompt-tuned frozen dual encoder for unified face-attack detection."""

from .checkpoint import checkpoint_keys, load_checkpoint, params_checksum, save_checkpoint
from .encoders import (
    BackboneParams,
    ClassPromptSet,
    EncoderConfig,
    Vocabulary,
    backbone_checksum,
    class_embeddings,
    class_probabilities,
    description_embeddings,
    encode_image,
    encode_text,
    init_backbone,
    load_backbone,
    named_backbone_params,
    tokenize,
)
from .layers import (
    cosine_similarity,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    multi_head_attention,
    softmax,
    transformer_block,
)
from .metrics import MetricsSummary, ScoreRecord, accuracy, acer, auc, eer, format_report, summarize
from .prompts import (
    AssembledSequence,
    ContextBank,
    PromptBundle,
    assemble_image_layer,
    assemble_text_layer,
    branch_forward,
    build_context,
    context_report,
    create_prompt_bundle,
    fuse_branches,
    kmeans,
    zero_prompt_bundle,
)
from .synthdata import Sample, SynthConfig, generate, load_manifest, split, write_corpus
from .tensor import Rng, Tensor, no_grad
from .training import (
    Adam,
    LossBreakdown,
    TrainConfig,
    Trainer,
    augment,
    caa_select,
    consistency_loss,
    run_training,
    weighted_cross_entropy,
)

__version__ = "0.1.0"
