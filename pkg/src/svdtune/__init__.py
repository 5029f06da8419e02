"""Singular-value fine-tuning for a small promptable segmentation model.

Public entry points are re-exported here; see the submodules for the rest.
"""

from svdtune.baselines import LoRALinear, ParamReport, count_trainable, make_baseline
from svdtune.checkpoint import frozen_audit, load_model, save_model
from svdtune.data import SOURCE, TARGET, DomainShiftSpec, SegDataset, SegSample, generate, ingest
from svdtune.metrics import DiceResult, dice, evaluate, paired_significance
from svdtune.model import (
    ModelConfig,
    PromptSegModel,
    adapt_spectral,
    build_pretrained,
    merge_adapters,
    pool_pos_embed,
    predict_mask,
)
from svdtune.svd_adapter import SVDLinear, decompose, effective_weight
from svdtune.text import TextAffineLayer, TextEmbedder, embed_text
from svdtune.train import RunConfig, adapt, pretrain, run_ablation

__all__ = [
    "DiceResult", "DomainShiftSpec", "LoRALinear", "ModelConfig", "ParamReport", "PromptSegModel", "RunConfig",
    "SOURCE", "SVDLinear", "SegDataset", "SegSample", "TARGET", "TextAffineLayer", "TextEmbedder", "adapt",
    "adapt_spectral", "build_pretrained", "count_trainable", "decompose", "dice", "effective_weight", "embed_text",
    "evaluate", "frozen_audit", "generate", "ingest", "load_model", "make_baseline", "merge_adapters",
    "paired_significance", "pool_pos_embed", "predict_mask", "pretrain", "run_ablation", "save_model",
]
