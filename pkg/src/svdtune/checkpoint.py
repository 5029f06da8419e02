"""Single-file model checkpoints.

A checkpoint is a ``torch.save``'d dict (loadable with ``weights_only=True``)::

    format_version  int, currently 1
    config          ModelConfig fields
    arrays          {qualified name: tensor}, the model state_dict
    trainable       {qualified name: bool}, gradient flag of every array
    adapters        {module name: {"kind": "svd" | "lora", "out": D, "in": K,
                                   "rank": R or r, "bias": bool, "bias_trainable": bool}}
    meta            free-form JSON-able dict (method, run info)

SVD adapter arrays are ``<layer>.U`` (D x R), ``<layer>.sigma`` (R),
``<layer>.Vt`` (R x K), ``<layer>.scale`` (R), ``<layer>.shift`` (R) and
``<layer>.bias`` (D). LoRA arrays are ``<layer>.weight``, ``<layer>.bias``,
``<layer>.X`` (D x r), ``<layer>.Y`` (r x K).
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from .model import ModelConfig, PromptSegModel, pool_pos_embed, replace_module
from .svd_adapter import SVDLinear, decompose

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_dict(model: PromptSegModel, meta: Optional[dict] = None) -> dict:
    from .baselines import LoRALinear

    params = {n for n, p in model.named_parameters() if p.requires_grad}
    arrays = {k: v.detach().clone() for k, v in model.state_dict().items()}
    adapters = {}
    for name, mod in model.named_modules():
        if isinstance(mod, SVDLinear):
            adapters[name] = {"kind": "svd", "out": mod.out_features, "in": mod.in_features, "rank": mod.rank,
                              "bias": mod.bias is not None, "bias_trainable": isinstance(mod.bias, nn.Parameter)}
        elif isinstance(mod, LoRALinear):
            adapters[name] = {"kind": "lora", "out": mod.out_features, "in": mod.in_features, "rank": mod.rank,
                              "bias": mod.bias is not None, "bias_trainable": False}
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "arrays": arrays,
        "trainable": {k: k in params for k in arrays},
        "adapters": adapters,
        "meta": dict(meta or {}),
    }


def save_model(model: PromptSegModel, path, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint_dict(model, meta), path)
    return path


def read_checkpoint(path_or_dict) -> dict:
    if isinstance(path_or_dict, dict):
        ckpt = path_or_dict
    else:
        path = Path(path_or_dict)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    version = ckpt.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}")
    return ckpt


def load_model(path_or_dict) -> PromptSegModel:
    from .baselines import LoRALinear

    ckpt = read_checkpoint(path_or_dict)
    cfg = ModelConfig.from_dict(ckpt["config"])
    model = PromptSegModel(cfg)
    arrays = ckpt["arrays"]
    for name, info in ckpt["adapters"].items():
        D, K, R = info["out"], info["in"], info["rank"]
        bias = torch.zeros(D) if info["bias"] else None
        if info["kind"] == "svd":
            mod = SVDLinear(torch.zeros(D, R), torch.zeros(R), torch.zeros(R, K), bias)
            if info["bias_trainable"]:
                mod.unfreeze_bias()
        elif info["kind"] == "lora":
            mod = LoRALinear(torch.zeros(D, K), bias, R)
        else:
            raise CheckpointError(f"unknown adapter kind {info['kind']!r} for {name}")
        replace_module(model, name, mod)
    model.load_state_dict(arrays, strict=True)
    flags = ckpt["trainable"]
    for n, p in model.named_parameters():
        p.requires_grad_(bool(flags.get(n, False)))
    return model


def _same_bits(a: torch.Tensor, b: torch.Tensor) -> bool:
    if a.dtype != b.dtype or a.shape != b.shape:
        return False
    return np.asarray(a.detach().cpu().contiguous()).tobytes() == np.asarray(b.detach().cpu().contiguous()).tobytes()


def frozen_audit(pretrained, adapted) -> List[str]:
    """Return violations of the frozen-bitwise property (empty list = clean).

    Every frozen array in ``adapted`` must be bit-identical to its pretrained
    counterpart. SVD factors, which do not exist in the pretrained
    checkpoint, are checked against a fresh decomposition of the pretrained
    weight (and frozen scale/shift against their identity values); a frozen
    pooled position grid against a fresh pooling.
    """
    pre = read_checkpoint(pretrained)
    post = read_checkpoint(adapted)
    pa, qa = pre["arrays"], post["arrays"]
    problems: List[str] = []
    decomposed = {}
    for name, info in post["adapters"].items():
        if info["kind"] == "svd":
            w = pa.get(f"{name}.weight")
            if w is None:
                problems.append(f"{name}: adapter has no pretrained weight to check against")
                continue
            ref = decompose(w, pa.get(f"{name}.bias"), name=name)
            decomposed[f"{name}.U"] = ref.U
            decomposed[f"{name}.sigma"] = ref.sigma
            decomposed[f"{name}.Vt"] = ref.Vt
            decomposed[f"{name}.scale"] = ref.scale.detach()
            decomposed[f"{name}.shift"] = ref.shift.detach()
    for name, arr in qa.items():
        if post["trainable"].get(name, False):
            continue
        if name in decomposed:
            ref = decomposed[name]
        elif name in pa:
            ref = pa[name]
            if name == "image_encoder.pos_embed" and ref.shape != arr.shape:
                ref = pool_pos_embed(ref, arr.shape[1])
        else:
            problems.append(f"{name}: frozen array absent from the pretrained checkpoint")
            continue
        if not _same_bits(arr, ref):
            problems.append(f"{name}: frozen array changed")
    consumed = {f"{n}.weight" for n, i in post["adapters"].items() if i["kind"] == "svd"}
    for name in pa:
        if name not in qa and name not in consumed:
            problems.append(f"{name}: pretrained array missing from adapted checkpoint")
    return problems
