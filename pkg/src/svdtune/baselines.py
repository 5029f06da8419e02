"""Comparison methods (frozen, bias-only, LoRA, full) and trainable-parameter accounting."""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .model import (
    ADAPTED_LINEARS,
    CORE_LINEARS,
    ConfigError,
    ModelConfig,
    PromptSegModel,
    adapt_spectral,
    build_pretrained,
    encoder_layernorms,
    encoder_linears,
    freeze_all,
    replace_module,
)
from .svd_adapter import SVDLinear

METHODS = ("frozen", "bias_only", "lora", "svd", "full")
SVD_TOGGLES = ("pos_embed", "layernorm", "tal", "scale", "shift")


class AccountingError(RuntimeError):
    pass


def parse_method(method: str) -> Tuple[str, Optional[int]]:
    """'svd' -> ('svd', None); 'lora4', 'lora(4)', 'lora:4' -> ('lora', 4)."""
    m = re.fullmatch(r"lora(?:[:(]?(\d+)\)?)?", method.strip().lower())
    if m:
        return "lora", int(m.group(1) or 4)
    name = method.strip().lower().replace("-", "_")
    if name not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of frozen, bias_only, lora(r), svd, full")
    return name, None


class LoRALinear(nn.Module):
    """Frozen dense weight plus a trainable rank-r update: (W + X Y) x + b."""

    def __init__(self, weight: torch.Tensor, bias: Optional[torch.Tensor], rank: int,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        D, K = weight.shape
        self.out_features, self.in_features, self.rank = D, K, rank
        self.register_buffer("weight", weight.detach().clone())
        if bias is not None:
            self.register_buffer("bias", bias.detach().clone())
        else:
            self.bias = None
        self.X = nn.Parameter(torch.zeros(D, rank, dtype=weight.dtype))
        bound = 1.0 / math.sqrt(K)
        y = torch.rand(rank, K, generator=generator, dtype=weight.dtype) * 2 * bound - bound
        self.Y = nn.Parameter(y)

    @classmethod
    def from_linear(cls, linear: nn.Linear, rank: int, generator=None) -> "LoRALinear":
        return cls(linear.weight, linear.bias, rank, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight, self.bias) + F.linear(F.linear(x, self.Y), self.X)

    def merge(self):
        with torch.no_grad():
            return self.weight + self.X @ self.Y, None if self.bias is None else self.bias.clone()

    def to_linear(self) -> nn.Linear:
        w, b = self.merge()
        layer = nn.Linear(self.in_features, self.out_features, bias=b is not None, dtype=w.dtype)
        with torch.no_grad():
            layer.weight.copy_(w)
            if b is not None:
                layer.bias.copy_(b)
        return layer

    def trainable_count(self) -> int:
        return self.rank * (self.out_features + self.in_features)


def lora_forward(state: LoRALinear, x: torch.Tensor) -> torch.Tensor:
    return state(x)


def encoder_bias_params(model: PromptSegModel):
    enc = model.image_encoder
    yield enc.patch_embed.bias
    for _, lin in encoder_linears(model):
        if getattr(lin, "bias", None) is not None:
            yield lin.bias


def make_baseline(model: PromptSegModel, method: str, seed: int = 0, include_attn_proj: bool = True,
                  target_image_size: Optional[int] = None, **toggles) -> PromptSegModel:
    """Copy of a pretrained model rewired for ``method``.

    ``toggles`` (pos_embed, layernorm, tal, scale, shift, train_bias) are only
    accepted for svd.
    """
    name, rank = parse_method(method)
    if toggles and name != "svd":
        raise ConfigError(f"component toggles {sorted(toggles)} only apply to method 'svd', not {method!r}")
    if name == "svd":
        return adapt_spectral(model, target_image_size, include_attn_proj=include_attn_proj, **toggles)
    if target_image_size is not None and target_image_size != model.config.image_size:
        raise ConfigError("changing the image size is only supported for method 'svd'")
    out = copy.deepcopy(model)
    freeze_all(out)
    if name == "bias_only":
        for b in encoder_bias_params(out):
            b.requires_grad_(True)
        out.tal.requires_grad_(True)
    elif name == "lora":
        gen = torch.Generator().manual_seed(seed)
        names = ADAPTED_LINEARS if include_attn_proj else CORE_LINEARS
        for qualified, lin in list(encoder_linears(out, names)):
            replace_module(out, qualified, LoRALinear.from_linear(lin, rank, gen))
    elif name == "full":
        for p in out.parameters():
            p.requires_grad_(True)
    return out


# --------------------------------------------------------------------------- accounting


@dataclass
class ParamReport:
    method: str
    total: int
    trainable: int
    groups: Dict[str, int] = field(default_factory=dict)

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "fraction": self.fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamReport":
        return cls(d["method"], int(d["total"]), int(d["trainable"]), {k: int(v) for k, v in d["groups"].items()})

    def text(self) -> str:
        lines = [f"method: {self.method}", f"total parameters: {self.total}",
                 f"trainable parameters: {self.trainable} ({100 * self.fraction:.3f}%)"]
        lines += [f"  {g}: {n}" for g, n in sorted(self.groups.items())]
        return "\n".join(lines) + "\n"

    def save(self, run_dir) -> None:
        run_dir = Path(run_dir)
        (run_dir / "param_report.json").write_text(json.dumps(self.to_dict(), indent=1))
        (run_dir / "param_report.txt").write_text(self.text())


def _group_of(name: str, model: PromptSegModel) -> str:
    if name == "image_encoder.pos_embed":
        return "pos_embed"
    if name.startswith("tal."):
        return "tal"
    module_name = name.rpartition(".")[0]
    mod = model.get_submodule(module_name)
    if isinstance(mod, nn.LayerNorm) and name.startswith("image_encoder."):
        return "layernorm"
    if name.endswith(".bias") and name.startswith("image_encoder."):
        return "bias"
    return "other"


def enumerate_params(model: PromptSegModel, method: str = "custom") -> ParamReport:
    """Count parameters by walking the model.

    Adapted matrices count their represented D x K weight as frozen, so the
    total is the base model plus any parameters an adapter adds.
    """
    total = trainable = 0
    groups: Dict[str, int] = {}
    seen = set()

    def add(group, n, trains):
        nonlocal total, trainable
        total += n
        if trains:
            trainable += n
            groups[group] = groups.get(group, 0) + n

    for mname, mod in model.named_modules():
        if isinstance(mod, SVDLinear):
            add("frozen", mod.out_features * mod.in_features, False)
            add("svd_scale", mod.scale.numel(), mod.scale.requires_grad)
            add("svd_shift", mod.shift.numel(), mod.shift.requires_grad)
            if mod.bias is not None:
                add("bias", mod.bias.numel(), isinstance(mod.bias, nn.Parameter) and mod.bias.requires_grad)
            seen.update(f"{mname}.{n}" for n, _ in mod.named_parameters())
        elif isinstance(mod, LoRALinear):
            add("frozen", mod.weight.numel() + (0 if mod.bias is None else mod.bias.numel()), False)
            add("lora", mod.X.numel(), mod.X.requires_grad)
            add("lora", mod.Y.numel(), mod.Y.requires_grad)
            seen.update(f"{mname}.{n}" for n, _ in mod.named_parameters())
    for name, p in model.named_parameters():
        if name in seen:
            continue
        add(_group_of(name, model), p.numel(), p.requires_grad)
    return ParamReport(method, total, trainable, groups)


def _matrix_shapes(cfg: ModelConfig, include_attn_proj: bool = True):
    D, H = cfg.embed_dim, cfg.mlp_hidden
    shapes = {"attn.qkv": (3 * D, D), "attn.proj": (D, D), "mlp.lin1": (H, D), "mlp.lin2": (D, H)}
    names = ADAPTED_LINEARS if include_attn_proj else CORE_LINEARS
    return [shapes[n] for _ in range(cfg.depth) for n in names]


def closed_form_total(cfg: ModelConfig) -> int:
    """Parameter count of the base model, from the config alone."""
    D, H, E, M = cfg.embed_dim, cfg.mlp_hidden, cfg.prompt_dim, cfg.decoder_mlp_dim
    C, p, G = cfg.in_chans, cfg.patch_size, cfg.grid_size
    i = D // cfg.attn_downsample
    lin = lambda k, d: k * d + d  # noqa: E731
    block = 2 * 2 * D + lin(D, 3 * D) + lin(D, D) + lin(D, H) + lin(H, D)
    encoder = C * p * p * D + D + G * G * D + cfg.depth * block + 2 * D
    prompt = lin(E, D) + lin(D, D)
    self_attn = 4 * lin(D, D)
    cross = 3 * lin(D, i) + lin(i, D)
    layer = self_attn + 2 * cross + 4 * 2 * D + lin(D, M) + lin(M, D)
    q, e = D // 4, D // 8
    upscale = D * q * 4 + q + 2 * q + q * e * 4 + e
    hyper = lin(D, D) + lin(D, D) + lin(D, e)
    presence = D + lin(D, D) + lin(D, 1)
    decoder = D + cfg.decoder_depth * layer + cross + 2 * D + upscale + hyper + presence
    tal = lin(E, E)
    return encoder + prompt + decoder + tal


def closed_form_counts(method: str, cfg: ModelConfig, include_attn_proj: bool = True, **toggles) -> Tuple[int, int]:
    """(total, trainable) from the formulas: 2 min(D, K) per matrix for svd, r (D + K) for LoRA."""
    name, rank = parse_method(method)
    D, E, G = cfg.embed_dim, cfg.prompt_dim, cfg.grid_size
    shapes = _matrix_shapes(cfg, include_attn_proj)
    base = closed_form_total(cfg)
    tal = E * E + E
    if name == "frozen":
        return base, 0
    if name == "full":
        return base, base
    if name == "bias_only":
        biases = D + sum(d for d, _ in _matrix_shapes(cfg, True))
        return base, biases + tal
    if name == "lora":
        added = sum(rank * (d + k) for d, k in shapes)
        return base + added, added
    t = {k: True for k in SVD_TOGGLES}
    t.update(toggles)
    if not (t["scale"] or t["shift"]):
        shapes = []
    added = sum(2 * min(d, k) for d, k in shapes)
    trainable = sum(min(d, k) for d, k in shapes) * (int(t["scale"]) + int(t["shift"]))
    if t["layernorm"]:
        trainable += (2 * cfg.depth + 1) * 2 * D
    if t["pos_embed"]:
        trainable += G * G * D
    if t["tal"]:
        trainable += tal
    if t.get("train_bias"):
        trainable += sum(d for d, _ in shapes)
    return base + added, trainable


def count_trainable(method: str, model_config: Optional[ModelConfig] = None, include_attn_proj: bool = True,
                    model: Optional[PromptSegModel] = None, **toggles) -> ParamReport:
    """Enumerated ParamReport for ``method``; raises if it disagrees with the closed form."""
    cfg = model_config or (model.config if model is not None else ModelConfig())
    base = model if model is not None else build_pretrained(cfg, seed=0)
    adapted = make_baseline(base, method, include_attn_proj=include_attn_proj, **toggles)
    report = enumerate_params(adapted, method)
    total, trainable = closed_form_counts(method, cfg, include_attn_proj, **toggles)
    if (report.total, report.trainable) != (total, trainable):
        raise AccountingError(
            f"{method}: enumeration gives total={report.total}, trainable={report.trainable}; "
            f"closed form gives total={total}, trainable={trainable}"
        )
    return report
