"""Pretraining, adaptation and the component ablation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .baselines import SVD_TOGGLES, ParamReport, enumerate_params, make_baseline, parse_method
from .checkpoint import frozen_audit, load_model, read_checkpoint, save_model
from .data import SOURCE, TARGET, DomainShiftSpec, PromptBalancedSampler, SegDataset, generate, ingest
from .metrics import DiceResult, evaluate
from .model import ConfigError, ModelConfig, PromptSegModel, build_pretrained

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class AuditError(RuntimeError):
    pass


def substream(seed: int, name: str) -> int:
    """Independent integer seed for a named randomness stream of a run."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


# Ablation rows, cumulative: none, +pos, +layernorm, +TAL, +scale, +shift (no scale), +both
ABLATION_ROWS: List[Tuple[str, Dict[str, bool]]] = [
    ("none", dict(pos_embed=False, layernorm=False, tal=False, scale=False, shift=False)),
    ("pos_embed", dict(pos_embed=True, layernorm=False, tal=False, scale=False, shift=False)),
    ("layernorm", dict(pos_embed=True, layernorm=True, tal=False, scale=False, shift=False)),
    ("tal", dict(pos_embed=True, layernorm=True, tal=True, scale=False, shift=False)),
    ("scale", dict(pos_embed=True, layernorm=True, tal=True, scale=True, shift=False)),
    ("shift", dict(pos_embed=True, layernorm=True, tal=True, scale=False, shift=True)),
    ("all", dict(pos_embed=True, layernorm=True, tal=True, scale=True, shift=True)),
]


# Adam step size per method when RunConfig.lr is None. Chosen per method on a
# validation split of the target domain (grid 1e-4 .. 1e-1): Adam moves every
# parameter by about lr per step, and scale/shift live on the scale of the
# singular values while dense weights are ~100x smaller.
ADAPT_LR: Dict[str, float] = {"frozen": 1e-3, "bias_only": 1e-2, "lora": 1e-2, "svd": 3e-2, "full": 3e-4}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    method: str = "svd"
    toggles: Dict[str, bool] = field(default_factory=dict)   # svd only; missing keys default to True
    include_attn_proj: bool = True
    train_bias: bool = False
    target_image_size: Optional[int] = None
    lr: Optional[float] = None   # None: ADAPT_LR for the method
    steps: int = 300
    batch_size: int = 32
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    present_fraction: float = 0.75
    seed: int = 0
    domain: str = "target"
    n_train: int = 400       # images; each image yields one query per label
    n_eval: int = 100
    data_seed: Optional[int] = None   # defaults to a substream of ``seed``
    eval_seed: int = 12345
    data_dir: Optional[str] = None     # ingest this directory instead of generating
    eval_dir: Optional[str] = None
    out_dir: str = "runs/run"
    pretrained: Optional[str] = None
    warmup_steps: int = 0
    log_every: int = 50

    def validate(self) -> "RunConfig":
        name, _ = parse_method(self.method)
        if self.toggles and name != "svd":
            raise ConfigError(f"component toggles only apply to method 'svd', not {self.method!r}")
        if self.train_bias and name != "svd":
            raise ConfigError("train_bias only applies to method 'svd'")
        unknown = set(self.toggles) - set(SVD_TOGGLES)
        if unknown:
            raise ConfigError(f"unknown toggles {sorted(unknown)}")
        if self.domain not in ("source", "target"):
            raise ConfigError(f"domain must be 'source' or 'target', got {self.domain!r}")
        for k in ("steps", "n_train", "n_eval"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        if self.batch_size < 1 or (self.lr is not None and self.lr <= 0):
            raise ConfigError("batch_size must be >= 1 and lr > 0")
        self.model.validate()
        return self

    def resolved_lr(self) -> float:
        return self.lr if self.lr is not None else ADAPT_LR[parse_method(self.method)[0]]

    def resolved_toggles(self) -> Dict[str, bool]:
        t = {k: True for k in SVD_TOGGLES}
        t.update(self.toggles)
        return t

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def default_pretrain_config(**kw) -> RunConfig:
    base = dict(method="full", domain="source", lr=1e-3, steps=1000, warmup_steps=100, batch_size=32, n_train=1500,
                n_eval=100, out_dir="runs/pretrain")
    base.update(kw)
    return RunConfig(**base)


# --------------------------------------------------------------------------- pieces


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, bce_weight: float = 1.0,
                      dice_weight: float = 1.0, smooth: float = 1.0) -> torch.Tensor:
    """Weighted BCE plus soft Dice, both averaged over the batch.

    The smoothing term makes the soft Dice of a blank target fall to zero as
    the predicted foreground vanishes.
    """
    bce = F.binary_cross_entropy_with_logits(logits, target)
    p = torch.sigmoid(logits).flatten(1)
    t = target.flatten(1)
    soft = 1 - (2 * (p * t).sum(1) + smooth) / (p.sum(1) + t.sum(1) + smooth)
    return bce_weight * bce + dice_weight * soft.mean()


def lr_factor(step: int, total: int, warmup: int = 0) -> float:
    """Linear warmup then cosine decay to zero."""
    if step < warmup:
        return (step + 1) / warmup
    t = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1 + math.cos(math.pi * min(t, 1.0)))


def spec_for(domain: str) -> DomainShiftSpec:
    return SOURCE if domain == "source" else TARGET


def training_data(cfg: RunConfig) -> SegDataset:
    if cfg.data_dir:
        return ingest(cfg.data_dir, domain=cfg.domain)
    seed = cfg.data_seed if cfg.data_seed is not None else substream(cfg.seed, "data")
    return generate(spec_for(cfg.domain), cfg.n_train, seed, image_size=cfg.model.image_size)


def eval_data(cfg: RunConfig, image_size: Optional[int] = None) -> SegDataset:
    if cfg.eval_dir:
        return ingest(cfg.eval_dir, domain=cfg.domain)
    return generate(spec_for(cfg.domain), cfg.n_eval, cfg.eval_seed, image_size=image_size or cfg.model.image_size)


def fit(model: PromptSegModel, dataset: SegDataset, cfg: RunConfig) -> List[float]:
    """Optimize the model's trainable parameters; returns the loss history."""
    params = [p for p in model.parameters() if p.requires_grad]
    if not params or cfg.steps == 0:
        return []
    torch.manual_seed(substream(cfg.seed, "torch"))
    rng = np.random.default_rng(substream(cfg.seed, "shuffle"))
    sampler = PromptBalancedSampler(dataset, cfg.batch_size, rng, cfg.present_fraction)
    opt = torch.optim.Adam(params, lr=cfg.resolved_lr())
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, cfg.steps, cfg.warmup_steps))
    model.train()
    history: List[float] = []
    t0 = time.time()
    for step in range(cfg.steps):
        batch = next(sampler)
        emb = model.encode_image(batch.images)[batch.image_index]
        logits = model.decode(emb, model.embed_prompts(batch.prompts))
        loss = segmentation_loss(logits, batch.masks, cfg.bce_weight, cfg.dice_weight)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d/%d loss %.4f (%.1fs)", step + 1, cfg.steps, np.mean(history[-cfg.log_every:]),
                     time.time() - t0)
    model.eval()
    return history


def _write_run(run_dir: Path, cfg: RunConfig, history: List[float], result: DiceResult,
               report: Optional[ParamReport] = None) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    (run_dir / "history.json").write_text(json.dumps(history))
    result.save(run_dir / "eval.json")
    if report is not None:
        report.save(run_dir)


# --------------------------------------------------------------------------- workflows


def pretrain(cfg: RunConfig) -> Path:
    """Train every parameter except the text affine layer on the source domain.

    The affine layer is not part of the stand-in pretrained model; it stays at
    identity here and is introduced at adaptation time.
    """
    cfg.validate()
    run_dir = Path(cfg.out_dir)
    model = build_pretrained(cfg.model, seed=substream(cfg.seed, "init"))
    model.tal.requires_grad_(False)
    history = fit(model, training_data(cfg), cfg)
    for p in model.parameters():
        p.requires_grad_(True)
    result = evaluate(model, eval_data(cfg))
    ckpt = save_model(model, run_dir / "checkpoint.pt", meta={"method": "pretrain", "seed": cfg.seed})
    _write_run(run_dir, cfg, history, result)
    log.info("pretrain: %s avg DSC %.3f", cfg.domain, result.average)
    return ckpt


def build_adapted(cfg: RunConfig, pretrained: PromptSegModel) -> PromptSegModel:
    name, _ = parse_method(cfg.method)
    kwargs = {}
    if name == "svd":
        kwargs = dict(cfg.resolved_toggles(), train_bias=cfg.train_bias, target_image_size=cfg.target_image_size)
    return make_baseline(pretrained, cfg.method, seed=substream(cfg.seed, "init"),
                         include_attn_proj=cfg.include_attn_proj, **kwargs)


def adapt(cfg: RunConfig, pretrained_checkpoint=None) -> Tuple[Path, ParamReport]:
    """Adapt a pretrained checkpoint with ``cfg.method`` and evaluate it.

    Writes checkpoint.pt, param_report.{json,txt}, eval.json, history.json and
    config.json into ``cfg.out_dir``. Raises :class:`AuditError` if any frozen
    array moved.
    """
    cfg.validate()
    pre_path = pretrained_checkpoint or cfg.pretrained
    if pre_path is None:
        raise ConfigError("adapt needs a pretrained checkpoint")
    pre_ckpt = read_checkpoint(pre_path)
    pretrained = load_model(pre_ckpt)
    model = build_adapted(cfg, pretrained)
    report = enumerate_params(model, cfg.method)
    train_cfg = cfg.replace(model=model.config, lr=cfg.resolved_lr())
    history = fit(model, training_data(train_cfg), train_cfg)
    result = evaluate(model, eval_data(train_cfg))
    run_dir = Path(cfg.out_dir)
    ckpt = save_model(model, run_dir / "checkpoint.pt", meta={"method": cfg.method, "seed": cfg.seed})
    problems = frozen_audit(pre_ckpt, ckpt)
    (run_dir / "audit.json").write_text(json.dumps({"violations": problems}, indent=1))
    _write_run(run_dir, train_cfg, history, result, report)
    if problems:
        raise AuditError("frozen arrays changed: " + "; ".join(problems[:5]))
    log.info("adapt %s: target avg DSC %.3f, trainable %d", cfg.method, result.average, report.trainable)
    return ckpt, report


def load_eval(run_dir) -> DiceResult:
    return DiceResult.from_dict(json.loads((Path(run_dir) / "eval.json").read_text()))


def run_ablation(base: RunConfig, pretrained_checkpoint=None, seeds: Sequence[int] = (0, 1, 2),
                 extra_methods: Sequence[str] = ()) -> dict:
    """Run the seven cumulative toggle rows (plus ``extra_methods``) over ``seeds``.

    Returns ``{"rows": [{"name", "toggles", "method", "dsc": [...], "mean"}], ...}``
    and writes ablation.json under ``base.out_dir``.
    """
    root = Path(base.out_dir)
    rows = []
    plan = [(name, "svd", toggles) for name, toggles in ABLATION_ROWS]
    plan += [(m, m, {}) for m in extra_methods]
    for name, method, toggles in plan:
        scores = []
        for seed in seeds:
            cfg = base.replace(method=method, toggles=dict(toggles), seed=seed,
                               out_dir=str(root / name / f"seed{seed}"))
            adapt(cfg, pretrained_checkpoint)
            scores.append(load_eval(cfg.out_dir).average)
        rows.append({"name": name, "method": method, "toggles": toggles, "dsc": scores,
                     "mean": float(np.mean(scores))})
        log.info("ablation row %-10s mean DSC %.3f %s", name, rows[-1]["mean"], np.round(scores, 3))
    table = {"seeds": list(seeds), "rows": rows}
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.json").write_text(json.dumps(table, indent=1))
    return table
