"""A small promptable segmentation model with SAM's layout.

Image encoder (patch embed + learnable position grid + pre-norm ViT blocks),
a prompt encoder fed by text embeddings, and a two-way attention mask
decoder with a hypernetwork head. Sizes are desk scale.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .svd_adapter import SVDLinear, decompose
from .text import TextAffineLayer, TextEmbedder


class ConfigError(ValueError):
    pass


class PoolingRatioError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    patch_size: int = 16
    in_chans: int = 3
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    mlp_hidden: int = 512
    prompt_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    decoder_mlp_dim: int = 2048
    attn_downsample: int = 2
    text_seed: int = 0

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> "ModelConfig":
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name != "text_seed" and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads or self.embed_dim % self.decoder_heads:
            raise ConfigError("embed_dim must be divisible by num_heads and decoder_heads")
        if self.embed_dim % 8:
            raise ConfigError("embed_dim must be a multiple of 8 (mask upscaling uses embed_dim // 8 channels)")
        if (self.embed_dim // self.attn_downsample) % self.decoder_heads:
            raise ConfigError("embed_dim // attn_downsample must be divisible by decoder_heads")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- encoder


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.num_heads, D // self.num_heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(B, T, D))


class MLPBlock(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.lin2(F.gelu(self.lin1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, mlp_hidden)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.patch_size = cfg.patch_size
        g = cfg.grid_size
        self.patch_embed = nn.Conv2d(cfg.in_chans, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, g, g, cfg.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_hidden) for _ in range(cfg.depth))
        self.neck_norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, G, G, D)."""
        if images.ndim != 4 or images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected images of shape (B, C, {self.image_size}, {self.image_size}), got {tuple(images.shape)}")
        x = self.patch_embed(images).permute(0, 2, 3, 1)
        B, G, _, D = x.shape
        x = x + self.pos_embed
        x = x.reshape(B, G * G, D)
        for blk in self.blocks:
            x = blk(x)
        return self.neck_norm(x).reshape(B, G, G, D)


# --------------------------------------------------------------------------- prompt + decoder


class PromptEncoder(nn.Module):
    """Maps a text embedding to one decoder token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Sequential(nn.Linear(cfg.prompt_dim, cfg.embed_dim), nn.GELU(),
                                  nn.Linear(cfg.embed_dim, cfg.embed_dim))

    def forward(self, prompt_embedding: torch.Tensor) -> torch.Tensor:
        return self.proj(prompt_embedding).unsqueeze(1)


class PositionEmbeddingRandom(nn.Module):
    """Random Fourier features over normalized grid coordinates (size agnostic)."""

    def __init__(self, num_feats: int):
        super().__init__()
        self.register_buffer("gaussian", torch.randn(2, num_feats))

    def forward(self, g: int) -> torch.Tensor:
        c = (torch.arange(g, dtype=self.gaussian.dtype, device=self.gaussian.device) + 0.5) / g
        yy, xx = torch.meshgrid(c, c, indexing="ij")
        coords = torch.stack([xx, yy], dim=-1) * 2 - 1
        coords = 2 * math.pi * (coords @ self.gaussian)
        return torch.cat([torch.sin(coords), torch.cos(coords)], dim=-1).permute(2, 0, 1)  # D, G, G


class DecoderAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, downsample: int = 1):
        super().__init__()
        inner = dim // downsample
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, inner)
        self.k_proj = nn.Linear(dim, inner)
        self.v_proj = nn.Linear(dim, inner)
        self.out_proj = nn.Linear(inner, dim)

    def _split(self, x):
        B, N, C = x.shape
        return x.reshape(B, N, self.num_heads, C // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        out = F.scaled_dot_product_attention(q, k, v)
        B, H, N, c = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(B, N, H * c))


class TwoWayBlock(nn.Module):
    def __init__(self, dim, heads, mlp_dim, downsample, skip_first_pe):
        super().__init__()
        self.self_attn = DecoderAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = DecoderAttention(dim, heads, downsample)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.ReLU(), nn.Linear(mlp_dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = DecoderAttention(dim, heads, downsample)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.cross_t2i(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.cross_i2t(k, q, queries))
        return queries, keys


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


def presence_gate(mask_logits: torch.Tensor, presence_logits: torch.Tensor) -> torch.Tensor:
    """Logit of sigmoid(mask) * sigmoid(presence), computed in log space.

    A pixel is foreground only if the prompted class is present and the pixel
    belongs to it; a confident "absent" score blanks the whole map.
    """
    s = presence_logits.reshape(-1, *([1] * (mask_logits.ndim - 1)))
    log_p = (F.logsigmoid(mask_logits) + F.logsigmoid(s)).clamp(max=-1e-30)
    return log_p - torch.log(-torch.expm1(log_p))


class MaskDecoder(nn.Module):
    """Two-way token/image attention followed by a hypernetwork mask head.

    Returns mask logits at 4x the embedding grid and one presence logit per
    query; the caller upsamples and gates with :func:`presence_gate`.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.presence_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.pe = PositionEmbeddingRandom(d // 2)
        self.layers = nn.ModuleList(
            TwoWayBlock(d, cfg.decoder_heads, cfg.decoder_mlp_dim, cfg.attn_downsample, skip_first_pe=(i == 0))
            for i in range(cfg.decoder_depth)
        )
        self.final_attn = DecoderAttention(d, cfg.decoder_heads, cfg.attn_downsample)
        self.norm_final = nn.LayerNorm(d)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(d, d // 4, 2, stride=2), LayerNorm2d(d // 4), nn.GELU(),
            nn.ConvTranspose2d(d // 4, d // 8, 2, stride=2), nn.GELU(),
        )
        self.hyper = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d // 8))
        self.presence_head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, 1))

    def forward(self, image_embedding: torch.Tensor, prompt_tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        B, G, _, D = image_embedding.shape
        tokens = torch.cat([self.presence_token.expand(B, -1, -1), self.mask_token.expand(B, -1, -1), prompt_tokens],
                           dim=1)
        keys = image_embedding.reshape(B, G * G, D)
        key_pe = self.pe(G).flatten(1).transpose(0, 1).unsqueeze(0)
        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        q, k = queries + tokens, keys + key_pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))
        src = keys.transpose(1, 2).reshape(B, D, G, G)
        up = self.upscale(src)
        weights = self.hyper(queries[:, 1])
        b, c, h, w = up.shape
        masks = (weights.unsqueeze(1) @ up.reshape(b, c, h * w)).reshape(b, h, w)
        return masks, self.presence_head(queries[:, 0]).squeeze(-1)


# --------------------------------------------------------------------------- full model


class PromptSegModel(nn.Module):
    """Image + label-name prompt -> mask logits at input resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.mask_decoder = MaskDecoder(cfg)
        self.tal = TextAffineLayer(cfg.prompt_dim)
        self.text_embedder = TextEmbedder(cfg.prompt_dim, seed=cfg.text_seed)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(images)

    def embed_prompts(self, labels: Sequence[str], bypass_tal: bool = False) -> torch.Tensor:
        p = self.tal.weight
        e = self.text_embedder.embed(list(labels), dtype=p.dtype).to(p.device)
        return e if bypass_tal else self.tal(e)

    def decode(self, image_embedding: torch.Tensor, prompt_embedding: torch.Tensor) -> torch.Tensor:
        """Mask logits at input resolution from an encoded image batch (B, G, G, D)."""
        logits, presence = self.mask_decoder(image_embedding, self.prompt_encoder(prompt_embedding))
        size = self.image_encoder.image_size
        logits = F.interpolate(logits.unsqueeze(1), size=(size, size), mode="bilinear", align_corners=False)
        return presence_gate(logits.squeeze(1), presence)

    def predict_mask(self, images: torch.Tensor, prompt_embedding: torch.Tensor) -> torch.Tensor:
        """Mask logits (B, H, W); foreground where logits > 0."""
        return self.decode(self.encode_image(images), prompt_embedding)

    def forward(self, images: torch.Tensor, labels: Sequence[str], bypass_tal: bool = False) -> torch.Tensor:
        return self.predict_mask(images, self.embed_prompts(labels, bypass_tal))


def build_pretrained(config: ModelConfig | None = None, seed: int = 0, checkpoint=None) -> PromptSegModel:
    """Build the stand-in pretrained model.

    With ``checkpoint`` (a path or loaded checkpoint dict) the weights are
    restored from it; otherwise the model is freshly initialized from ``seed``.
    """
    if checkpoint is not None:
        from .checkpoint import load_model
        return load_model(checkpoint)
    config = (config or ModelConfig()).validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PromptSegModel(config)
    return model


def encode_image(model: PromptSegModel, images: torch.Tensor) -> torch.Tensor:
    return model.encode_image(images)


def predict_mask(model: PromptSegModel, images: torch.Tensor, prompt_embedding: torch.Tensor) -> torch.Tensor:
    return model.predict_mask(images, prompt_embedding)


# --------------------------------------------------------------------------- adaptation wiring

ADAPTED_LINEARS = ("attn.qkv", "attn.proj", "mlp.lin1", "mlp.lin2")
CORE_LINEARS = ("attn.qkv", "mlp.lin1", "mlp.lin2")


def pool_pos_embed(grid: torch.Tensor, target: int) -> torch.Tensor:
    """Average-pool a (G, G, D) or (1, G, G, D) grid down to (…, target, target, D)."""
    squeeze = grid.ndim == 3
    g = grid.unsqueeze(0) if squeeze else grid
    src = g.shape[1]
    if target < 1 or target > src or src % target:
        raise PoolingRatioError(f"cannot average-pool a {src}x{src} grid to {target}x{target}: ratio must be an integer")
    ratio = src // target
    out = F.avg_pool2d(g.permute(0, 3, 1, 2), kernel_size=ratio, stride=ratio).permute(0, 2, 3, 1).contiguous()
    return out[0] if squeeze else out


def encoder_linears(model: PromptSegModel, names: Sequence[str] = ADAPTED_LINEARS) -> Iterator[Tuple[str, nn.Module]]:
    """Yield (qualified name, module) for the encoder's adaptable matrices."""
    for i, blk in enumerate(model.image_encoder.blocks):
        for n in names:
            yield f"image_encoder.blocks.{i}.{n}", blk.get_submodule(n)


def replace_module(root: nn.Module, qualified: str, new: nn.Module) -> None:
    parent_name, _, child = qualified.rpartition(".")
    setattr(root.get_submodule(parent_name) if parent_name else root, child, new)


def encoder_layernorms(model: PromptSegModel) -> list[nn.LayerNorm]:
    return [m for m in model.image_encoder.modules() if isinstance(m, nn.LayerNorm)]


def resize_image_size(model: PromptSegModel, target_image_size: int) -> None:
    cfg = model.config
    if target_image_size % cfg.patch_size:
        raise ConfigError(f"target image size {target_image_size} not divisible by patch size {cfg.patch_size}")
    g_tgt = target_image_size // cfg.patch_size
    enc = model.image_encoder
    if g_tgt != enc.pos_embed.shape[1]:
        with torch.no_grad():
            pooled = pool_pos_embed(enc.pos_embed.detach(), g_tgt)
        enc.pos_embed = nn.Parameter(pooled)
    enc.image_size = target_image_size
    model.config = dataclasses.replace(cfg, image_size=target_image_size)


def freeze_all(model: nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


def adapt_spectral(
    model: PromptSegModel,
    target_image_size: Optional[int] = None,
    *,
    pos_embed: bool = True,
    layernorm: bool = True,
    tal: bool = True,
    scale: bool = True,
    shift: bool = True,
    include_attn_proj: bool = True,
    train_bias: bool = False,
) -> PromptSegModel:
    """Return a copy of ``model`` wired for singular-value tuning.

    Every encoder block matrix becomes an identity-initialized
    :class:`SVDLinear`; the position grid is average-pooled to the target
    size; all else is frozen. The keyword toggles choose which groups train.
    ``include_attn_proj=False`` leaves the attention output projection as a
    frozen dense layer. With both ``scale`` and ``shift`` off no matrix is
    decomposed, so the frozen weights stay bit-identical to ``model``.
    """
    model = copy.deepcopy(model)
    if target_image_size is not None:
        resize_image_size(model, target_image_size)
    freeze_all(model)
    names = ADAPTED_LINEARS if include_attn_proj else CORE_LINEARS
    # identity adapters that cannot train are the identity map: keep the dense layers
    if not (scale or shift):
        names = ()
    for qualified, lin in list(encoder_linears(model, names)):
        adapter = decompose(lin.weight, lin.bias, name=qualified)
        adapter.scale.requires_grad_(scale)
        adapter.shift.requires_grad_(shift)
        if train_bias:
            adapter.unfreeze_bias()
        replace_module(model, qualified, adapter)
    model.image_encoder.pos_embed.requires_grad_(pos_embed)
    for ln in encoder_layernorms(model):
        ln.requires_grad_(layernorm)
    model.tal.requires_grad_(tal)
    return model


def merge_adapters(model: PromptSegModel) -> PromptSegModel:
    """Copy of ``model`` with every adapter folded back into a dense nn.Linear."""
    model = copy.deepcopy(model)
    for name, module in list(model.named_modules()):
        if hasattr(module, "to_linear"):
            replace_module(model, name, module.to_linear())
    return model
