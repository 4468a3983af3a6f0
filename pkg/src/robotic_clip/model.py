"""Frozen dual encoder, trainable RGBA adapter, and verb-token injection.

Images enter as ``(B, H, W, 4)`` arrays (RGB plus object alpha). The image
encoder follows the Alpha-CLIP layout (separate RGB and alpha patch
projections summed before the trunk); the adapter is a plain ViT whose single
patch projection consumes all four channels. Only adapter parameters are
trainable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ShapeMismatch
from .text import EOT_ID


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    vision_width: int = 64
    vision_layers: int = 2
    vision_heads: int = 4
    text_layers: int = 2
    text_heads: int = 4
    context_length: int = 16
    vocab_size: int = 512
    adapter_width: int = 64
    adapter_layers: int = 2
    adapter_heads: int = 4
    mlp_ratio: int = 4
    text_pooling: str = "mean"
    # init scale of positional embeddings; random encoders need a visible
    # position signal for frame-to-frame motion to register in the output
    pos_std: float = 0.5
    # weight gain inside the frozen image tower's blocks; >1 makes the random
    # stand-in encoder more input-sensitive
    image_block_gain: float = 2.0
    text_block_gain: float = 1.0
    # init scale of the adapter readout relative to 1/sqrt(width); the action
    # slot competes with the text residual stream, so a unit-scale output
    # barely moves the pooled prompt
    adapter_readout_gain: float = 4.0
    init_seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        for w, h in (
            (self.vision_width, self.vision_heads),
            (self.embed_dim, self.text_heads),
            (self.adapter_width, self.adapter_heads),
        ):
            if w % h:
                raise ValueError(f"width {w} not divisible by heads {h}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES = {
    "toy": ModelConfig(),
    # ViT-B/16 image tower, CLIP text tower, 12-layer adapter
    "full": ModelConfig(
        image_size=224,
        patch_size=16,
        embed_dim=512,
        vision_width=768,
        vision_layers=12,
        vision_heads=12,
        text_layers=12,
        text_heads=8,
        context_length=77,
        vocab_size=49408,
        adapter_width=768,
        adapter_layers=12,
        adapter_heads=12,
        pos_std=0.01,
    ),
}


def get_profile(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown model profile {name!r}; choose from {sorted(PROFILES)}") from None
    return replace(cfg, **overrides) if overrides else cfg


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, mask=None):
        B, N, W = x.shape
        hd = W // self.heads
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        if mask is not None:
            scores = scores + mask
        y = scores.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, N, W))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = nn.Linear(mlp_ratio * width, width)

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


def block_param_count(width: int, mlp_ratio: int = 4) -> int:
    return (4 + 2 * mlp_ratio) * width * width + (9 + mlp_ratio) * width


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """``(B, H, W, C)`` -> ``(B, num_patches, patch*patch*C)`` in row-major patch order."""
    B, H, W, C = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


# CLIP colour statistics; alpha uses the Alpha-CLIP constants
PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073, 0.5)
PIXEL_STD = (0.26862954, 0.26130258, 0.27577711, 0.26)


def normalize_pixels(images: torch.Tensor) -> torch.Tensor:
    mean = images.new_tensor(PIXEL_MEAN)
    std = images.new_tensor(PIXEL_STD)
    return (images - mean) / std


def _check_images(images: torch.Tensor, size: int) -> tuple[torch.Tensor, bool]:
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
    if images.dim() != 4 or tuple(images.shape[1:]) != (size, size, 4):
        raise ShapeMismatch(f"expected (B, {size}, {size}, 4) RGBA input, got {tuple(images.shape)}")
    return images, single


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        P, w = cfg.patch_size, cfg.vision_width
        self.cfg = cfg
        self.rgb_proj = nn.Linear(3 * P * P, w, bias=False)
        self.alpha_proj = nn.Linear(P * P, w, bias=False)
        self.cls = nn.Parameter(torch.zeros(w))
        self.pos = nn.Parameter(torch.zeros(cfg.num_patches + 1, w))
        self.ln_pre = nn.LayerNorm(w)
        self.blocks = nn.ModuleList(Block(w, cfg.vision_heads, cfg.mlp_ratio) for _ in range(cfg.vision_layers))
        self.ln_post = nn.LayerNorm(w)
        self.proj = nn.Linear(w, cfg.embed_dim, bias=False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        images, single = _check_images(images, self.cfg.image_size)
        P = self.cfg.patch_size
        images = normalize_pixels(images)
        x = self.rgb_proj(patchify(images[..., :3], P)) + self.alpha_proj(patchify(images[..., 3:], P))
        x = torch.cat([self.cls.expand(x.shape[0], 1, -1), x], dim=1) + self.pos
        x = self.ln_pre(x)
        for blk in self.blocks:
            x = blk(x)
        out = self.proj(self.ln_post(x[:, 0]))
        return out[0] if single else out


class TextEncoder(nn.Module):
    """Causal text transformer; mean-pools tokens up to end-of-text (or takes that token with ``text_pooling="eot"``)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.embed_dim
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, D)
        self.pos = nn.Parameter(torch.zeros(cfg.context_length, D))
        self.blocks = nn.ModuleList(Block(D, cfg.text_heads, cfg.mlp_ratio) for _ in range(cfg.text_layers))
        self.ln_final = nn.LayerNorm(D)
        self.proj = nn.Linear(D, D, bias=False)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(tokens)

    def forward(self, e: torch.Tensor, eot_index: torch.Tensor) -> torch.Tensor:
        """Encode token embeddings ``e`` of shape ``(B, L, D)``; ``eot_index`` is ``(B,)``."""
        B, L, D = e.shape
        if L > self.cfg.context_length or D != self.cfg.embed_dim:
            raise ShapeMismatch(f"token embeddings {tuple(e.shape)} exceed context or width")
        causal = torch.full((L, L), float("-inf"), dtype=e.dtype, device=e.device).triu(1)
        x = e + self.pos[:L]
        for blk in self.blocks:
            x = blk(x, causal)
        if self.cfg.text_pooling == "eot":
            pooled = x[torch.arange(B), eot_index]
        else:
            valid = (torch.arange(L, device=e.device) <= eot_index[:, None]).to(x.dtype)
            pooled = (x * valid[..., None]).sum(1) / valid.sum(1, keepdim=True)
        return self.proj(self.ln_final(pooled))


class Adapter(nn.Module):
    """ViT over RGBA frames with a four-channel patch projection and class-token readout."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        P, w = cfg.patch_size, cfg.adapter_width
        self.cfg = cfg
        self.patch_proj = nn.Linear(4 * P * P, w, bias=False)
        self.cls = nn.Parameter(torch.zeros(w))
        self.pos = nn.Parameter(torch.zeros(cfg.num_patches + 1, w))
        self.blocks = nn.ModuleList(Block(w, cfg.adapter_heads, cfg.mlp_ratio) for _ in range(cfg.adapter_layers))
        self.ln_post = nn.LayerNorm(w)
        self.readout = nn.Linear(w, cfg.embed_dim, bias=False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        images, single = _check_images(images, self.cfg.image_size)
        x = self.patch_proj(patchify(normalize_pixels(images), self.cfg.patch_size))
        x = torch.cat([self.cls.expand(x.shape[0], 1, -1), x], dim=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        out = self.readout(self.ln_post(x[:, 0]))
        return out[0] if single else out


def adapter_param_count(cfg: ModelConfig) -> int:
    P, w = cfg.patch_size, cfg.adapter_width
    return (
        4 * P * P * w
        + w
        + (cfg.num_patches + 1) * w
        + cfg.adapter_layers * block_param_count(w, cfg.mlp_ratio)
        + 2 * w
        + w * cfg.embed_dim
    )


def _init_weights(module: nn.Module, pos_std: float, block_gain: float = 1.0) -> None:
    in_blocks = {id(m) for blk in module.modules() if isinstance(blk, Block) for m in blk.modules()}
    for m in module.modules():
        if isinstance(m, nn.Linear):
            gain = block_gain if id(m) in in_blocks else 1.0
            nn.init.normal_(m.weight, std=gain * m.in_features ** -0.5)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=1.0)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for sub in module.modules():
        if hasattr(sub, "cls") and isinstance(sub.cls, nn.Parameter):
            nn.init.normal_(sub.cls, std=0.02)
        if hasattr(sub, "pos") and isinstance(sub.pos, nn.Parameter):
            nn.init.normal_(sub.pos, std=pos_std)


def inject_action(e: torch.Tensor, m: torch.Tensor, e_action: torch.Tensor) -> torch.Tensor:
    """Replace the rows of ``e`` flagged by the binary mask ``m`` with ``e_action``.

    Shapes: ``e`` ``(..., L, D)``, ``m`` ``(..., L)``, ``e_action`` ``(..., D)``.
    Equivalent to ``e * (1 - m) + e_action * m`` for binary ``m``, but unmasked
    rows are passed through bit-exact even if ``e_action`` is non-finite.
    """
    if e.shape[:-1] != m.shape or e.shape[-1] != e_action.shape[-1] or e.shape[:-2] != e_action.shape[:-1]:
        raise ShapeMismatch(
            f"inject_action shapes disagree: e={tuple(e.shape)} m={tuple(m.shape)} e_action={tuple(e_action.shape)}"
        )
    sel = (m != 0).unsqueeze(-1)
    return torch.where(sel, e_action.unsqueeze(-2).expand_as(e), e)


class DualEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image = ImageEncoder(cfg)
        self.text = TextEncoder(cfg)


class RoboticClip(nn.Module):
    """Frozen encoders plus the adapter that writes a frame-pair action embedding into verb slots."""

    def __init__(self, cfg: ModelConfig | None = None, adapter_seed: int | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        try:
            torch.manual_seed(cfg.init_seed)
            self.encoder = DualEncoder(cfg)
            _init_weights(self.encoder.image, cfg.pos_std, cfg.image_block_gain)
            _init_weights(self.encoder.text, cfg.pos_std, cfg.text_block_gain)
            torch.manual_seed(cfg.init_seed + 1 if adapter_seed is None else adapter_seed)
            self.adapter = Adapter(cfg)
            _init_weights(self.adapter, 0.02)
            with torch.no_grad():
                self.adapter.readout.weight.mul_(cfg.adapter_readout_gain)
        finally:
            torch.random.set_rng_state(gen_state)
        self.encoder.requires_grad_(False)
        self.encoder.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self.encoder.eval()
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.adapter.parameters()]

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.encoder.image(images)

    def action_embedding(self, frames1: torch.Tensor, frames2: torch.Tensor) -> torch.Tensor:
        if frames1.shape != frames2.shape:
            raise ShapeMismatch(f"frame shapes differ: {tuple(frames1.shape)} vs {tuple(frames2.shape)}")
        return (self.adapter(frames1) + self.adapter(frames2)) / 2

    def encode_prompt_with_action(
        self, tokens: torch.Tensor, action_mask: torch.Tensor, e_action: torch.Tensor | None
    ) -> torch.Tensor:
        single = tokens.dim() == 1
        if single:
            tokens, action_mask = tokens.unsqueeze(0), action_mask.unsqueeze(0)
            if e_action is not None:
                e_action = e_action.unsqueeze(0)
        e = self.encoder.text.embed(tokens)
        if e_action is not None:
            e = inject_action(e, action_mask.to(e.dtype), e_action.to(e.dtype))
        p = self.encoder.text(e, eot_positions(tokens))
        return p[0] if single else p

    def encode_prompt(self, tokens: torch.Tensor) -> torch.Tensor:
        """Plain frozen text encoding, no injection."""
        with torch.no_grad():
            return self.encode_prompt_with_action(tokens, torch.zeros_like(tokens), None)

    def forward(self, images1, images2, tokens, action_mask):
        """Return ``(v1, v2, p)`` for a batch of frame pairs and prompts."""
        v1 = self.encode_image(images1)
        v2 = self.encode_image(images2)
        e_action = self.action_embedding(images1, images2)
        p = self.encode_prompt_with_action(tokens, action_mask, e_action)
        return v1, v2, p


def eot_positions(tokens: torch.Tensor) -> torch.Tensor:
    """Index of the first end-of-text token in each row (last column if absent)."""
    is_eot = tokens == EOT_ID
    idx = torch.where(is_eot.any(dim=-1), is_eot.int().argmax(dim=-1), torch.full_like(tokens[..., 0], tokens.shape[-1] - 1))
    return idx


def to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)
