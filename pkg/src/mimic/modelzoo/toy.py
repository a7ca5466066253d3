"""Desk-scale stand-ins for the frozen VLM components.

All modules take batched inputs. Parameters are drawn from a seeded
``torch.Generator`` in declaration order, so construction does not depend on
the global RNG state.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class Block(nn.Module):
    """Pre-norm transformer block. Returns the residual stream and the MLP output."""

    def __init__(self, width, heads=4, mlp_ratio=4, causal=False):
        super().__init__()
        self.heads = heads
        self.causal = causal
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = nn.Linear(mlp_ratio * width, width)

    def attention(self, x):
        b, t, w = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (z.view(b, t, self.heads, w // self.heads).transpose(1, 2) for z in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(w // self.heads)
        if self.causal:
            mask = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, t, w))

    def forward(self, x):
        x = x + self.attention(self.ln1(x))
        mlp = self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x + mlp, mlp


class ToyViT(nn.Module):
    """Patch-token ViT with one prepended CLS token.

    Tap ids: 0 is the patch embedding (after positional embedding), 1..depth
    are the MLP outputs of each block, depth+1 is the final LayerNorm. Taps
    hold patch tokens only.
    """

    def __init__(self, image_size=32, patch_size=4, width=64, depth=4, heads=4, channels=3,
                 input_mean=None, input_std=None):
        super().__init__()
        if image_size % patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        self.width = width
        self.depth = depth
        self.num_patches = (image_size // patch_size) ** 2
        self.patch_embed = nn.Conv2d(channels, width, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, width))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches + 1, width))
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(depth))
        self.ln_f = nn.LayerNorm(width)
        # affine pre-layer; identity unless dataset normalization is configured
        mean = torch.zeros(channels) if input_mean is None else torch.as_tensor(input_mean, dtype=torch.float32)
        std = torch.ones(channels) if input_std is None else torch.as_tensor(input_std, dtype=torch.float32)
        self.register_buffer("input_mean", mean.view(1, channels, 1, 1).clone())
        self.register_buffer("input_std", std.view(1, channels, 1, 1).clone())

    @property
    def input_shape(self):
        return (self.channels, self.image_size, self.image_size)

    @property
    def tap_ids(self):
        return tuple(range(self.depth + 2))

    def forward(self, images, taps=None):
        """Return (final patch tokens B×D×Ω, CLS token B×Ω, {tap: B×D×Ω})."""
        taps = set(self.tap_ids if taps is None else taps)
        x = (images - self.input_mean) / self.input_std
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        acts = {}
        if 0 in taps:
            acts[0] = x[:, 1:]
        for i, block in enumerate(self.blocks, start=1):
            x, mlp = block(x)
            if i in taps:
                acts[i] = mlp[:, 1:]
        x = self.ln_f(x)
        if self.depth + 1 in taps:
            acts[self.depth + 1] = x[:, 1:]
        return x[:, 1:], x[:, 0], acts


class ToyCausalLM(nn.Module):
    """Causal transformer over embedding sequences, with an image-token projector."""

    def __init__(self, vocab_size=512, width=64, depth=4, heads=4, vision_width=64, max_len=512):
        super().__init__()
        self.vocab_size = vocab_size
        self.width = width
        self.max_len = max_len
        self.token_embed = nn.Embedding(vocab_size, width)
        self.mm_projector = nn.Linear(vision_width, width)
        self.pos_embed = nn.Parameter(torch.zeros(1, max_len, width))
        self.blocks = nn.ModuleList(Block(width, heads, causal=True) for _ in range(depth))
        self.ln_f = nn.LayerNorm(width)
        self.head = nn.Linear(width, vocab_size)

    def embed_tokens(self, ids):
        return self.token_embed(ids)

    def project_image(self, tokens):
        return self.mm_projector(tokens)

    def forward(self, embeddings, image_span=None):
        t = embeddings.shape[1]
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.max_len}")
        x = embeddings + self.pos_embed[:, :t]
        for block in self.blocks:
            x, _ = block(x)
        return self.head(self.ln_f(x))


class ToyVerifierCNN(nn.Module):
    """Three conv->BN->ReLU stages, global average pool, linear head."""

    def __init__(self, channels=3, widths=(16, 32, 32), num_classes=3):
        super().__init__()
        convs, bns = [], []
        c_in = channels
        for i, c_out in enumerate(widths):
            convs.append(nn.Conv2d(c_in, c_out, 3, stride=1 if i == 0 else 2, padding=1))
            bns.append(nn.BatchNorm2d(c_out))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.bns = nn.ModuleList(bns)
        self.head = nn.Linear(c_in, num_classes)
        self.num_classes = num_classes

    def forward(self, images, with_stats=False):
        """Return (logits, pooled features, per-stage maps, BN-input batch stats)."""
        x = images
        maps, stats = [], []
        for conv, bn in zip(self.convs, self.bns):
            x = conv(x)
            if with_stats:
                stats.append((x.mean(dim=(0, 2, 3)), x.var(dim=(0, 2, 3), unbiased=False)))
            x = F.relu(bn(x))
            maps.append(x)
        feats = x.mean(dim=(2, 3))
        return self.head(feats), feats, maps, stats


class ToyClassifier(nn.Module):
    """ToyViT backbone with a linear head on the CLS token."""

    def __init__(self, num_classes=3, **vit_kwargs):
        super().__init__()
        self.backbone = ToyViT(**vit_kwargs)
        self.head = nn.Linear(self.backbone.width, num_classes)
        self.num_classes = num_classes

    def forward(self, images):
        _, cls, _ = self.backbone(images, taps=())
        return self.head(cls)


@torch.no_grad()
def gaussian_init_(module: nn.Module, generator: torch.Generator, embed_std=0.02):
    """Seeded Gaussian init in declaration order.

    Weight matrices and kernels get N(0, 1/fan_in); embeddings and CLS/position
    vectors N(0, embed_std^2); biases zero; norm scales one.
    """
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
        if isinstance(owner, (nn.LayerNorm, nn.BatchNorm2d)):
            p.fill_(1.0 if leaf == "weight" else 0.0)
        elif leaf == "bias":
            p.zero_()
        elif isinstance(owner, nn.Embedding) or p.dim() <= 3 and leaf in ("cls_token", "pos_embed"):
            p.copy_(torch.randn(p.shape, generator=generator) * embed_std)
        else:
            fan_in = p[0].numel()
            p.copy_(torch.randn(p.shape, generator=generator) / math.sqrt(fan_in))
    return module
