"""Small differentiable classifiers.

Both models take float images in [0, 1], channels-first, and return class
logits. They exist to exercise every mechanism the perturbations interact
with (patch embedding, attention, class token) at CPU-feasible cost.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations after {where}")
    return x


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-LayerNorm transformer block with a GELU MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TinyViT(nn.Module):
    """Vision transformer scaled down to 32x32 inputs.

    Learned positional embeddings, class token, pre-LN blocks. Dropout is
    intentionally absent so forwards are deterministic and gradient checks
    stay clean.
    """

    def __init__(
        self,
        image_size: int = 32,
        patch_size: int = 4,
        in_channels: int = 3,
        embed_dim: int = 64,
        depth: int = 4,
        num_heads: int = 4,
        mlp_ratio: float = 2.0,
        num_classes: int = 10,
    ):
        super().__init__()
        if image_size % patch_size != 0:
            raise ValueError(f"image_size {image_size} not divisible by patch_size {patch_size}")
        self.arch = {
            "name": "tiny_vit",
            "image_size": image_size,
            "patch_size": patch_size,
            "in_channels": in_channels,
            "embed_dim": embed_dim,
            "depth": depth,
            "num_heads": num_heads,
            "mlp_ratio": mlp_ratio,
            "num_classes": num_classes,
        }
        num_patches = (image_size // patch_size) ** 2
        self.patch_embed = nn.Conv2d(in_channels, embed_dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, embed_dim))
        self.blocks = nn.ModuleList(Block(embed_dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(embed_dim, num_classes)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Conv2d):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        b = x.shape[0]
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        _check_finite(x, "patch_embed")
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for i, blk in enumerate(self.blocks):
            x = _check_finite(blk(x), f"blocks.{i}")
        return self.head(self.norm(x)[:, 0])


class MLP(nn.Module):
    """Flatten-and-stack ReLU classifier; the non-attention control model."""

    def __init__(
        self,
        image_size: int = 32,
        in_channels: int = 3,
        hidden_dims: tuple[int, ...] = (128, 128),
        num_classes: int = 10,
    ):
        super().__init__()
        self.arch = {
            "name": "mlp",
            "image_size": image_size,
            "in_channels": in_channels,
            "hidden_dims": tuple(hidden_dims),
            "num_classes": num_classes,
        }
        dims = [in_channels * image_size * image_size, *hidden_dims]
        layers = []
        for a, b in zip(dims, dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(dims[-1], num_classes)

    def forward(self, x):
        x = self.body(x.flatten(1))
        _check_finite(x, "body")
        return self.head(x)


def build_model(arch: dict) -> nn.Module:
    """Reconstruct a model from its architecture dict (checkpoint metadata)."""
    kind = arch.get("name")
    kwargs = {k: v for k, v in arch.items() if k != "name"}
    if kind == "tiny_vit":
        return TinyViT(**kwargs)
    if kind == "mlp":
        kwargs["hidden_dims"] = tuple(kwargs.get("hidden_dims", (128, 128)))
        return MLP(**kwargs)
    raise ValueError(f"unknown model architecture {kind!r}")


def forward_loss(model: nn.Module, images: torch.Tensor, labels: torch.Tensor):
    """Mean cross-entropy over the batch, plus the logits."""
    logits = model(images)
    loss = F.cross_entropy(logits, labels)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, logits


def input_gradient(model: nn.Module, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Gradient of the mean cross-entropy w.r.t. the input pixels."""
    x = images.detach().clone().requires_grad_(True)
    loss, _ = forward_loss(model, x, labels)
    (grad,) = torch.autograd.grad(loss, x)
    return grad.detach()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
