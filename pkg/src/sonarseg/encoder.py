"""Hierarchical convolutional ViT encoder.

Stem -> 4 x (patch merge -> transformer layers), no positional encoding.
Token sequences are (B, N, C); feature maps are (B, C, H, W).
"""
from __future__ import annotations

import torch
import torch.nn as nn

GN_EPS = 1e-5
LN_EPS = 1e-6
L1_EPS = 1e-6
MIN_SIDE = 32


def flatten(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    return x.flatten(2).transpose(1, 2)


def unflatten(x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """(B, H*W, C) -> (B, C, H, W)."""
    b, n, c = x.shape
    h, w = hw
    if h * w != n:
        raise ValueError(f"grid {h}x{w} does not match token count {n}")
    return x.transpose(1, 2).reshape(b, c, h, w)


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(1, channels, eps=GN_EPS)


def dw_conv(channels: int, dilation: int = 1) -> nn.Conv2d:
    return nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation, groups=channels)


def dw_stack(channels: int, depth: int) -> nn.Sequential:
    """`depth` stacked 3x3 depthwise convs, each followed by a one-group GN."""
    layers = []
    for _ in range(depth):
        layers += [dw_conv(channels), group_norm(channels)]
    return nn.Sequential(*layers)


class Stem(nn.Module):
    def __init__(self, embed_dim: int):
        super().__init__()
        if embed_dim % 2:
            raise ValueError("embed_dim must be even")
        self.conv = nn.Conv2d(1, embed_dim // 2, 7, stride=2, padding=3)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected a (B, 1, H, W) image, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % MIN_SIDE or w % MIN_SIDE:
            raise ValueError(f"input {h}x{w}: height and width must be multiples of {MIN_SIDE}")
        return self.conv(x)


class MultiScaleMerge(nn.Module):
    """Downsample x2 and double channels through four depthwise branches.

    Branches stack 1..4 depthwise 3x3 convs (receptive fields 3, 5, 7, 9).
    Branch outputs are summed, then hardswish -> avgpool -> pointwise to 2C.
    A pointwise + avgpool residual path is added on top.
    """

    depths = (1, 2, 3, 4)

    def __init__(self, in_ch: int, out_ch: int | None = None):
        super().__init__()
        out_ch = out_ch or 2 * in_ch
        self.branches = nn.ModuleList(dw_stack(in_ch, d) for d in self.depths)
        self.act = nn.Hardswish()
        self.pool = nn.AvgPool2d(2)
        self.proj = nn.Conv2d(in_ch, out_ch, 1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValueError(f"spatial dims must be even, got {tuple(x.shape[-2:])}")
        y = sum(branch(x) for branch in self.branches)
        y = self.proj(self.pool(self.act(y)))
        return y + self.pool(self.shortcut(x))


class ConvMerge(nn.Module):
    """Plain 3x3 stride-2 convolutional merge (vanilla baseline)."""

    def __init__(self, in_ch: int, out_ch: int | None = None):
        super().__init__()
        out_ch = out_ch or 2 * in_ch
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.norm = group_norm(out_ch)

    def forward(self, x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValueError(f"spatial dims must be even, got {tuple(x.shape[-2:])}")
        return self.norm(self.conv(x))


def l1_normalize_tokens(x: torch.Tensor, eps: float = L1_EPS) -> torch.Tensor:
    # normalizes every channel column over the token axis (dim -2)
    return x / (x.abs().sum(dim=-2, keepdim=True) + eps)


class SimXCA(nn.Module):
    """Cross-covariance attention with L1-normalized q/k and no softmax.

    Per head the attention matrix is d x d, so cost is linear in tokens.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def attention_matrix(self, q, k):
        return l1_normalize_tokens(q).transpose(-2, -1) @ l1_normalize_tokens(k)

    def forward(self, x):
        b, n, c = x.shape
        if n == 0:
            raise ValueError("empty token sequence")
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (B, h, N, d)
        out = v @ self.attention_matrix(q, k)
        out = out.transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


def simxca_macs(tokens: int, dim: int, heads: int) -> int:
    """Multiply-accumulate count of one SimXCA forward (batch 1)."""
    d = dim // heads
    qkv = tokens * dim * 3 * dim
    l1 = 2 * tokens * dim  # abs-sum plus divide, for q and k
    attn = heads * d * d * tokens  # q^T k per head
    apply = heads * tokens * d * d  # v @ A per head
    proj = tokens * dim * dim
    return qkv + l1 + attn + apply + proj


class GhostFFN(nn.Module):
    """Extended ghost-convolution feed-forward block.

    pointwise C->C primaries, then a 3x3 depthwise ghost branch and an
    effective 5x5 (two stacked 3x3) depthwise branch, concatenated to 2C,
    hardswish, pointwise 2C->C.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.primary = nn.Sequential(nn.Conv2d(dim, dim, 1), group_norm(dim))
        self.ghost = dw_stack(dim, 1)
        self.wide = dw_stack(dim, 2)
        self.act = nn.Hardswish()
        self.proj = nn.Conv2d(2 * dim, dim, 1)

    def forward(self, x, hw):
        if hw is None:
            raise ValueError("GhostFFN needs the token grid dims")
        y = self.primary(unflatten(x, hw))
        y = torch.cat([self.ghost(y), self.wide(y)], dim=1)
        return flatten(self.proj(self.act(y)))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 2):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x, hw=None):
        return self.fc2(self.act(self.fc1(x)))


class TransformerLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn: str = "ghost"):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = SimXCA(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        if ffn == "ghost":
            self.ffn = GhostFFN(dim)
        elif ffn == "mlp2":
            self.ffn = Mlp(dim, 2)
        else:
            raise ValueError(f"unknown ffn kind {ffn!r}")

    def forward(self, x, hw):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x), hw)


class Stage(nn.Module):
    def __init__(self, in_ch, dim, depth, heads, ffn="ghost", merge="multiscale"):
        super().__init__()
        merge_cls = {"multiscale": MultiScaleMerge, "conv3x3s2": ConvMerge}.get(merge)
        if merge_cls is None:
            raise ValueError(f"unknown merge kind {merge!r}")
        self.merge = merge_cls(in_ch, dim)
        self.layers = nn.ModuleList(TransformerLayer(dim, heads, ffn) for _ in range(depth))

    def forward(self, x):
        x = self.merge(x)
        hw = tuple(x.shape[-2:])
        t = flatten(x)
        for layer in self.layers:
            t = layer(t, hw)
        return unflatten(t, hw)


class Encoder(nn.Module):
    def __init__(self, embed_dim, depths, heads, ffn="ghost", merge="multiscale"):
        super().__init__()
        self.stem = Stem(embed_dim)
        widths = [embed_dim * 2**i for i in range(4)]
        in_widths = [embed_dim // 2] + widths[:-1]
        self.stages = nn.ModuleList(
            Stage(cin, c, d, h, ffn, merge)
            for cin, c, d, h in zip(in_widths, widths, depths, heads)
        )

    def forward(self, x) -> list[torch.Tensor]:
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
