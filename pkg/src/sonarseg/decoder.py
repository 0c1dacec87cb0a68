"""Additive-fusion decoder with two dilated depthwise (ASPP-style) auxiliary blocks."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import dw_conv, group_norm

DILATIONS = (1, 2, 4, 8)


def resize(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ASPP(nn.Module):
    """pointwise C'->C, four dilated 3x3 depthwise branches + GN, concat, hardswish, pointwise 4C->C."""

    def __init__(self, in_ch: int, dim: int, dilations=DILATIONS):
        super().__init__()
        self.inp = nn.Conv2d(in_ch, dim, 1)
        self.branches = nn.ModuleList(
            nn.Sequential(dw_conv(dim, r), group_norm(dim)) for r in dilations
        )
        self.act = nn.Hardswish()
        self.out = nn.Conv2d(len(dilations) * dim, dim, 1)

    def forward(self, x):
        x = self.inp(x)
        x = torch.cat([b(x) for b in self.branches], dim=1)
        return self.out(self.act(x))


class Decoder(nn.Module):
    def __init__(self, embed_dim, num_classes, aux_aspp=True, dilations=DILATIONS):
        super().__init__()
        widths = [embed_dim * 2**i for i in range(4)]
        self.lateral = nn.ModuleList(nn.Conv2d(w, embed_dim, 1) for w in widths)
        self.fuse = nn.Conv2d(embed_dim, embed_dim, 1)
        self.aux_aspp = aux_aspp
        if aux_aspp:
            self.aux = nn.ModuleList(ASPP(widths[i], embed_dim, dilations) for i in (1, 2))
        n_in = 3 * embed_dim if aux_aspp else embed_dim
        self.classifier = nn.Conv2d(n_in, num_classes, 1)
        self.widths = widths

    def fuse_stages(self, feats):
        self._check(feats)
        size = feats[0].shape[-2:]
        fused = sum(resize(proj(f), size) for proj, f in zip(self.lateral, feats))
        return self.fuse(fused)

    def _check(self, feats):
        if len(feats) != 4:
            raise ValueError(f"expected 4 stage maps, got {len(feats)}")
        b, _, h, w = feats[0].shape
        for i, f in enumerate(feats):
            want = (b, self.widths[i], h >> i, w >> i)
            if tuple(f.shape) != want:
                raise ValueError(f"stage {i + 1} has shape {tuple(f.shape)}, expected {want}")

    def forward(self, feats, out_size=None):
        x = self.fuse_stages(feats)
        size = x.shape[-2:]
        if self.aux_aspp:
            aux = [resize(block(feats[i]), size) for block, i in zip(self.aux, (1, 2))]
            x = torch.cat([x, *aux], dim=1)
        logits = self.classifier(x)
        if out_size is None:
            out_size = (4 * size[0], 4 * size[1])
        return resize(logits, out_size)
