"""Block-level gradient checks plus the structural invariant suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import generate_synthetic_waterfall, stitch_masks, tile_waterfall
from .encoder import GhostFFN, Mlp, MultiScaleMerge, SimXCA
from .gradcheck import BLOCKS, gradient_check
from .model import PRESETS, REFERENCE_PARAMS, ablation_ladder, build_model, count_parameters
from .training import poly_lr


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


def n_params(module, include_norm=True):
    total = 0
    for mod in module.modules():
        if not include_norm and isinstance(mod, (torch.nn.GroupNorm, torch.nn.LayerNorm)):
            continue
        total += sum(p.numel() for p in mod.parameters(recurse=False))
    return total


def ghost_vs_mlp(width):
    """(ghost FFN params without norm affines, 2x-MLP params)."""
    return n_params(GhostFFN(width), include_norm=False), n_params(Mlp(width, 2))


def merge_vs_conv(width):
    """(multiscale merge params, plain 3x3 stride-2 conv params) for width -> 2*width."""
    conv = 9 * width * 2 * width + 2 * width
    return n_params(MultiScaleMerge(width)), conv


def stage_widths():
    return sorted({w for cfg in PRESETS.values() for w in cfg.widths})


def merge_widths():
    return sorted({w // 2 for cfg in PRESETS.values() for w in cfg.widths})


def within(count, reference_m, tol=0.10):
    return abs(count - reference_m * 1e6) <= tol * reference_m * 1e6


def parameter_checks():
    checks = []
    counts = {}
    for name, ref in REFERENCE_PARAMS.items():
        counts[name] = count_parameters(build_model(name))
        checks.append(Check(f"params {name} ~ {ref}M", within(counts[name], ref), f"{counts[name]:,}"))
    order = ["ours-dagger", "ours-ddagger2", "ours-ddagger", "ours"]
    checks.append(Check("params ordering presets", all(counts[a] < counts[b] for a, b in zip(order, order[1:]))))
    ladder = [(n, count_parameters(build_model(c)), r) for n, c, r in ablation_ladder()]
    for n, c, r in ladder:
        checks.append(Check(f"params ablation {n} ~ {r}M", within(c, r), f"{c:,}"))
    c = [x[1] for x in ladder]
    checks.append(Check("params ordering ablation", c[0] > c[1] > c[2] and c[2] < c[3]))
    return checks


def invariant_checks(sizes=(256, 512)):
    checks = []
    gen = torch.Generator().manual_seed(0)

    attn = SimXCA(24, 2).double()
    q = torch.randn(1, 2, 64, 12, generator=gen, dtype=torch.float64)
    k = torch.randn(1, 2, 64, 12, generator=gen, dtype=torch.float64)
    drift = (attn.attention_matrix(3.7 * q, 0.21 * k) - attn.attention_matrix(q, k)).abs().max().item()
    checks.append(Check("simxca scale invariance", drift <= 1e-6, f"drift {drift:.2e}"))

    x = torch.randn(2, 50, 24, generator=gen, dtype=torch.float64)
    perm = torch.randperm(50, generator=gen)
    with torch.no_grad():
        err = (attn(x[:, perm]) - attn(x)[:, perm]).abs().max().item()
    checks.append(Check("simxca permutation equivariance", err <= 1e-5, f"err {err:.2e}"))

    for name in PRESETS:
        model = build_model(name)
        cfg = model.config
        for s in sizes:
            with torch.inference_mode():
                feats = model.encoder(torch.zeros(1, 1, s, s))
            got = [tuple(f.shape) for f in feats]
            want = [(1, w, s >> (i + 2), s >> (i + 2)) for i, w in enumerate(cfg.widths)]
            checks.append(Check(f"shape ladder {name} @{s}", got == want, str(got)))

    for w in stage_widths():
        g, m = ghost_vs_mlp(w)
        checks.append(Check(f"ghost FFN < MLP x2 @C'={w}", g < m, f"{g} vs {m}"))
    for w in merge_widths():
        if w < 12:
            continue
        p, c = merge_vs_conv(w)
        checks.append(Check(f"patch merge < 3x3 s2 conv @C'={w}", p < c, f"{p} vs {c}"))

    wf, mask = generate_synthetic_waterfall(600, 384, seed=3)
    tiles = [(m, o) for _, m, o in tile_waterfall(wf, mask)]
    same = np.array_equal(stitch_masks(tiles, mask.shape), mask)
    checks.append(Check("tile -> stitch round trip", same))

    lr = (poly_lr(0, 100, 10, 6e-5), poly_lr(10, 100, 10, 6e-5), poly_lr(100, 100, 10, 6e-5))
    checks.append(Check("poly_lr boundaries", lr == (0.0, 6e-5, 0.0), str(lr)))
    return checks


def gradient_checks(tolerance=1e-3):
    out = []
    for block in BLOCKS:
        kw = {"samples": 4, "max_tensors": 48} if block == "full_model" else {}
        rep = gradient_check(block, tolerance=tolerance, **kw)
        out.append(Check(f"gradcheck {block}", rep["passed"],
                         f"max rel err {rep['max_rel_err']:.2e} ({rep['worst_tensor']}), "
                         f"{rep['tensors_checked']} tensors, {rep['kinks_skipped']} kinks skipped"))
    return out


def run_all(tolerance=1e-3):
    return gradient_checks(tolerance) + parameter_checks() + invariant_checks()
