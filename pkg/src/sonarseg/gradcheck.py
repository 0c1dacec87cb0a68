"""Central finite-difference gradient checks for the custom blocks."""
from __future__ import annotations

import torch

from .decoder import ASPP
from .encoder import GhostFFN, MultiScaleMerge, SimXCA
from .model import ModelConfig, SegModel, init_weights

BLOCKS = ("simxca", "ghost_ffn", "patch_merge", "aspp", "full_model")


def _randomize(module, gen):
    # perturb norm affines and biases away from ones/zeros so they are exercised
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data.normal_(0.0, 0.1, generator=gen)
        elif p.ndim == 1:
            p.data.uniform_(0.5, 1.5, generator=gen)


def make_block(block_id, dim=8, heads=2, grid=(4, 4), seed=0):
    """Returns (module, inputs tuple, forward callable) in float64."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    h, w = grid
    if block_id == "simxca":
        m = SimXCA(dim, heads)
        x = torch.randn(1, h * w, dim, generator=gen)
        fn = m
    elif block_id == "ghost_ffn":
        m = GhostFFN(dim)
        x = torch.randn(1, h * w, dim, generator=gen)
        fn = lambda t: m(t, grid)  # noqa: E731
    elif block_id == "patch_merge":
        m = MultiScaleMerge(dim)
        x = torch.randn(1, dim, h, w, generator=gen)
        fn = m
    elif block_id == "aspp":
        m = ASPP(dim, dim)
        x = torch.randn(1, dim, h, w, generator=gen)
        fn = m
    elif block_id == "full_model":
        cfg = ModelConfig(embed_dim=dim, depths=(2, 2, 2, 2), heads=(1, 2, 4, 8))
        m = SegModel(cfg)
        m.apply(init_weights)
        x = torch.rand(1, 1, 64, 64, generator=gen)  # stage 4 keeps 2x2 tokens
        fn = m
    else:
        raise ValueError(f"unknown block {block_id!r}; choose from {', '.join(BLOCKS)}")
    _randomize(m, gen)
    m.double()
    return m, x.double(), fn


def gradient_check(block_id, tolerance=1e-3, step=1e-4, samples=12, max_tensors=None, seed=0, **block_kw):
    """Compare autograd gradients with central differences on sampled coordinates.

    The scalar objective is <output, R> for a fixed random R. The error of a
    tensor is ||analytic - numeric|| / max(||analytic||, ||numeric||) over its
    sampled coordinates; the report keeps the max over all tensors.

    |x| (L1 norm) and hardswish are only piecewise smooth. A coordinate whose
    central difference disagrees is re-probed at step/2: a real gradient error
    leaves both probes in agreement with each other, while a kink inside the
    stencil makes them differ. Such coordinates are dropped and counted.
    """
    module, x, fn = make_block(block_id, seed=seed, **block_kw)
    x.requires_grad_(True)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        proj = torch.randn(fn(x).shape, generator=gen, dtype=torch.float64)

    def objective():
        return (fn(x) * proj).sum().item()

    module.zero_grad()
    (fn(x) * proj).sum().backward()
    tensors = [("input", x)] + [(n, p) for n, p in module.named_parameters()]
    if max_tensors is not None and len(tensors) > max_tensors:
        keep = torch.randperm(len(tensors) - 1, generator=gen)[:max_tensors - 1]
        tensors = [tensors[0]] + [tensors[1 + i] for i in sorted(keep.tolist())]
    analytic = {n: t.grad.detach().clone() for n, t in tensors}

    def central(flat, i, h):
        orig = flat[i].item()
        flat[i] = orig + h
        up = objective()
        flat[i] = orig - h
        down = objective()
        flat[i] = orig
        return (up - down) / (2 * h)

    errors, kinks = {}, 0
    with torch.no_grad():
        for name, t in tensors:
            flat = t.data.view(-1)
            ana_all = analytic[name].view(-1)
            k = min(samples, flat.numel())
            idx = torch.randperm(flat.numel(), generator=gen)[:k].tolist()
            ana, num = [], []
            for i in idx:
                a = ana_all[i].item()
                d = central(flat, i, step)
                if abs(a - d) > tolerance * max(abs(a), abs(d), 1e-12):
                    d2 = central(flat, i, step / 2)
                    if abs(d - d2) > tolerance * max(abs(d), abs(d2), 1e-12):
                        kinks += 1
                        continue
                ana.append(a)
                num.append(d)
            if not ana:
                continue
            ana, num = torch.tensor(ana), torch.tensor(num)
            scale = max(ana.norm().item(), num.norm().item())
            errors[name] = 0.0 if scale < 1e-12 else (ana - num).norm().item() / scale
    worst = max(errors.values())
    checked = sum(1 for _ in errors)
    return {
        "block": block_id,
        "max_rel_err": worst,
        "worst_tensor": max(errors, key=errors.get),
        "tolerance": tolerance,
        "step": step,
        "tensors_checked": checked,
        "kinks_skipped": kinks,
        "passed": worst <= tolerance,
        "per_tensor": errors,
    }
