"""Model assembly, presets, parameter counting and checkpoints."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .decoder import Decoder
from .encoder import Encoder

CHECKPOINT_FORMAT = "sonarseg-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 24
    depths: tuple[int, ...] = (3, 6, 12, 3)
    heads: tuple[int, ...] = (2, 4, 8, 16)
    num_classes: int = 4
    aux_aspp: bool = True
    ffn_kind: str = "ghost"
    merge_kind: str = "multiscale"
    aspp_dilations: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(self, "aspp_dilations", tuple(self.aspp_dilations))
        self.validate()

    def validate(self):
        if self.embed_dim <= 0 or self.embed_dim % 2:
            raise ValueError(f"embed_dim must be a positive even integer, got {self.embed_dim}")
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ValueError("depths and heads need exactly 4 entries")
        if any(d < 1 for d in self.depths):
            raise ValueError(f"every stage needs at least one layer: {self.depths}")
        for i, (w, h) in enumerate(zip(self.widths, self.heads)):
            if h < 1 or w % h:
                raise ValueError(f"stage {i + 1}: width {w} not divisible by {h} heads")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.ffn_kind not in ("ghost", "mlp2"):
            raise ValueError(f"unknown ffn_kind {self.ffn_kind!r}")
        if self.merge_kind not in ("multiscale", "conv3x3s2"):
            raise ValueError(f"unknown merge_kind {self.merge_kind!r}")
        if len(self.aspp_dilations) != 4 or any(r < 1 for r in self.aspp_dilations):
            raise ValueError("aspp_dilations needs 4 positive entries")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.embed_dim * 2**i for i in range(4))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PRESETS: dict[str, ModelConfig] = {
    "ours": ModelConfig(24, (3, 6, 12, 3), (2, 4, 8, 16)),
    "ours-dagger": ModelConfig(8, (1, 1, 3, 1), (1, 2, 4, 8)),
    "ours-ddagger2": ModelConfig(12, (1, 3, 7, 1), (1, 2, 4, 8)),
    "ours-ddagger": ModelConfig(24, (1, 3, 7, 1), (2, 4, 8, 16)),
    "vanilla-simxca": ModelConfig(
        24, (3, 6, 12, 3), (2, 4, 8, 16),
        aux_aspp=False, ffn_kind="mlp2", merge_kind="conv3x3s2",
    ),
}

# Reported parameter counts, in millions.
REFERENCE_PARAMS = {
    "ours": 1.91,
    "ours-ddagger": 0.97,
    "ours-ddagger2": 0.26,
    "ours-dagger": 0.08,
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def ablation_ladder() -> list[tuple[str, ModelConfig, float]]:
    """(row name, config, reported M params) from the vanilla baseline to the full model."""
    base = PRESETS["vanilla-simxca"]
    no_mlp = base.replace(ffn_kind="ghost")
    multimerge = no_mlp.replace(merge_kind="multiscale")
    full = multimerge.replace(aux_aspp=True)
    return [
        ("vanilla-simxca", base, 2.14),
        ("-MLP", no_mlp, 1.98),
        ("+Multimerge", multimerge, 1.90),
        ("+ASSPP", full, 1.91),
    ]


class SegModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(
            config.embed_dim, config.depths, config.heads, config.ffn_kind, config.merge_kind
        )
        self.decoder = Decoder(
            config.embed_dim, config.num_classes, config.aux_aspp, config.aspp_dilations
        )

    def forward(self, x):
        return self.decoder(self.encoder(x), out_size=x.shape[-2:])


def init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, (nn.LayerNorm, nn.GroupNorm)):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def init_linear_projections(m: nn.Module):
    # decoder pointwise convs act as linear projections
    if isinstance(m, nn.Conv2d) and m.kernel_size == (1, 1):
        nn.init.trunc_normal_(m.weight, std=0.02)


def build_model(config: ModelConfig | str, seed: int = 0) -> SegModel:
    if isinstance(config, str):
        config = preset(config)
    config.validate()
    # local generator state so building never perturbs the caller's RNG
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegModel(config)
        model.apply(init_weights)
        model.decoder.apply(init_linear_projections)
    return model.eval()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def preset_name_of(config: ModelConfig) -> str | None:
    for name, cfg in PRESETS.items():
        if cfg == config:
            return name
    return None


def save_checkpoint(model: SegModel, path, extra: dict | None = None):
    """Write manifest + raw tensors to a single file.

    Layout: {"manifest": {format, preset, config, shapes, extra}, "tensors": state_dict}.
    """
    state = {k: v.detach().clone().contiguous() for k, v in model.state_dict().items()}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "preset": preset_name_of(model.config),
        "config": model.config.to_dict(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"manifest": manifest, "tensors": state}, path)
    return manifest


def load_checkpoint(path) -> tuple[SegModel, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    manifest = blob.get("manifest", {}) if isinstance(blob, dict) else {}
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a sonarseg checkpoint")
    model = SegModel(ModelConfig.from_dict(manifest["config"]))
    tensors = blob["tensors"]
    for k, shape in manifest["shapes"].items():
        if list(tensors[k].shape) != shape:
            raise ValueError(f"{path}: tensor {k} has shape {list(tensors[k].shape)}, manifest says {shape}")
    model.load_state_dict(tensors)
    return model.eval(), manifest
