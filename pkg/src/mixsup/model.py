"""Dual-branch encoder-decoder network.

One shared UNet encoder feeds two structurally identical but independently
parameterized decoders, each producing per-pixel class logits; single-branch
variants drop the second decoder. Sized for desk-scale grids.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImageGrid, LogitField

CKPT_HEADER = "mixsup-ckpt-v1"


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 2
    base_channels: int = 8
    depth: int = 3
    branch_mode: str = "dual"  # "dual" or "single"

    def __post_init__(self) -> None:
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if self.base_channels < 4:
            raise ValueError("base_channels must be at least 4")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.branch_mode not in ("single", "dual"):
            raise ValueError(f"branch_mode must be 'single' or 'dual', got {self.branch_mode!r}")


@dataclass(frozen=True)
class ForwardResult:
    """Per-branch logits for one image; ``bottom`` absent in single mode."""

    top: LogitField
    bottom: LogitField | None = None


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    groups = 4 if out_ch % 4 == 0 else 1
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.ReLU(inplace=True),
    )


class _Decoder(nn.Module):
    """Upsampling path with skip connections and a class-logit head."""

    def __init__(self, channels: list[int], num_classes: int) -> None:
        super().__init__()
        # channels: encoder widths from shallowest to bottleneck
        self.stages = nn.ModuleList()
        for lo, hi in zip(channels[-2::-1], channels[::-1]):
            self.stages.append(_conv_block(hi + lo, lo))
        self.head = nn.Conv2d(channels[0], num_classes, kernel_size=1)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        x = features[-1]
        for stage, skip in zip(self.stages, features[-2::-1]):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = stage(torch.cat([x, skip], dim=1))
        return self.head(x)


class DualBranchUNet(nn.Module):
    """Shared encoder with one or two independent decoders."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        widths = [config.base_channels * (2 ** i) for i in range(config.depth + 1)]
        self.encoder = nn.ModuleList()
        in_ch = 1
        for w in widths:
            self.encoder.append(_conv_block(in_ch, w))
            in_ch = w
        self.pool = nn.MaxPool2d(2)
        self.top_decoder = _Decoder(widths, config.num_classes)
        self.bottom_decoder = _Decoder(widths, config.num_classes) if config.branch_mode == "dual" else None

    @property
    def is_dual(self) -> bool:
        return self.bottom_decoder is not None

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Map (N, 1, H, W) images to per-branch (N, C, H, W) logits.

        H and W may be arbitrary; inputs are reflection-padded up to a
        multiple of 2^depth and the logits cropped back, never silently
        reshaped.
        """
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        mult = 2 ** self.config.depth
        pad_h = (-h) % mult
        pad_w = (-w) % mult
        if pad_h >= h or pad_w >= w:
            raise ValueError(
                f"{h}x{w} input is too small for depth {self.config.depth} "
                f"(needs reflection padding to a multiple of {mult})"
            )
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")

        features = []
        for i, block in enumerate(self.encoder):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            features.append(x)

        top = self.top_decoder(features)[..., :h, :w]
        bottom = self.bottom_decoder(features)[..., :h, :w] if self.is_dual else None
        return top, bottom


def build_model(config: ModelConfig) -> DualBranchUNet:
    return DualBranchUNet(config)


def forward_image(model: DualBranchUNet, image: ImageGrid) -> ForwardResult:
    """Run one image through both branches in a single pass."""
    x = image.values.unsqueeze(0).unsqueeze(0)
    top, bottom = model(x)
    return ForwardResult(
        top=LogitField(top[0].permute(1, 2, 0)),
        bottom=LogitField(bottom[0].permute(1, 2, 0)) if bottom is not None else None,
    )


def save_checkpoint(model: DualBranchUNet, path: str | Path, step: int = 0) -> None:
    """Write a versioned archive of parameters, config and step counter."""
    payload = {
        "header": CKPT_HEADER,
        "model_config": asdict(model.config),
        "step": int(step),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[DualBranchUNet, int]:
    """Restore a model archive; rejects files without the expected header."""
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    header = payload.get("header") if isinstance(payload, dict) else None
    if header != CKPT_HEADER:
        raise ValueError(f"not a recognized checkpoint (header={header!r})")
    config = ModelConfig(**payload["model_config"])
    model = build_model(config)
    model.load_state_dict(payload["state_dict"])
    return model, int(payload["step"])
