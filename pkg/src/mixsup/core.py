"""Shared domain types and elementary probability-field operations.

Images, masks and per-pixel class distributions are small 2D fields stored
as torch tensors so that downstream losses stay differentiable. All
operations here are pure functions over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# Reserved label for pixels without annotation; outside any class range so
# masks stay storable as 8-bit images.
UNLABELED = 255

# Floor applied to probabilities before taking logs; log terms are undefined
# at exact zeros.
LOG_EPS = 1e-8

MIN_SIDE = 8
SIMPLEX_ATOL = 1e-5


def _as_float_field(values: torch.Tensor, ndim: int, name: str) -> torch.Tensor:
    if not isinstance(values, torch.Tensor):
        values = torch.as_tensor(values)
    if values.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}D, got shape {tuple(values.shape)}")
    if not values.is_floating_point():
        values = values.float()
    return values


@dataclass(frozen=True)
class ImageGrid:
    """Single-channel image with intensities normalized to [0, 1]."""

    values: torch.Tensor  # (H, W) float

    def __post_init__(self) -> None:
        v = _as_float_field(self.values, 2, "ImageGrid.values")
        object.__setattr__(self, "values", v)
        h, w = v.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
        if not torch.isfinite(v).all():
            raise ValueError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class DenseMask:
    """Per-pixel class ids in {0, ..., num_classes - 1}."""

    labels: torch.Tensor  # (H, W) int64
    num_classes: int

    def __post_init__(self) -> None:
        t = torch.as_tensor(self.labels)
        if t.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {tuple(t.shape)}")
        t = t.long()
        object.__setattr__(self, "labels", t)
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if t.numel() and (t.min() < 0 or t.max() >= self.num_classes):
            raise ValueError(
                f"mask labels must lie in [0, {self.num_classes}), "
                f"found range [{int(t.min())}, {int(t.max())}]"
            )

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class PartialMask:
    """Sparse annotation: class ids on a few pixels, UNLABELED elsewhere."""

    labels: torch.Tensor  # (H, W) int64, UNLABELED allowed
    num_classes: int

    def __post_init__(self) -> None:
        t = torch.as_tensor(self.labels).long()
        object.__setattr__(self, "labels", t)
        if t.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {tuple(t.shape)}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        known = t != UNLABELED
        if not bool(known.any()):
            raise ValueError("partial mask must label at least one pixel")
        vals = t[known]
        if vals.min() < 0 or vals.max() >= self.num_classes:
            raise ValueError(
                f"labeled pixels must lie in [0, {self.num_classes}) or be {UNLABELED}"
            )

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def labeled(self) -> torch.Tensor:
        """Boolean map of annotated pixels."""
        return self.labels != UNLABELED

    @property
    def num_labeled(self) -> int:
        return int(self.labeled.sum())


@dataclass(frozen=True)
class LogitField:
    """Unconstrained per-pixel class scores, shape (H, W, C)."""

    scores: torch.Tensor

    def __post_init__(self) -> None:
        s = _as_float_field(self.scores, 3, "LogitField.scores")
        object.__setattr__(self, "scores", s)
        if not torch.isfinite(s.detach()).all():
            raise ValueError("logits contain non-finite values")

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def num_classes(self) -> int:
        return self.scores.shape[2]


@dataclass(frozen=True)
class SimplexField:
    """Per-pixel class probabilities on the unit simplex, shape (H, W, C)."""

    probs: torch.Tensor

    def __post_init__(self) -> None:
        p = _as_float_field(self.probs, 3, "SimplexField.probs")
        object.__setattr__(self, "probs", p)
        d = p.detach()
        if d.min() < -SIMPLEX_ATOL or d.max() > 1.0 + SIMPLEX_ATOL:
            raise ValueError("probabilities must lie in [0, 1]")
        sums = d.sum(dim=-1)
        if not torch.allclose(sums, torch.ones_like(sums), atol=SIMPLEX_ATOL):
            worst = float((sums - 1.0).abs().max())
            raise ValueError(f"per-pixel probabilities must sum to 1 (max deviation {worst:.2e})")

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]


@dataclass(frozen=True)
class DualOutput:
    """Paired per-branch probability fields for one image."""

    top: SimplexField
    bottom: SimplexField

    def __post_init__(self) -> None:
        if self.top.probs.shape != self.bottom.probs.shape:
            raise ValueError(
                f"branch shapes differ: {tuple(self.top.probs.shape)} vs "
                f"{tuple(self.bottom.probs.shape)}"
            )


def softmax(logits: LogitField) -> SimplexField:
    """Per-pixel softmax; stable under large score magnitudes."""
    return SimplexField(torch.softmax(logits.scores, dim=-1))


def smooth_simplex(p: SimplexField) -> SimplexField:
    """Re-apply softmax to probability vectors treated as scores.

    Flattens distributions toward uniform and keeps them strictly inside the
    simplex, which is how the distillation term receives its inputs.
    """
    return SimplexField(torch.softmax(p.probs, dim=-1))


def one_hot(mask: DenseMask) -> SimplexField:
    """Encode class ids as vertex probability vectors."""
    enc = torch.nn.functional.one_hot(mask.labels, num_classes=mask.num_classes)
    return SimplexField(enc.float())


def argmax_labels(p: SimplexField) -> DenseMask:
    """Per-pixel most-likely class; ties go to the lowest class index."""
    # numpy argmax documents first-occurrence tie-breaking; torch does not
    # guarantee it across versions.
    labels = np.argmax(p.probs.detach().cpu().numpy(), axis=-1)
    return DenseMask(torch.from_numpy(labels).long(), num_classes=p.num_classes)
