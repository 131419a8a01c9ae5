"""Evaluation metrics: Dice overlap and 95th-percentile boundary distance."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .core import SimplexField, softmax
from .data import LabeledSample
from .model import DualBranchUNet, forward_image


@dataclass
class MetricRow:
    sample_id: str
    dsc: float   # in [0, 1]
    hd95: float  # pixels; image diagonal when exactly one mask is empty


def _as_binary(mask: np.ndarray | torch.Tensor, name: str) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.dtype != bool:
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"{name} must contain only 0/1 values")
        arr = arr.astype(bool)
    return arr


def dice(a: np.ndarray | torch.Tensor, b: np.ndarray | torch.Tensor) -> float:
    """Overlap score 2|A∩B| / (|A|+|B|); two empty masks count as 1.0."""
    a = _as_binary(a, "a")
    b = _as_binary(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground pixels with a background 8-neighbor or on the edge."""
    m = _as_binary(mask, "mask")
    if not m.any():
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    core = np.ones_like(m)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            core &= padded[1 + dy:1 + dy + m.shape[0], 1 + dx:1 + dx + m.shape[1]]
    boundary = m & ~core
    return np.argwhere(boundary)


def hd95(a: np.ndarray | torch.Tensor, b: np.ndarray | torch.Tensor) -> float:
    """Symmetric 95th-percentile boundary distance in pixels.

    Returns 0 when both masks are empty and the image diagonal when exactly
    one is empty, so collapsed predictions score recognizably badly instead
    of crashing.
    """
    a = _as_binary(a, "a")
    b = _as_binary(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a_empty, b_empty = not a.any(), not b.any()
    if a_empty and b_empty:
        return 0.0
    if a_empty or b_empty:
        return math.hypot(*a.shape)

    pa = boundary_pixels(a).astype(np.float64)
    pb = boundary_pixels(b).astype(np.float64)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def prediction_mask(probs: SimplexField, fg_class: int = 1) -> np.ndarray:
    """Hard foreground mask from a probability field."""
    labels = np.argmax(probs.probs.detach().cpu().numpy(), axis=-1)
    return labels == fg_class


def evaluate_model(model: DualBranchUNet, branch: str, testset: list[LabeledSample],
                   fg_class: int = 1) -> tuple[list[MetricRow], dict[str, float]]:
    """Score one branch on a labeled set.

    Returns per-sample rows plus aggregate means; the mean Dice is scaled by
    100 to match the usual reporting convention, the rows keep [0, 1].
    """
    if branch not in ("top", "bottom"):
        raise ValueError(f"branch must be 'top' or 'bottom', got {branch!r}")
    if branch == "bottom" and not model.is_dual:
        raise ValueError("model has no bottom branch")
    rows = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for s in testset:
            result = forward_image(model, s.image)
            logits = result.top if branch == "top" else result.bottom
            pred = prediction_mask(softmax(logits), fg_class)
            truth = s.mask.labels.numpy() == fg_class
            rows.append(MetricRow(s.sample_id, dice(pred, truth), hd95(pred, truth)))
    if was_training:
        model.train()
    return rows, summarize_rows(rows)


def summarize_rows(rows: list[MetricRow]) -> dict[str, float]:
    if not rows:
        raise ValueError("no rows to summarize")
    return {
        "mean_dsc": 100.0 * float(np.mean([r.dsc for r in rows])),
        "mean_hd95": float(np.mean([r.hd95 for r in rows])),
    }


def write_metrics_csv(rows: list[MetricRow], path: str | Path) -> None:
    """Emit ``id,dsc,hd95`` rows plus a trailing MEAN row (Dice scaled by 100)."""
    summary = summarize_rows(rows)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "dsc", "hd95"])
        for r in rows:
            w.writerow([r.sample_id, f"{r.dsc:.6f}", f"{r.hd95:.6f}"])
        w.writerow(["MEAN", f"{summary['mean_dsc']:.6f}", f"{summary['mean_hd95']:.6f}"])
