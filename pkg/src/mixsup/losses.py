"""Training objective: supervised, partial, distillation and confidence terms.

Every term is a per-pixel mean so the balancing weights stay independent of
image resolution. All functions return 0-dim torch tensors and remain
differentiable with respect to the logits that produced their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import (
    LOG_EPS,
    DenseMask,
    DualOutput,
    PartialMask,
    SimplexField,
    smooth_simplex,
)


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights for the partial, distillation and entropy terms."""

    lambda_w: float = 0.1
    lambda_kd: float = 50.0
    lambda_ent: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_w", "lambda_kd", "lambda_ent"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class LossReport:
    """Decomposed objective value for one batch.

    Component values are unweighted; ``total`` applies the weights. Pixel
    counts record how many pixels fed each term.
    """

    total: float
    l_s: float
    l_w: float
    l_kd: float
    l_ent: float
    pixels_s: int
    pixels_w: int
    pixels_kd: int
    pixels_ent: int


@dataclass
class BatchSample:
    """One image's contribution to the joint objective.

    Strongly labeled samples carry a dense mask plus their synthesized
    partial mask; weakly labeled samples carry only a partial mask and are
    flagged ``weak`` so the confidence term knows to include them.
    """

    output: DualOutput
    dense: DenseMask | None = None
    partial: PartialMask | None = None
    weak: bool = False


def _log_probs_at(p: SimplexField, labels: torch.Tensor) -> torch.Tensor:
    picked = p.probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return torch.log(torch.clamp(picked, min=LOG_EPS))


def _check_shapes(p: SimplexField, mask: DenseMask | PartialMask) -> None:
    if (p.height, p.width) != (mask.height, mask.width):
        raise ValueError(
            f"prediction {p.height}x{p.width} does not match mask "
            f"{mask.height}x{mask.width}"
        )
    if p.num_classes != mask.num_classes:
        raise ValueError(
            f"prediction has {p.num_classes} classes, mask has {mask.num_classes}"
        )


def full_ce(pred: SimplexField, target: DenseMask) -> torch.Tensor:
    """Cross-entropy against a dense mask, averaged over every pixel."""
    _check_shapes(pred, target)
    return -_log_probs_at(pred, target.labels).mean()


def partial_ce(pred: SimplexField, target: PartialMask) -> torch.Tensor:
    """Cross-entropy over the annotated pixels only.

    Unlabeled pixels contribute nothing, in value or gradient.
    """
    _check_shapes(pred, target)
    labeled = target.labeled
    if not bool(labeled.any()):
        raise ValueError("partial mask has no labeled pixels")
    safe = torch.where(labeled, target.labels, torch.zeros_like(target.labels))
    logp = _log_probs_at(pred, safe)
    return -logp[labeled].mean()


def kl_divergence(p: SimplexField, q: SimplexField) -> torch.Tensor:
    """Mean per-pixel KL divergence of p from q, without smoothing."""
    if p.probs.shape != q.probs.shape:
        raise ValueError(
            f"shape mismatch: {tuple(p.probs.shape)} vs {tuple(q.probs.shape)}"
        )
    log_p = torch.log(torch.clamp(p.probs, min=LOG_EPS))
    log_q = torch.log(torch.clamp(q.probs, min=LOG_EPS))
    per_pixel = (p.probs * (log_p - log_q)).sum(dim=-1)
    return per_pixel.mean()


def kl_distill(out: DualOutput, block_teacher_grad: bool = True) -> torch.Tensor:
    """Distillation term: KL from the top branch onto the bottom branch.

    Both distributions are flattened with ``smooth_simplex`` first. By
    default no gradient flows back into the top branch, so distillation
    cannot drag the teacher toward the student.
    """
    top_probs = out.top.probs.detach() if block_teacher_grad else out.top.probs
    teacher = smooth_simplex(SimplexField(top_probs))
    student = smooth_simplex(out.bottom)
    return kl_divergence(teacher, student)


def shannon_entropy(pred: SimplexField) -> torch.Tensor:
    """Mean per-pixel Shannon entropy; minimizing it sharpens predictions."""
    log_p = torch.log(torch.clamp(pred.probs, min=LOG_EPS))
    return -(pred.probs * log_p).sum(dim=-1).mean()


def min_entropy(pred: SimplexField) -> torch.Tensor:
    """Mean per-pixel min-entropy, -log of the largest class probability.

    Equals the cross-entropy against the prediction's own argmax mask, i.e.
    the loss implicitly minimized by hard pseudo-mask self-training, and it
    lower-bounds the Shannon entropy.
    """
    max_p = pred.probs.max(dim=-1).values
    return -torch.log(torch.clamp(max_p, min=LOG_EPS)).mean()


@dataclass
class BatchTerms:
    """Unweighted per-term pixel means over one batch, kept as tensors."""

    l_s: torch.Tensor
    l_w: torch.Tensor
    l_kd: torch.Tensor
    l_ent: torch.Tensor
    pixels_s: int = 0
    pixels_w: int = 0
    pixels_kd: int = 0
    pixels_ent: int = 0


def batch_terms(batch: list[BatchSample], block_teacher_grad: bool = True) -> BatchTerms:
    """Accumulate the four objective terms over a mixed batch.

    Strong samples feed the supervised term on the top branch, the partial
    term on the bottom branch through their synthesized sparse mask, and the
    distillation term. Weak samples feed the partial term and, when they are
    original weakly labeled images rather than copies of strong ones, the
    confidence entropy term. Each term is the mean over all pixels that
    reached it; a term nobody reached is zero.
    """
    if not batch:
        raise ValueError("batch must contain at least one sample")
    zero = torch.zeros(())
    sums = {"s": zero, "w": zero, "kd": zero, "ent": zero}
    counts = {"s": 0, "w": 0, "kd": 0, "ent": 0}

    for sample in batch:
        out = sample.output
        if sample.dense is not None:
            n = sample.dense.height * sample.dense.width
            sums["s"] = sums["s"] + full_ce(out.top, sample.dense) * n
            counts["s"] += n
            sums["kd"] = sums["kd"] + kl_distill(out, block_teacher_grad) * n
            counts["kd"] += n
        if sample.partial is not None:
            n = sample.partial.num_labeled
            sums["w"] = sums["w"] + partial_ce(out.bottom, sample.partial) * n
            counts["w"] += n
        if sample.weak:
            n = out.bottom.height * out.bottom.width
            sums["ent"] = sums["ent"] + shannon_entropy(out.bottom) * n
            counts["ent"] += n

    if counts["s"] == 0 and counts["w"] == 0:
        raise ValueError("batch carries neither dense nor partial supervision")

    def mean(key: str) -> torch.Tensor:
        return sums[key] / counts[key] if counts[key] else torch.zeros(())

    return BatchTerms(
        l_s=mean("s"),
        l_w=mean("w"),
        l_kd=mean("kd"),
        l_ent=mean("ent"),
        pixels_s=counts["s"],
        pixels_w=counts["w"],
        pixels_kd=counts["kd"],
        pixels_ent=counts["ent"],
    )


def weighted_total(terms: BatchTerms, weights: LossWeights) -> torch.Tensor:
    """Combine the term means into the differentiable training objective."""
    total = terms.l_s
    if weights.lambda_w:
        total = total + weights.lambda_w * terms.l_w
    if weights.lambda_kd:
        total = total + weights.lambda_kd * terms.l_kd
    if weights.lambda_ent:
        total = total + weights.lambda_ent * terms.l_ent
    return total


def report(terms: BatchTerms, weights: LossWeights) -> LossReport:
    return LossReport(
        total=float(terms.l_s)
        + weights.lambda_w * float(terms.l_w)
        + weights.lambda_kd * float(terms.l_kd)
        + weights.lambda_ent * float(terms.l_ent),
        l_s=float(terms.l_s),
        l_w=float(terms.l_w),
        l_kd=float(terms.l_kd),
        l_ent=float(terms.l_ent),
        pixels_s=terms.pixels_s,
        pixels_w=terms.pixels_w,
        pixels_kd=terms.pixels_kd,
        pixels_ent=terms.pixels_ent,
    )


def joint_loss(batch: list[BatchSample], weights: LossWeights,
               block_teacher_grad: bool = True) -> LossReport:
    """Route a mixed batch through all four terms and report the breakdown."""
    return report(batch_terms(batch, block_teacher_grad), weights)
