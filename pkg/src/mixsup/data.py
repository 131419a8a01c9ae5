"""Datasets: synthetic ring images, sparse-label synthesis and split assembly.

The synthetic generator stands in for a real annotated corpus at desk scale.
Each image shows one bright elliptical ring on a noisy background, with
look-alike distractor blobs; the segmentation target is the ring's filled
interior. Sparse labels are synthesized from dense masks by seeding a few
foreground pixels and a background ring, replacing hand-drawn scribbles.
"""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .core import UNLABELED, DenseMask, ImageGrid, PartialMask

MAX_LABELED_FRACTION = 0.10


@dataclass(frozen=True)
class LabeledSample:
    """Image with a dense ground-truth mask."""

    sample_id: str
    image: ImageGrid
    mask: DenseMask

    def __post_init__(self) -> None:
        if (self.image.height, self.image.width) != (self.mask.height, self.mask.width):
            raise ValueError(f"image/mask shape mismatch for sample {self.sample_id!r}")


@dataclass(frozen=True)
class PartialSample:
    """Image with sparse labels; ``from_strong`` marks copies of dense samples."""

    sample_id: str
    image: ImageGrid
    mask: PartialMask
    from_strong: bool = False

    def __post_init__(self) -> None:
        if (self.image.height, self.image.width) != (self.mask.height, self.mask.width):
            raise ValueError(f"image/mask shape mismatch for sample {self.sample_id!r}")


@dataclass(frozen=True)
class ScribbleSpec:
    """How sparse labels are synthesized from a dense mask."""

    fg_policy: str = "centroid-disk"  # or "erosion-core"
    fg_radius: int = 2
    bg_dilation: int = 6
    bg_thickness: int = 2

    def __post_init__(self) -> None:
        if self.fg_policy not in ("centroid-disk", "erosion-core"):
            raise ValueError(f"unknown fg_policy {self.fg_policy!r}")
        if self.fg_radius < 1 or self.bg_dilation < 1 or self.bg_thickness < 1:
            raise ValueError("scribble radii must be positive")


@dataclass(frozen=True)
class SplitSetting:
    """Number of fully labeled images and the partial-image multiplier."""

    name: str = "custom"
    num_full: int = 3
    partial_multiplier: int = 5

    def __post_init__(self) -> None:
        if self.num_full < 1:
            raise ValueError("num_full must be at least 1")
        if self.partial_multiplier < 1:
            raise ValueError("partial_multiplier must be at least 1")

    @property
    def num_partial(self) -> int:
        return self.partial_multiplier * self.num_full

    @classmethod
    def from_name(cls, name: str) -> "SplitSetting":
        presets = {"Set-3": 3, "Set-5": 5, "Set-10": 10}
        if name in presets:
            return cls(name=name, num_full=presets[name])
        raise ValueError(f"unknown setting {name!r}; use Set-3/Set-5/Set-10 or build a custom one")


class AccessAudit:
    """Append-only, thread-safe log of reads of evaluation-only labels."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._reads: list[str] = []

    def record(self, sample_id: str) -> None:
        with self._lock:
            self._reads.append(sample_id)

    @property
    def count(self) -> int:
        with self._lock:
            return len(self._reads)

    @property
    def reads(self) -> tuple[str, ...]:
        with self._lock:
            return tuple(self._reads)


class AuditedMaskStore:
    """Dense masks of weakly labeled images, guarded by an access audit.

    Training code must never look in here; every read is recorded so tests
    can prove isolation.
    """

    def __init__(self, masks: dict[str, DenseMask], audit: AccessAudit) -> None:
        self._masks = dict(masks)
        self._audit = audit

    def __len__(self) -> int:
        return len(self._masks)

    def ids(self) -> tuple[str, ...]:
        return tuple(self._masks)

    def get(self, sample_id: str) -> DenseMask:
        self._audit.record(sample_id)
        return self._masks[sample_id]


@dataclass
class MixedDataset:
    """Train/val/test material for one mixed-supervision experiment."""

    strong: list[LabeledSample]
    weak: list[PartialSample]
    val: list[LabeledSample]
    test: list[LabeledSample]
    weak_dense: AuditedMaskStore
    audit: AccessAudit

    @property
    def weak_originals(self) -> list[PartialSample]:
        return [s for s in self.weak if not s.from_strong]


# ---------------------------------------------------------------------------
# Synthetic image generation
# ---------------------------------------------------------------------------

AREA_FRACTION_BOUNDS = (0.02, 0.25)


def _ellipse_interior(grid: int, cy: float, cx: float, a: float, b: float,
                      theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:grid, 0:grid]
    dy = yy - cy
    dx = xx - cx
    ct, st = math.cos(theta), math.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _draw_sample(grid: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = AREA_FRACTION_BOUNDS
    for _ in range(64):
        a = rng.uniform(0.13, 0.27) * grid
        ecc = rng.uniform(0.55, 1.0)
        b = a * ecc
        if b < 3.2:
            continue
        thickness = rng.uniform(1.8, 3.2)
        theta = rng.uniform(0.0, math.pi)
        margin = a + thickness + 2.0
        if 2 * margin >= grid:
            continue
        cy = rng.uniform(margin, grid - margin)
        cx = rng.uniform(margin, grid - margin)

        interior = _ellipse_interior(grid, cy, cx, a, b, theta)
        outer = _ellipse_interior(grid, cy, cx, a + thickness, b + thickness, theta)
        ring = outer & ~interior

        frac = interior.mean()
        if not (lo <= frac <= hi):
            continue
        n_comp = ndimage.label(interior)[1]
        if n_comp != 1:
            continue

        base = rng.uniform(0.25, 0.42)
        cavity = base + rng.uniform(0.10, 0.28)
        bright = cavity + rng.uniform(0.15, 0.35)
        img = np.full((grid, grid), base, dtype=np.float64)
        img[interior] = cavity
        img[ring] = bright

        # Distractor blobs share the cavity's intensity range but lack an
        # enclosing ring, so intensity alone cannot identify the target.
        for _ in range(rng.integers(1, 4)):
            da = rng.uniform(1.5, 4.5)
            db = da * rng.uniform(0.6, 1.0)
            dth = rng.uniform(0.0, math.pi)
            dy = rng.uniform(da + 1, grid - da - 1)
            dx = rng.uniform(da + 1, grid - da - 1)
            blob = _ellipse_interior(grid, dy, dx, da, db, dth)
            blob &= ~outer
            img[blob] = cavity + rng.uniform(-0.05, 0.05)

        # Open arc fragment: ring-like intensity without a closed interior.
        if rng.random() < 0.7:
            ra = rng.uniform(0.10, 0.20) * grid
            rb = ra * rng.uniform(0.6, 1.0)
            rth = rng.uniform(0.0, math.pi)
            ry = rng.uniform(ra + 3, grid - ra - 3)
            rx = rng.uniform(ra + 3, grid - ra - 3)
            arc_out = _ellipse_interior(grid, ry, rx, ra + 2.0, rb + 2.0, rth)
            arc_in = _ellipse_interior(grid, ry, rx, ra, rb, rth)
            arc = arc_out & ~arc_in
            yy, xx = np.mgrid[0:grid, 0:grid]
            ang = np.arctan2(yy - ry, xx - rx)
            gap_at = rng.uniform(-math.pi, math.pi)
            gap_width = rng.uniform(1.2, 2.4)
            keep = np.abs(np.angle(np.exp(1j * (ang - gap_at)))) > gap_width / 2
            arc &= keep & ~outer
            img[arc] = bright + rng.uniform(-0.05, 0.05)

        # Smooth shading plus pixel noise.
        fy, fx = rng.uniform(0.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * math.pi, size=2)
        yy, xx = np.mgrid[0:grid, 0:grid]
        shade = 0.04 * np.cos(2 * math.pi * fy * yy / grid + phase[0]) \
            * np.cos(2 * math.pi * fx * xx / grid + phase[1])
        img = img + shade + rng.normal(0.0, 0.07, size=(grid, grid))
        img = np.clip(img, 0.0, 1.0)
        return img.astype(np.float32), interior.astype(np.int64)
    raise RuntimeError("failed to draw a structure within the area bounds")


def make_synthetic(n: int, grid: int = 64, seed: int = 0) -> list[LabeledSample]:
    """Generate ``n`` reproducible ring-structure samples on a ``grid``² canvas."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if grid < 32:
        raise ValueError("grid must be at least 32")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        img, mask = _draw_sample(grid, rng)
        samples.append(
            LabeledSample(
                sample_id=f"syn-{i:04d}",
                image=ImageGrid(torch.from_numpy(img)),
                mask=DenseMask(torch.from_numpy(mask), num_classes=2),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Sparse-label synthesis
# ---------------------------------------------------------------------------

def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy ** 2 + xx ** 2 <= r ** 2


def _fg_seed(fg: np.ndarray, spec: ScribbleSpec) -> np.ndarray:
    if spec.fg_policy == "erosion-core":
        target_area = max(1.0, math.pi * spec.fg_radius ** 2)
        core = fg
        while True:
            nxt = ndimage.binary_erosion(core)
            if not nxt.any():
                break
            core = nxt
            if core.sum() <= target_area:
                break
        if core.sum() != fg.sum():  # at least one erosion applied
            return core
        # fall through: foreground too small to erode
    cy, cx = ndimage.center_of_mass(fg)
    seed = np.zeros_like(fg)
    h, w = fg.shape
    yy, xx = np.mgrid[0:h, 0:w]
    seed[(yy - cy) ** 2 + (xx - cx) ** 2 <= spec.fg_radius ** 2] = True
    seed &= fg
    if not seed.any():
        # centroid fell outside a thin shape: label its nearest true pixel
        dist = (yy - cy) ** 2 + (xx - cx) ** 2
        dist[~fg] = np.iinfo(np.int64).max
        flat = int(np.argmin(dist))
        seed.flat[flat] = True
    return seed


def synthesize_partial(mask: DenseMask, spec: ScribbleSpec, seed: int = 0) -> PartialMask:
    """Derive a sparse annotation from a dense mask.

    Foreground seeds always lie inside the true foreground and background
    seeds inside the true background, so no synthesized label ever
    contradicts the dense mask. Total labeled pixels stay under 10% of the
    image area (the background ring is subsampled if necessary).
    """
    labels_np = mask.labels.numpy()
    fg = labels_np > 0
    if not fg.any():
        raise ValueError("mask has no foreground pixels to scribble")

    rng = np.random.default_rng(seed)
    fg_seed = _fg_seed(fg, spec)

    inner = ndimage.binary_dilation(fg, structure=_disk(1), iterations=spec.bg_dilation)
    outer = ndimage.binary_dilation(inner, structure=_disk(1), iterations=spec.bg_thickness)
    bg_ring = outer & ~inner & ~fg

    budget = int(MAX_LABELED_FRACTION * fg.size) - int(fg_seed.sum()) - 1
    ring_idx = np.flatnonzero(bg_ring)
    if len(ring_idx) > budget:
        keep = rng.choice(ring_idx, size=max(budget, 1), replace=False)
        bg_ring = np.zeros_like(bg_ring)
        bg_ring.flat[np.sort(keep)] = True

    out = np.full(labels_np.shape, UNLABELED, dtype=np.int64)
    out[fg_seed] = labels_np[fg_seed]
    out[bg_ring] = 0
    return PartialMask(torch.from_numpy(out), num_classes=mask.num_classes)


# ---------------------------------------------------------------------------
# Split assembly
# ---------------------------------------------------------------------------

def build_split(samples: list[LabeledSample], setting: SplitSetting,
                spec: ScribbleSpec | None = None, seed: int = 0,
                val_count: int = 8, test_count: int = 16) -> MixedDataset:
    """Partition a sample pool into strong/weak/val/test subsets.

    The weak set holds ``partial_multiplier × num_full`` fresh images with
    synthesized sparse labels plus a sparse copy of every strong image. The
    dense masks of the fresh weak images are kept in an audited store for
    evaluation only.
    """
    spec = spec or ScribbleSpec()
    m = setting.num_full
    needed = m + setting.num_partial + val_count + test_count
    if len(samples) < needed:
        raise ValueError(
            f"need at least {needed} samples for {setting.name} "
            f"(m={m}, partial={setting.num_partial}, val={val_count}, "
            f"test={test_count}), got {len(samples)}"
        )

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    pick = [samples[i] for i in order]

    strong = pick[:m]
    weak_src = pick[m:m + setting.num_partial]
    val = pick[m + setting.num_partial:m + setting.num_partial + val_count]
    test = pick[m + setting.num_partial + val_count:
                m + setting.num_partial + val_count + test_count]

    weak: list[PartialSample] = []
    dense_refs: dict[str, DenseMask] = {}
    for s in weak_src:
        pm = synthesize_partial(s.mask, spec, seed=int(rng.integers(0, 2 ** 31)))
        weak.append(PartialSample(s.sample_id, s.image, pm, from_strong=False))
        dense_refs[s.sample_id] = s.mask
    for s in strong:
        pm = synthesize_partial(s.mask, spec, seed=int(rng.integers(0, 2 ** 31)))
        weak.append(PartialSample(s.sample_id, s.image, pm, from_strong=True))

    audit = AccessAudit()
    return MixedDataset(
        strong=list(strong),
        weak=weak,
        val=list(val),
        test=list(test),
        weak_dense=AuditedMaskStore(dense_refs, audit),
        audit=audit,
    )


def build_upper_split(samples: list[LabeledSample], setting: SplitSetting,
                      seed: int = 0, val_count: int = 8,
                      test_count: int = 16) -> MixedDataset:
    """Fully supervised variant: the whole train pool is densely labeled.

    Uses the same shuffle as :func:`build_split` so val/test images match the
    mixed split for the same seed; the strong set absorbs what would have
    been the weak pool and the weak set is empty.
    """
    m = setting.num_full
    pool = m + setting.num_partial
    needed = pool + val_count + test_count
    if len(samples) < needed:
        raise ValueError(f"need at least {needed} samples, got {len(samples)}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    pick = [samples[i] for i in order]

    audit = AccessAudit()
    return MixedDataset(
        strong=pick[:pool],
        weak=[],
        val=pick[pool:pool + val_count],
        test=pick[pool + val_count:pool + val_count + test_count],
        weak_dense=AuditedMaskStore({}, audit),
        audit=audit,
    )


def write_manifest(dataset: MixedDataset, path: str | Path) -> None:
    """List sample ids per subset, one id per line under a section header."""
    lines = []
    for section, rows in (
        ("strong", [s.sample_id for s in dataset.strong]),
        ("weak", [s.sample_id for s in dataset.weak]),
        ("val", [s.sample_id for s in dataset.val]),
        ("test", [s.sample_id for s in dataset.test]),
    ):
        lines.append(f"[{section}]")
        lines.extend(rows)
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# Directory datasets
# ---------------------------------------------------------------------------

def save_dataset(samples: list[LabeledSample], root: str | Path) -> None:
    """Write samples as paired 8-bit PNGs under images/ and masks/."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.clip(np.rint(s.image.values.numpy() * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(root / "images" / f"{s.sample_id}.png")
        mask = s.mask.labels.numpy().astype(np.uint8)
        Image.fromarray(mask, mode="L").save(root / "masks" / f"{s.sample_id}.png")


def load_dataset(root: str | Path, layout: str = "paired-png",
                 num_classes: int = 2) -> list[LabeledSample]:
    """Read a paired-PNG dataset directory.

    Expects ``images/<id>.png`` (8-bit grayscale, scaled to [0, 1]) and
    ``masks/<id>.png`` (8-bit class ids; 255 reserved for unlabeled). All
    pairing, shape and class-range problems are collected and raised
    together.
    """
    if layout != "paired-png":
        raise ValueError(f"unknown layout {layout!r}")
    root = Path(root)
    image_dir = root / "images"
    mask_dir = root / "masks"
    image_ids = {p.stem for p in image_dir.glob("*.png")} if image_dir.is_dir() else set()
    mask_ids = {p.stem for p in mask_dir.glob("*.png")} if mask_dir.is_dir() else set()

    if not image_ids and not mask_ids:
        warnings.warn(f"no samples found under {root}", stacklevel=2)
        return []

    errors = [f"image {i!r} has no mask" for i in sorted(image_ids - mask_ids)]
    errors += [f"mask {i!r} has no image" for i in sorted(mask_ids - image_ids)]

    samples = []
    for sid in sorted(image_ids & mask_ids):
        img = np.asarray(Image.open(image_dir / f"{sid}.png").convert("L"), dtype=np.float32)
        mask = np.asarray(Image.open(mask_dir / f"{sid}.png"), dtype=np.int64)
        if img.shape != mask.shape:
            errors.append(f"sample {sid!r}: image {img.shape} vs mask {mask.shape}")
            continue
        classes = np.unique(mask)
        bad = classes[(classes >= num_classes) & (classes != UNLABELED)]
        if bad.size:
            errors.append(f"sample {sid!r}: class ids {bad.tolist()} out of range")
            continue
        if (mask == UNLABELED).any():
            # sparse file: representable only as a PartialMask; dense loader skips it
            errors.append(f"sample {sid!r}: contains unlabeled pixels; not a dense mask")
            continue
        samples.append(
            LabeledSample(
                sample_id=sid,
                image=ImageGrid(torch.from_numpy(img / 255.0)),
                mask=DenseMask(torch.from_numpy(mask), num_classes=num_classes),
            )
        )
    if errors:
        raise ValueError("dataset problems:\n" + "\n".join(f"  - {e}" for e in errors))
    return samples


def load_partial_mask(path: str | Path, num_classes: int = 2) -> PartialMask:
    """Read a sparse mask PNG; pixels valued 255 load as unlabeled."""
    arr = np.asarray(Image.open(path), dtype=np.int64)
    return PartialMask(torch.from_numpy(arr), num_classes=num_classes)
