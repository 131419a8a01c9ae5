"""Optimization loop, baseline ladder kinds, proposal retraining and ablation.

Model kinds select which objective terms apply:

  lower             one branch, dense cross-entropy on the strong set only
  upper             one branch, dense cross-entropy on a fully labeled pool
  single            one branch, dense plus weighted sparse cross-entropy
  decoupled         two branches, dense on top / sparse on bottom, no coupling
  kl                decoupled plus the distillation term
  kl_ent            kl plus the confidence entropy term (the full method)
  proposal_retrain  like upper, on proposals generated by a trained model

Strong and weak images are drawn 1:1 within each batch so every step feeds
all active terms. Runs are deterministic for a fixed seed in single-worker
mode.
"""

from __future__ import annotations

import configparser
import copy
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses
from .core import DualOutput, ImageGrid, LogitField, DenseMask, argmax_labels, softmax
from .data import LabeledSample, MixedDataset, PartialSample
from .losses import BatchSample, LossReport, LossWeights
from .metrics import MetricRow, evaluate_model, write_metrics_csv
from .model import (
    DualBranchUNet,
    ModelConfig,
    build_model,
    forward_image,
    load_checkpoint,
    save_checkpoint,
)

MODEL_KINDS = ("lower", "upper", "single", "decoupled", "kl", "kl_ent", "proposal_retrain")
DUAL_KINDS = ("decoupled", "kl", "kl_ent")
RUNNING_MARKER = "RUNNING"


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "kl_ent"
    epochs: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    seeds: tuple[int, ...] = (0, 1, 2)
    model: ModelConfig = field(default_factory=ModelConfig)
    block_teacher_grad: bool = True
    fg_class: int = 1

    def __post_init__(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model_kind {self.model_kind!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.seeds:
            raise ValueError("need at least one seed")

    @property
    def is_dual(self) -> bool:
        return self.model_kind in DUAL_KINDS

    def effective_weights(self) -> LossWeights:
        """Zero out the terms a model kind does not train with."""
        w = self.weights
        if self.model_kind in ("lower", "upper", "proposal_retrain"):
            return LossWeights(0.0, 0.0, 0.0)
        if self.model_kind in ("single", "decoupled"):
            return LossWeights(w.lambda_w, 0.0, 0.0)
        if self.model_kind == "kl":
            return LossWeights(w.lambda_w, w.lambda_kd, 0.0)
        return w

    def snapshot(self, seed: int) -> dict:
        snap = asdict(self)
        snap["seed"] = seed
        return snap


@dataclass
class RunRecord:
    """Everything one training run produced."""

    config: dict
    seed: int
    epoch_rows: list[dict]
    best_epoch: int
    best_val_dsc: float
    best_state: dict
    test_rows: dict[str, list[MetricRow]]
    test_summary: dict[str, dict[str, float]]
    wall_clock: float
    audit_reads: int
    out_dir: Path | None = None

    @property
    def serving_branch(self) -> str:
        return "bottom" if "bottom" in self.test_summary else "top"


def _model_config_for(config: TrainConfig) -> ModelConfig:
    mode = "dual" if config.is_dual else "single"
    return replace(config.model, branch_mode=mode)


class _Cycler:
    """Endless shuffled index stream over a finite pool."""

    def __init__(self, n: int, rng: np.random.Generator) -> None:
        self.n = n
        self.rng = rng
        self.order: list[int] = []
        self.pos = 0

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order = [int(i) for i in self.rng.permutation(self.n)]
                self.pos = 0
            out.append(self.order[self.pos])
            self.pos += 1
        return out

    def state(self) -> dict:
        return {"order": list(self.order), "pos": self.pos}

    def load_state(self, state: dict) -> None:
        self.order = list(state["order"])
        self.pos = int(state["pos"])


def _stack_images(images: list[ImageGrid]) -> torch.Tensor:
    return torch.stack([im.values for im in images]).unsqueeze(1)


def _check_compatible(dataset: MixedDataset, config: TrainConfig) -> None:
    kind = config.model_kind
    if not dataset.strong:
        raise ValueError(f"{kind} training needs a non-empty strong set")
    if kind in ("upper", "proposal_retrain") and dataset.weak:
        raise ValueError(
            f"{kind} expects a fully labeled pool (weak set must be empty); "
            "build one with build_upper_split or proposal_retrain"
        )
    if kind in ("single", *DUAL_KINDS) and not dataset.weak_originals:
        raise ValueError(f"{kind} training needs weakly labeled images")
    if not dataset.val:
        raise ValueError("training needs a validation set for model selection")


def _strong_partial_index(dataset: MixedDataset) -> dict[str, PartialSample]:
    return {s.sample_id: s for s in dataset.weak if s.from_strong}


def train(dataset: MixedDataset, config: TrainConfig, seed: int | None = None,
          out_dir: str | Path | None = None, step_hook=None, epoch_hook=None,
          resume: bool = False) -> RunRecord:
    """Run one seed of the configured protocol and evaluate its best model.

    ``step_hook(step, report)`` and ``epoch_hook(epoch, row)`` are optional
    observers. With ``out_dir`` set, the run directory receives a config
    snapshot, per-epoch loss CSV, checkpoints and final metric CSVs; while
    training is in flight a RUNNING marker plus last.ckpt/resume.pt allow
    picking up an interrupted run with ``resume=True``.
    """
    seed = config.seeds[0] if seed is None else seed
    _check_compatible(dataset, config)
    kind = config.model_kind
    weights = config.effective_weights()
    started = time.time()

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(seed)
    model = build_model(_model_config_for(config))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(seed)

    strong = dataset.strong
    weak = dataset.weak_originals
    strong_partial = _strong_partial_index(dataset)
    sub = max(1, config.batch_size // 2)
    if kind in ("single", *DUAL_KINDS):
        steps_per_epoch = math.ceil(len(weak) / sub)
    else:
        steps_per_epoch = math.ceil(len(strong) / config.batch_size)
    strong_cycler = _Cycler(len(strong), rng)

    audit_before = dataset.audit.count
    epoch_rows: list[dict] = []
    best_val = -1.0
    best_epoch = -1
    best_state = copy.deepcopy(model.state_dict())
    start_epoch = 0
    global_step = 0

    if resume and out_path is not None and (out_path / "resume.pt").exists():
        saved = torch.load(out_path / "resume.pt", map_location="cpu", weights_only=False)
        restored, _ = load_checkpoint(out_path / "last.ckpt")
        model.load_state_dict(restored.state_dict())
        optimizer.load_state_dict(saved["optimizer"])
        torch.set_rng_state(saved["torch_rng"])
        rng.bit_generator.state = saved["np_rng"]
        strong_cycler.load_state(saved["strong_cycler"])
        epoch_rows = saved["epoch_rows"]
        best_val = saved["best_val"]
        best_epoch = saved["best_epoch"]
        best_state = saved["best_state"]
        start_epoch = saved["epoch"] + 1
        global_step = saved["global_step"]

    if out_path is not None:
        _write_config_snapshot(out_path / "config.ini", config, seed)
        (out_path / RUNNING_MARKER).touch()

    serving = "bottom" if config.is_dual else "top"

    for epoch in range(start_epoch, config.epochs):
        model.train()
        epoch_reports: list[LossReport] = []
        weak_order = [int(i) for i in rng.permutation(len(weak))] if weak else []

        for step in range(steps_per_epoch):
            if kind in ("single", *DUAL_KINDS):
                weak_take = weak_order[step * sub:(step + 1) * sub]
                if not weak_take:
                    weak_take = weak_order[:sub]
                strong_take = strong_cycler.take(len(weak_take))
                batch_strong = [strong[i] for i in strong_take]
                batch_weak = [weak[i] for i in weak_take]
            else:
                strong_take = strong_cycler.take(
                    min(config.batch_size, len(strong))
                )
                batch_strong = [strong[i] for i in strong_take]
                batch_weak = []

            images = _stack_images(
                [s.image for s in batch_strong] + [s.image for s in batch_weak]
            )
            top, bottom = model(images)
            report = _step_loss(
                kind, weights, config.block_teacher_grad, optimizer,
                top, bottom, batch_strong, batch_weak, strong_partial,
            )
            epoch_reports.append(report)
            global_step += 1
            if step_hook is not None:
                step_hook(global_step, report)

        _, val_summary = evaluate_model(model, serving, dataset.val, config.fg_class)
        val_dsc = val_summary["mean_dsc"]
        row = {
            "epoch": epoch,
            "total": float(np.mean([r.total for r in epoch_reports])),
            "l_s": float(np.mean([r.l_s for r in epoch_reports])),
            "l_w": float(np.mean([r.l_w for r in epoch_reports])),
            "l_kd": float(np.mean([r.l_kd for r in epoch_reports])),
            "l_ent": float(np.mean([r.l_ent for r in epoch_reports])),
            "val_dsc": val_dsc,
        }
        epoch_rows.append(row)
        if epoch_hook is not None:
            epoch_hook(epoch, row)

        if val_dsc > best_val:
            best_val = val_dsc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

        if out_path is not None:
            save_checkpoint(model, out_path / "last.ckpt", step=global_step)
            torch.save(
                {
                    "epoch": epoch,
                    "global_step": global_step,
                    "optimizer": optimizer.state_dict(),
                    "torch_rng": torch.get_rng_state(),
                    "np_rng": rng.bit_generator.state,
                    "strong_cycler": strong_cycler.state(),
                    "epoch_rows": epoch_rows,
                    "best_val": best_val,
                    "best_epoch": best_epoch,
                    "best_state": best_state,
                },
                out_path / "resume.pt",
            )

    model.load_state_dict(best_state)
    test_rows: dict[str, list[MetricRow]] = {}
    test_summary: dict[str, dict[str, float]] = {}
    for branch in ("top", "bottom") if model.is_dual else ("top",):
        rows, summary = evaluate_model(model, branch, dataset.test, config.fg_class)
        test_rows[branch] = rows
        test_summary[branch] = summary

    record = RunRecord(
        config=config.snapshot(seed),
        seed=seed,
        epoch_rows=epoch_rows,
        best_epoch=best_epoch,
        best_val_dsc=best_val,
        best_state=best_state,
        test_rows=test_rows,
        test_summary=test_summary,
        wall_clock=time.time() - started,
        audit_reads=dataset.audit.count - audit_before,
        out_dir=out_path,
    )

    if out_path is not None:
        save_checkpoint(model, out_path / "best.ckpt", step=global_step)
        _write_epoch_csv(out_path / "epochs.csv", epoch_rows)
        for branch, rows in test_rows.items():
            write_metrics_csv(rows, out_path / f"metrics_{branch}.csv")
        (out_path / "resume.pt").unlink(missing_ok=True)
        (out_path / RUNNING_MARKER).unlink(missing_ok=True)
    return record


def _step_loss(kind: str, weights: LossWeights, block_teacher: bool, optimizer,
               top: torch.Tensor, bottom: torch.Tensor | None,
               batch_strong: list[LabeledSample], batch_weak: list[PartialSample],
               strong_partial: dict[str, PartialSample]) -> LossReport:
    n_strong = len(batch_strong)

    def field_at(i: int, logits: torch.Tensor):
        return softmax(LogitField(logits[i].permute(1, 2, 0)))

    if bottom is not None:
        batch: list[BatchSample] = []
        for i, s in enumerate(batch_strong):
            out = DualOutput(field_at(i, top), field_at(i, bottom))
            batch.append(
                BatchSample(
                    output=out,
                    dense=s.mask,
                    partial=strong_partial[s.sample_id].mask,
                    weak=False,
                )
            )
        for j, s in enumerate(batch_weak):
            i = n_strong + j
            out = DualOutput(field_at(i, top), field_at(i, bottom))
            batch.append(BatchSample(output=out, partial=s.mask, weak=True))
        terms = losses.batch_terms(batch, block_teacher_grad=block_teacher)
        total = losses.weighted_total(terms, weights)
        report = losses.report(terms, weights)
    else:
        # single-branch kinds: dense and sparse cross-entropy on one head
        sum_s = torch.zeros(())
        n_s = 0
        sum_w = torch.zeros(())
        n_w = 0
        for i, s in enumerate(batch_strong):
            pred = field_at(i, top)
            n = s.mask.height * s.mask.width
            sum_s = sum_s + losses.full_ce(pred, s.mask) * n
            n_s += n
            if weights.lambda_w and s.sample_id in strong_partial:
                pm = strong_partial[s.sample_id].mask
                sum_w = sum_w + losses.partial_ce(pred, pm) * pm.num_labeled
                n_w += pm.num_labeled
        for j, s in enumerate(batch_weak):
            pred = field_at(n_strong + j, top)
            sum_w = sum_w + losses.partial_ce(pred, s.mask) * s.mask.num_labeled
            n_w += s.mask.num_labeled
        l_s = sum_s / n_s if n_s else torch.zeros(())
        l_w = sum_w / n_w if n_w else torch.zeros(())
        total = l_s + weights.lambda_w * l_w if weights.lambda_w else l_s
        report = LossReport(
            total=float(l_s) + weights.lambda_w * float(l_w),
            l_s=float(l_s), l_w=float(l_w), l_kd=0.0, l_ent=0.0,
            pixels_s=n_s, pixels_w=n_w, pixels_kd=0, pixels_ent=0,
        )

    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return report


def _write_config_snapshot(path: Path, config: TrainConfig, seed: int) -> None:
    parser = configparser.ConfigParser()
    snap = config.snapshot(seed)
    parser["run"] = {
        k: str(v) for k, v in snap.items() if k not in ("weights", "model", "seeds")
    }
    parser["run"]["seeds"] = ",".join(str(s) for s in snap["seeds"])
    parser["weights"] = {k: str(v) for k, v in snap["weights"].items()}
    parser["model"] = {k: str(v) for k, v in snap["model"].items()}
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)


def _write_epoch_csv(path: Path, rows: list[dict]) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "total", "loss_full", "loss_partial",
                    "loss_distill", "loss_entropy", "val_dsc"])
        for r in rows:
            w.writerow([
                r["epoch"], f"{r['total']:.6f}", f"{r['l_s']:.6f}",
                f"{r['l_w']:.6f}", f"{r['l_kd']:.6f}", f"{r['l_ent']:.6f}",
                f"{r['val_dsc']:.6f}",
            ])


def run_seeds(dataset: MixedDataset, config: TrainConfig,
              out_dir: str | Path | None = None) -> list[RunRecord]:
    """Train every configured seed and aggregate the results."""
    records = []
    for seed in config.seeds:
        seed_dir = Path(out_dir) / f"seed{seed}" if out_dir is not None else None
        records.append(train(dataset, config, seed=seed, out_dir=seed_dir))
    if out_dir is not None:
        write_summary_csv(aggregate_runs(records), Path(out_dir) / "summary.csv")
    return records


def generate_proposals(model: DualBranchUNet, images: list[ImageGrid],
                       branch: str | None = None) -> list[DenseMask]:
    """Hard per-pixel argmax masks from a trained model.

    Uses the bottom branch when present unless told otherwise; argmax ties
    resolve to the lowest class index.
    """
    branch = branch or ("bottom" if model.is_dual else "top")
    if branch == "bottom" and not model.is_dual:
        raise ValueError("model has no bottom branch")
    proposals = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for image in images:
            result = forward_image(model, image)
            logits = result.top if branch == "top" else result.bottom
            proposals.append(argmax_labels(softmax(logits)))
    if was_training:
        model.train()
    return proposals


def proposal_dataset(dataset: MixedDataset, base_model: DualBranchUNet,
                     branch: str | None = None) -> MixedDataset:
    """Strong set augmented with proposal-labeled weak images.

    Proposals come from the base model's predictions on the weak originals;
    their held-back dense masks are never touched.
    """
    from .data import AccessAudit, AuditedMaskStore

    weak_orig = dataset.weak_originals
    proposals = generate_proposals(base_model, [s.image for s in weak_orig], branch)
    augmented = list(dataset.strong) + [
        LabeledSample(s.sample_id, s.image, mask)
        for s, mask in zip(weak_orig, proposals)
    ]
    audit = AccessAudit()
    return MixedDataset(
        strong=augmented,
        weak=[],
        val=dataset.val,
        test=dataset.test,
        weak_dense=AuditedMaskStore({}, audit),
        audit=audit,
    )


def proposal_retrain(dataset: MixedDataset, base: RunRecord, config: TrainConfig,
                     seed: int | None = None,
                     out_dir: str | Path | None = None) -> RunRecord:
    """Retrain a single-branch model on dense labels plus proposals."""
    if base.best_state is None:
        raise ValueError("base record carries no trained checkpoint")
    base_config = TrainConfig(**{**_config_from_snapshot(base.config)})
    base_model = build_model(_model_config_for(base_config))
    base_model.load_state_dict(base.best_state)
    retrain_config = replace(config, model_kind="proposal_retrain")
    augmented = proposal_dataset(dataset, base_model)
    return train(augmented, retrain_config, seed=seed, out_dir=out_dir)


def _config_from_snapshot(snap: dict) -> dict:
    cfg = dict(snap)
    cfg.pop("seed", None)
    cfg["weights"] = LossWeights(**cfg["weights"])
    cfg["model"] = ModelConfig(**cfg["model"])
    cfg["seeds"] = tuple(cfg["seeds"])
    return cfg


def aggregate_runs(records: list[RunRecord]) -> dict:
    """Mean and standard deviation of test metrics across seeds, per branch.

    All records must share a config except for the seed.
    """
    if not records:
        raise ValueError("no records to aggregate")
    reference = {k: v for k, v in records[0].config.items() if k != "seed"}
    for r in records[1:]:
        other = {k: v for k, v in r.config.items() if k != "seed"}
        if other != reference:
            raise ValueError("records come from different configs; refusing to aggregate")
    branches = sorted(records[0].test_summary)
    out: dict = {"model_kind": reference["model_kind"], "num_runs": len(records), "branches": {}}
    for branch in branches:
        dscs = [r.test_summary[branch]["mean_dsc"] for r in records]
        hds = [r.test_summary[branch]["mean_hd95"] for r in records]
        out["branches"][branch] = {
            "dsc_mean": float(np.mean(dscs)),
            "dsc_std": float(np.std(dscs)),
            "hd95_mean": float(np.mean(hds)),
            "hd95_std": float(np.std(hds)),
        }
    return out


def write_summary_csv(summary: dict, path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "branch", "dsc_mean", "dsc_std", "hd95_mean", "hd95_std"])
        for branch, stats in summary["branches"].items():
            w.writerow([
                summary["model_kind"], branch,
                f"{stats['dsc_mean']:.6f}", f"{stats['dsc_std']:.6f}",
                f"{stats['hd95_mean']:.6f}", f"{stats['hd95_std']:.6f}",
            ])


def ablate_lambda_kd(dataset: MixedDataset, values: list[float], config: TrainConfig,
                     out_dir: str | Path | None = None) -> list[dict]:
    """Sweep the distillation weight on the full method, one run set per value."""
    if not values:
        raise ValueError("values must be non-empty")
    results = []
    for value in values:
        cfg = replace(
            config,
            model_kind="kl_ent",
            weights=replace(config.weights, lambda_kd=float(value)),
        )
        sub_dir = Path(out_dir) / f"lambda_kd_{value:g}" if out_dir is not None else None
        records = run_seeds(dataset, cfg, sub_dir)
        summary = aggregate_runs(records)
        summary["lambda_kd"] = float(value)
        results.append(summary)
    return results


def entropy_trend_ok(record: RunRecord, slack: float = 0.10) -> bool:
    """Check the confidence term keeps shrinking late in training.

    Over the last 20% of epochs, the mean entropy of the second half of that
    window must not exceed the first half by more than ``slack``.
    """
    values = [row["l_ent"] for row in record.epoch_rows]
    window = values[-max(2, len(values) // 5):]
    half = len(window) // 2
    first = float(np.mean(window[:half]))
    second = float(np.mean(window[half:]))
    return second <= first * (1.0 + slack) + 1e-12
