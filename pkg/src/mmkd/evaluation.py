"""Missing-modality evaluation: fixed and random protocols, ablation runner."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import torch

from .data import MultimodalDataset, iter_batches
from .errors import ConfigError
from .metrics import acc2, acc7, mae
from .model import FusionModel, ModelConfig
from .protocols import (
    BIMODAL_HEADS,
    COMPLETE_MASK,
    MaskAssignment,
    ModalityMask,
    UNIMODAL_HEADS,
    apply_mask,
    enumerate_fixed_subsets,
    missing_rate,
    sample_random_masks,
)
from .training import TrainConfig, train

# Row order for the fixed-protocol table mirrors the conventional report
# layout (two-modality subsets, then single, complete last).
FIXED_DISPLAY_ORDER = ("la", "lv", "av", "l", "v", "a")
SUBSET_LABELS = {
    "la": "L+A",
    "lv": "L+V",
    "av": "A+V",
    "l": "L",
    "v": "V",
    "a": "A",
    "lav": "L+A+V",
}


def render_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def fmt(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt("-" * w for w in widths)]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines)


def acc_cell(a2: float, a7: float) -> str:
    """The conventional 'Acc2/Acc7' cell, percentages with one decimal."""
    return f"{a2 * 100:.1f}/{a7 * 100:.1f}"


@dataclass
class EvalRow:
    key: str
    label: str
    acc2: float
    acc7: float
    mae: float
    n_eval: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.acc2 <= 1.0 and 0.0 <= self.acc7 <= 1.0):
            raise ConfigError(f"row {self.key!r}: accuracies must lie in [0, 1]")
        if self.n_eval <= 0:
            raise ConfigError(f"row {self.key!r}: n_eval must be positive")


@dataclass
class EvalTable:
    title: str
    rows: list[EvalRow]

    def row(self, key: str) -> EvalRow:
        for r in self.rows:
            if r.key == key:
                return r
        raise KeyError(key)

    def to_json_dict(self) -> dict:
        return {
            "title": self.title,
            "rows": [
                {
                    "key": r.key,
                    "label": r.label,
                    "acc2": r.acc2,
                    "acc7": r.acc7,
                    "mae": r.mae,
                    "n_eval": r.n_eval,
                    **({"extra": r.extra} if r.extra else {}),
                }
                for r in self.rows
            ],
        }

    def to_text(self) -> str:
        body = [
            [r.label, acc_cell(r.acc2, r.acc7), f"{r.mae:.4f}", str(r.n_eval)]
            for r in self.rows
        ]
        return self.title + "\n" + render_table(
            ["Condition", "Acc2/Acc7", "MAE", "N"], body
        )


@torch.no_grad()
def predict_masked(
    model: FusionModel,
    dataset: MultimodalDataset,
    masks: Sequence[ModalityMask] | MaskAssignment,
    batch_size: int = 64,
) -> np.ndarray:
    """Routed predictions for a dataset under per-sample masks."""
    if isinstance(masks, MaskAssignment):
        masks = masks.masks
    if len(masks) != len(dataset):
        raise ConfigError(f"mask count {len(masks)} != dataset size {len(dataset)}")
    was_training = model.training
    model.eval()
    preds = []
    cursor = 0
    for batch in iter_batches(dataset, batch_size):
        masked = apply_mask(batch, masks[cursor : cursor + len(batch)])
        cursor += len(batch)
        preds.append(model.forward_routed(masked).preds.cpu().numpy())
    if was_training:
        model.train()
    return np.concatenate(preds)


def _metrics_row(key, label, preds, labels, **extra) -> EvalRow:
    return EvalRow(
        key=key,
        label=label,
        acc2=acc2(preds, labels),
        acc7=acc7(preds, labels),
        mae=mae(preds, labels),
        n_eval=len(labels),
        extra=dict(extra),
    )


def evaluate_fixed(
    model: FusionModel, dataset: MultimodalDataset, batch_size: int = 64
) -> EvalTable:
    """Mask the whole test set to each subset in turn, plus a complete row."""
    labels = dataset.labels()
    by_key = {}
    for mask in enumerate_fixed_subsets():
        preds = predict_masked(model, dataset, [mask] * len(dataset), batch_size)
        by_key[mask.name] = _metrics_row(mask.name, SUBSET_LABELS[mask.name], preds, labels)
    complete_preds = predict_masked(
        model, dataset, [COMPLETE_MASK] * len(dataset), batch_size
    )
    by_key["lav"] = _metrics_row("lav", SUBSET_LABELS["lav"], complete_preds, labels)
    rows = [by_key[k] for k in FIXED_DISPLAY_ORDER] + [by_key["lav"]]
    return EvalTable(title="Fixed missing protocol", rows=rows)


def evaluate_random(
    model: FusionModel,
    dataset: MultimodalDataset,
    mr_list: Sequence[float],
    seed: int,
    batch_size: int = 64,
) -> tuple[EvalTable, dict[str, MaskAssignment]]:
    """One row per target missing rate plus the arithmetic-mean row."""
    if len(mr_list) == 0:
        raise ConfigError("mr_list must not be empty")
    labels = dataset.labels()
    rows = []
    assignments: dict[str, MaskAssignment] = {}
    for i, mr in enumerate(mr_list):
        row_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(i,)).generate_state(1)[0])
        assignment = sample_random_masks(len(dataset), mr, row_seed)
        key = f"{mr:g}"
        assignments[key] = assignment
        preds = predict_masked(model, dataset, assignment, batch_size)
        rows.append(
            _metrics_row(
                key,
                f"MR={mr:g}",
                preds,
                labels,
                target_mr=float(mr),
                realized_mr=assignment.realized_mr,
                recomputed_mr=missing_rate(assignment),
                seed=row_seed,
            )
        )
    avg = EvalRow(
        key="avg",
        label="Avg.",
        acc2=sum(r.acc2 for r in rows) / len(rows),
        acc7=sum(r.acc7 for r in rows) / len(rows),
        mae=sum(r.mae for r in rows) / len(rows),
        n_eval=sum(r.n_eval for r in rows),
    )
    return EvalTable(title="Random missing protocol", rows=rows + [avg]), assignments


@dataclass
class AblationCell:
    acc2: float
    acc7: float
    mae: float

    def to_dict(self) -> dict:
        return {"acc2": self.acc2, "acc7": self.acc7, "mae": self.mae}


@dataclass
class AblationRow:
    mode: str
    complete: AblationCell
    bimodal_avg: AblationCell
    unimodal_avg: AblationCell
    repeats: int
    seeds: list[int]


@dataclass
class AblationResult:
    rows: list[AblationRow]

    def row(self, mode: str) -> AblationRow:
        for r in self.rows:
            if r.mode == mode:
                return r
        raise KeyError(mode)

    def to_json_dict(self) -> dict:
        return {
            "rows": [
                {
                    "mode": r.mode,
                    "complete": r.complete.to_dict(),
                    "bimodal_avg": r.bimodal_avg.to_dict(),
                    "unimodal_avg": r.unimodal_avg.to_dict(),
                    "repeats": r.repeats,
                    "seeds": r.seeds,
                }
                for r in self.rows
            ]
        }

    def to_text(self) -> str:
        body = [
            [
                r.mode,
                acc_cell(r.complete.acc2, r.complete.acc7),
                acc_cell(r.bimodal_avg.acc2, r.bimodal_avg.acc7),
                acc_cell(r.unimodal_avg.acc2, r.unimodal_avg.acc7),
                str(r.repeats),
            ]
            for r in self.rows
        ]
        headers = ["Set", "L+A+V", "Avg. {L+V, L+A, A+V}", "Avg. {L, A, V}", "Seeds"]
        return "Ablation (auxiliary-loss comparison)\n" + render_table(headers, body)


def _mean_cell(cells: Sequence[AblationCell]) -> AblationCell:
    return AblationCell(
        acc2=sum(c.acc2 for c in cells) / len(cells),
        acc7=sum(c.acc7 for c in cells) / len(cells),
        mae=sum(c.mae for c in cells) / len(cells),
    )


def _cell_from_rows(table: EvalTable, keys: Sequence[str]) -> AblationCell:
    rows = [table.row(k) for k in keys]
    return AblationCell(
        acc2=sum(r.acc2 for r in rows) / len(rows),
        acc7=sum(r.acc7 for r in rows) / len(rows),
        mae=sum(r.mae for r in rows) / len(rows),
    )


def ablate(
    train_dataset: MultimodalDataset,
    test_dataset: MultimodalDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    modes: Sequence[str],
    repeats: int = 1,
    valid_dataset: MultimodalDataset | None = None,
    log_fn=None,
) -> AblationResult:
    """Train one model per auxiliary-loss mode (shared seeds and data order)
    and compare complete-input and averaged subset metrics."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if len(modes) == 0:
        raise ConfigError("modes must not be empty")
    rows = []
    for mode in modes:
        complete_cells, bi_cells, uni_cells, seeds = [], [], [], []
        for r in range(repeats):
            cfg = replace(train_cfg, loss_mode=mode, seed=train_cfg.seed + r)
            seeds.append(cfg.seed)
            if log_fn:
                log_fn(f"ablate: mode={mode} seed={cfg.seed}")
            result = train(train_dataset, model_cfg, cfg, valid_dataset=valid_dataset)
            model = result.load_best()
            table = evaluate_fixed(model, test_dataset, cfg.batch_size)
            complete_cells.append(_cell_from_rows(table, ["lav"]))
            bi_cells.append(_cell_from_rows(table, list(BIMODAL_HEADS)))
            uni_cells.append(_cell_from_rows(table, list(UNIMODAL_HEADS)))
        rows.append(
            AblationRow(
                mode=mode,
                complete=_mean_cell(complete_cells),
                bimodal_avg=_mean_cell(bi_cells),
                unimodal_avg=_mean_cell(uni_cells),
                repeats=repeats,
                seeds=seeds,
            )
        )
    return AblationResult(rows=rows)
