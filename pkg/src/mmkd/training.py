"""Joint online optimization of the teacher and all six students."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .data import Batch, MultimodalDataset, iter_batches
from .errors import ConfigError, TrainingDiverged
from .losses import ContrastiveConfig, LOSS_MODES, LossReport, total_loss
from .metrics import mae
from .model import ForwardOutput, FusionModel, ModelConfig, build_model
from .protocols import ALL_HEADS


@dataclass
class TrainConfig:
    """Optimization hyperparameters; the seed is recorded in all outputs."""

    batch_size: int = 64
    lr: float = 1e-4
    epochs: int = 65
    seed: int = 0
    loss_mode: str = "mvsc"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    val_frac: float = 0.1
    aux_weight: float = 1.0
    lam: float = 0.9
    tau: float = 0.1
    normalize: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (self.lr > 0):
            raise ConfigError("lr must be > 0")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}; expected {LOSS_MODES}")
        if not (0.0 < self.val_frac < 1.0):
            raise ConfigError("val_frac must be in (0, 1)")

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(lam=self.lam, tau=self.tau, normalize=self.normalize)

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "lr": self.lr,
            "epochs": self.epochs,
            "seed": self.seed,
            "loss_mode": self.loss_mode,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
            "val_frac": self.val_frac,
            "aux_weight": self.aux_weight,
            "lam": self.lam,
            "tau": self.tau,
            "normalize": self.normalize,
        }


@dataclass
class TrainResult:
    model: FusionModel
    best_state: dict
    best_epoch: int
    best_val_mae: float
    history: list[dict]

    def load_best(self) -> FusionModel:
        self.model.load_state_dict(self.best_state)
        return self.model


def split_train_valid(
    dataset: MultimodalDataset, val_frac: float, seed: int
) -> tuple[MultimodalDataset, MultimodalDataset]:
    """Deterministic seeded holdout of a validation subset."""
    n = len(dataset)
    n_val = max(1, int(round(n * val_frac)))
    if n_val >= n:
        raise ConfigError(f"val_frac {val_frac} leaves no training samples (n={n})")
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train_samples = [s for i, s in enumerate(dataset.samples) if i not in val_idx]
    val_samples = [dataset.samples[i] for i in sorted(val_idx)]
    return (
        MultimodalDataset(split=dataset.split, dims=dict(dataset.dims), samples=train_samples),
        MultimodalDataset(split="valid", dims=dict(dataset.dims), samples=val_samples),
    )


def first_nonfinite_path(out: ForwardOutput, report: LossReport) -> str | None:
    """Name the first non-finite tensor along the forward/loss chain."""
    for name, t in out.intermediates.items():
        if not torch.isfinite(t).all():
            return f"teacher/{name}"
    for head in ALL_HEADS:
        if not torch.isfinite(out.reps[head]).all():
            return f"reps/{head}"
    for head in ALL_HEADS:
        if not torch.isfinite(out.preds[head]).all():
            return f"preds/{head}"
    for name, value in (
        ("loss/regression", report.l_regression),
        ("loss/mvsc", report.l_mvsc),
        ("loss/mse", report.l_mse),
        ("loss/total", report.l_total),
    ):
        if not np.isfinite(value):
            return name
    return None


@torch.no_grad()
def validation_mae(
    model: FusionModel, dataset: MultimodalDataset, batch_size: int
) -> dict[str, float]:
    """Complete-input MAE per head plus their mean (checkpoint criterion)."""
    was_training = model.training
    model.eval()
    preds = {h: [] for h in ALL_HEADS}
    labels = []
    for batch in iter_batches(dataset, batch_size):
        out = model.forward_all(batch)
        for h in ALL_HEADS:
            preds[h].append(out.preds[h].detach().cpu().numpy())
        labels.append(batch.labels.numpy())
    if was_training:
        model.train()
    y = np.concatenate(labels)
    by_head = {h: mae(np.concatenate(preds[h]), y) for h in ALL_HEADS}
    by_head["mean"] = sum(by_head[h] for h in ALL_HEADS) / len(ALL_HEADS)
    return by_head


def train(
    dataset: MultimodalDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    valid_dataset: MultimodalDataset | None = None,
    model: FusionModel | None = None,
    log_path: str | Path | None = None,
    progress=None,
) -> TrainResult:
    """Jointly optimize all parameters on complete data.

    Missingness never enters training; one Adam step minimizes the
    combined loss for all heads. The best parameters by validation MAE
    (mean over the 7 heads) are snapshotted. If ``valid_dataset`` is None
    a seeded fraction of ``dataset`` is held out. History entry 0 records
    the pre-training validation MAE; entries 1..epochs record per-epoch
    mean losses and validation MAE.

    Raises TrainingDiverged naming the first non-finite tensor path if the
    loss leaves the reals.
    """
    torch.manual_seed(cfg.seed)
    if valid_dataset is None:
        train_ds, valid_ds = split_train_valid(dataset, cfg.val_frac, cfg.seed)
    else:
        train_ds, valid_ds = dataset, valid_dataset
    if model is None:
        model = build_model(model_cfg, cfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    contrastive = cfg.contrastive()
    shuffle_rng = np.random.default_rng(cfg.seed)

    history: list[dict] = []
    val0 = validation_mae(model, valid_ds, cfg.batch_size)
    history.append({"epoch": 0, "val_mae": val0["mean"], "val_mae_by_head": val0})
    best_state = copy.deepcopy(model.state_dict())
    best_val = val0["mean"]
    best_epoch = 0

    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if log_file:
            log_file.write(json.dumps(history[0]) + "\n")
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(len(train_ds)).tolist()
            sums: dict[str, float] = {}
            n_steps = 0
            for batch in iter_batches(train_ds, cfg.batch_size, order, drop_singleton=True):
                out = model.forward_all(batch)
                loss, report = total_loss(
                    cfg.loss_mode,
                    out.preds,
                    batch.labels.to(model.dtype),
                    out.reps,
                    out.intermediates,
                    contrastive,
                    cfg.aux_weight,
                )
                if not torch.isfinite(loss):
                    path = first_nonfinite_path(out, report) or "loss/total"
                    raise TrainingDiverged(
                        f"non-finite value in '{path}' at epoch {epoch}, step {n_steps}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                for key, value in report.to_dict().items():
                    if isinstance(value, float):
                        sums[key] = sums.get(key, 0.0) + value
                n_steps += 1
            val = validation_mae(model, valid_ds, cfg.batch_size)
            entry = {
                "epoch": epoch,
                "loss": {k: v / n_steps for k, v in sums.items()},
                "val_mae": val["mean"],
                "val_mae_by_head": val,
                "seconds": round(time.perf_counter() - t0, 3),
            }
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
            if progress:
                progress(entry)
            if val["mean"] < best_val:
                best_val = val["mean"]
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
    finally:
        if log_file:
            log_file.close()
    return TrainResult(
        model=model,
        best_state=best_state,
        best_epoch=best_epoch,
        best_val_mae=best_val,
        history=history,
    )
