"""Training objectives: multi-view supervised contrastive loss, joint MAE
regression loss, MSE feature-distillation variants, and their combination.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .protocols import ALL_HEADS, BIMODAL_HEADS, STUDENT_HEADS

LOSS_MODES = ("mvsc", "uniview", "mse_va", "mse_pairs", "mse_all", "none")
MSE_VARIANTS = ("va", "pairs", "all")


@dataclass
class ContrastiveConfig:
    """Label-distance threshold, temperature, and similarity normalization.

    ``normalize`` applies L2 normalization before dot products; raw dot
    products with a small temperature overflow single precision and are
    kept only as an ablation switch.
    """

    lam: float = 0.9
    tau: float = 0.1
    normalize: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if not (self.tau > 0):
            raise ConfigError(f"tau must be > 0, got {self.tau}")


@dataclass
class LossReport:
    """One training step's loss values, JSON-serializable."""

    mode: str
    l_regression: float
    regression_by_head: dict[str, float]
    l_mvsc: float = 0.0
    l_mse: float = 0.0
    l_total: float = 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "l_regression": self.l_regression,
            "regression_by_head": dict(self.regression_by_head),
            "l_mvsc": self.l_mvsc,
            "l_mse": self.l_mse,
            "l_total": self.l_total,
        }


def build_view_set(
    reps: Mapping[str, torch.Tensor], labels: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack the 7 per-sample representations into one view set.

    Rows are grouped by head in the order (t, la, lv, av, l, a, v); every
    view carries its originating sample's label. |V| = 7 * batch.
    """
    views = torch.cat([reps[h] for h in ALL_HEADS], dim=0)
    view_labels = labels.repeat(len(ALL_HEADS))
    return views, view_labels


def mvsc_loss(
    views: torch.Tensor, labels: torch.Tensor, cfg: ContrastiveConfig
) -> torch.Tensor:
    """Distance-aware supervised contrastive loss over a view set.

    For each anchor j, positives are the other views whose labels lie
    within ``lam``; the anchor term is the mean negative log-softmax of
    positive similarities against all non-anchor views, and anchors with
    no positives contribute zero. Returns the sum over anchors.
    """
    if views.ndim != 2 or views.shape[0] != labels.shape[0]:
        raise ConfigError(
            f"views {tuple(views.shape)} and labels {tuple(labels.shape)} misaligned"
        )
    n = views.shape[0]
    if n < 2:
        raise ConfigError("contrastive loss needs at least 2 views")
    if not (cfg.tau > 0):
        raise ConfigError(f"tau must be > 0, got {cfg.tau}")
    if not torch.isfinite(views).all():
        raise ValueError("non-finite values in contrastive representations")

    if cfg.normalize:
        views = F.normalize(views, dim=1)
    sim = views @ views.T / cfg.tau
    not_self = ~torch.eye(n, dtype=torch.bool, device=views.device)
    # Stabilized log-softmax over non-anchor views.
    masked = sim.masked_fill(~not_self, float("-inf"))
    log_denom = torch.logsumexp(masked, dim=1, keepdim=True)
    log_prob = sim - log_denom

    close = (labels.unsqueeze(0) - labels.unsqueeze(1)).abs() <= cfg.lam
    positives = close & not_self
    n_pos = positives.sum(dim=1)
    per_anchor = -(log_prob * positives).sum(dim=1) / n_pos.clamp(min=1)
    return (per_anchor * (n_pos > 0)).sum()


def uniview_sc_loss(
    teacher_reps: torch.Tensor, labels: torch.Tensor, cfg: ContrastiveConfig
) -> torch.Tensor:
    """Contrastive loss restricted to the teacher representations (one view
    per sample); same formula as the multi-view loss."""
    return mvsc_loss(teacher_reps, labels, cfg)


def regression_loss(
    preds: Mapping[str, torch.Tensor], labels: torch.Tensor
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Joint MAE: teacher plus the six students, each averaged over the batch."""
    by_head = {}
    for head in ALL_HEADS:
        if head not in preds:
            raise ConfigError(f"missing prediction for head {head!r}")
        by_head[head] = (preds[head] - labels).abs().mean()
    total = by_head["t"] + sum(by_head[h] for h in STUDENT_HEADS)
    return total, by_head


def mse_kd_loss(
    variant: str,
    reps: Mapping[str, torch.Tensor],
    teacher_intermediates: Mapping[str, torch.Tensor],
) -> torch.Tensor:
    """Feature-distillation MSE against detached teacher targets.

    ``va`` aligns the uni-modal v/a representations with the teacher's
    binary-fusion head elements; ``pairs`` aligns each bi-modal
    representation with the teacher's fused representation; ``all`` is
    their sum. Targets are detached so these terms train students only.
    """
    if variant not in MSE_VARIANTS:
        raise ConfigError(f"unknown MSE KD variant {variant!r}; expected {MSE_VARIANTS}")
    parts = []
    if variant in ("va", "all"):
        va = sum(
            F.mse_loss(reps[m], teacher_intermediates[f"f_{m}"].detach())
            for m in ("v", "a")
        )
        parts.append(va)
    if variant in ("pairs", "all"):
        h_t = reps["t"].detach()
        pairs = sum(F.mse_loss(reps[pair], h_t) for pair in BIMODAL_HEADS)
        parts.append(pairs)
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def total_loss(
    mode: str,
    preds: Mapping[str, torch.Tensor],
    labels: torch.Tensor,
    reps: Mapping[str, torch.Tensor],
    teacher_intermediates: Mapping[str, torch.Tensor],
    contrastive: ContrastiveConfig | None = None,
    aux_weight: float = 1.0,
) -> tuple[torch.Tensor, LossReport]:
    """Combine the joint regression loss with the selected auxiliary loss.

    ``aux_weight`` defaults to 1 (the two terms are summed unweighted);
    it is exposed for experimentation only.
    """
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    contrastive = contrastive or ContrastiveConfig()
    reg, by_head = regression_loss(preds, labels)
    report = LossReport(
        mode=mode,
        l_regression=float(reg.detach()),
        regression_by_head={h: float(v.detach()) for h, v in by_head.items()},
    )
    if mode == "none":
        total = reg
    elif mode == "mvsc":
        views, view_labels = build_view_set(reps, labels)
        aux = mvsc_loss(views, view_labels, contrastive)
        report.l_mvsc = float(aux.detach())
        total = reg + aux_weight * aux
    elif mode == "uniview":
        aux = uniview_sc_loss(reps["t"], labels, contrastive)
        report.l_mvsc = float(aux.detach())
        total = reg + aux_weight * aux
    else:
        aux = mse_kd_loss(mode.removeprefix("mse_"), reps, teacher_intermediates)
        report.l_mse = float(aux.detach())
        total = reg + aux_weight * aux
    report.l_total = float(total.detach())
    return total, report
