"""Missing-modality protocols: fixed subsets, random masking, routing.

Canonical modality order within subset names is (l, a, v), matching the
fusion slot order, so the two-modality heads are named "la", "lv", "av".
The canonical subset enumeration order is (la, lv, av, l, a, v).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import Batch, MODALITIES
from .errors import ConfigError

NAME_ORDER = ("l", "a", "v")
TEACHER_HEAD = "t"
STUDENT_HEADS = ("la", "lv", "av", "l", "a", "v")
ALL_HEADS = (TEACHER_HEAD,) + STUDENT_HEADS
BIMODAL_HEADS = ("la", "lv", "av")
UNIMODAL_HEADS = ("l", "a", "v")


@dataclass(frozen=True)
class ModalityMask:
    """Per-sample availability flags; never empty."""

    available: frozenset[str]

    def __post_init__(self):
        avail = frozenset(self.available)
        if not avail:
            raise ConfigError("modality mask must keep at least one modality")
        if not avail <= set(MODALITIES):
            raise ConfigError(f"unknown modalities in mask: {sorted(avail)}")
        object.__setattr__(self, "available", avail)

    @property
    def name(self) -> str:
        return "".join(m for m in NAME_ORDER if m in self.available)

    @property
    def is_complete(self) -> bool:
        return len(self.available) == 3


COMPLETE_MASK = ModalityMask(frozenset(MODALITIES))


@dataclass(frozen=True)
class MaskAssignment:
    """Dataset-aligned masks plus the realized missing rate."""

    masks: tuple[ModalityMask, ...]
    realized_mr: float

    def __len__(self) -> int:
        return len(self.masks)


def enumerate_fixed_subsets() -> list[ModalityMask]:
    """The six incomplete subsets in the canonical order (la, lv, av, l, a, v)."""
    return [
        ModalityMask(frozenset(s))
        for s in ({"l", "a"}, {"l", "v"}, {"a", "v"}, {"l"}, {"a"}, {"v"})
    ]


def missing_rate(masks: Sequence[ModalityMask] | MaskAssignment) -> float:
    """1 - (total available modalities) / (3 * n_samples)."""
    if isinstance(masks, MaskAssignment):
        masks = masks.masks
    if len(masks) == 0:
        raise ConfigError("missing rate of an empty assignment is undefined")
    total = 0
    for mask in masks:
        if len(mask.available) == 0:
            raise ConfigError("empty mask in assignment")
        total += len(mask.available)
    return 1.0 - total / (3.0 * len(masks))


def sample_random_masks(n_samples: int, target_mr: float, seed: int) -> MaskAssignment:
    """Sample per-sample masks hitting ``target_mr`` as closely as possible.

    A global quota of missing modality slots, round(3 * n * target_mr), is
    spread over samples by a seeded shuffle (each sample losing at most two
    modalities); the concrete pattern for each sample is then drawn
    uniformly among subsets of the assigned size. The realized rate is the
    closest achievable multiple of 1/(3n).
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if target_mr < 0:
        raise ConfigError(f"target_mr must be >= 0, got {target_mr}")
    if target_mr >= 0.7:
        raise ConfigError(
            f"target_mr {target_mr} unreachable: every sample keeps one modality, so MR < 0.7"
        )
    rng = np.random.default_rng(seed)
    quota = int(round(3 * n_samples * target_mr))
    quota = min(quota, 2 * n_samples)
    base, extra = divmod(quota, n_samples)
    counts = np.full(n_samples, base, dtype=np.int64)
    counts[:extra] += 1
    rng.shuffle(counts)

    masks = []
    for c in counts:
        if c == 0:
            masks.append(COMPLETE_MASK)
        elif c == 1:
            drop = NAME_ORDER[rng.integers(3)]
            masks.append(ModalityMask(frozenset(set(MODALITIES) - {drop})))
        else:
            keep = NAME_ORDER[rng.integers(3)]
            masks.append(ModalityMask(frozenset({keep})))
    return MaskAssignment(masks=tuple(masks), realized_mr=quota / (3.0 * n_samples))


def apply_mask(batch: Batch, masks: Sequence[ModalityMask] | MaskAssignment) -> Batch:
    """Zero unavailable modalities and record availability flags.

    Available modalities are untouched; routing reads only the flags, so
    the zeroing is defense in depth.
    """
    if isinstance(masks, MaskAssignment):
        masks = masks.masks
    if len(masks) != len(batch):
        raise ConfigError(f"mask count {len(masks)} != batch size {len(batch)}")
    padded = {m: t.clone() for m, t in batch.padded.items()}
    for i, mask in enumerate(masks):
        for m in MODALITIES:
            if m not in mask.available:
                padded[m][i].zero_()
    return Batch(
        samples=batch.samples,
        padded=padded,
        pad_mask={m: t.clone() for m, t in batch.pad_mask.items()},
        labels=batch.labels.clone(),
        availability=tuple(mask.available for mask in masks),
    )


def route(mask: ModalityMask) -> str:
    """Map an availability mask to its prediction head id."""
    if len(mask.available) == 0:
        raise ConfigError("cannot route an empty mask")
    if mask.is_complete:
        return TEACHER_HEAD
    return mask.name


def masks_to_json(masks: Sequence[ModalityMask] | MaskAssignment) -> str:
    """Serialize masks as a JSON list of modality lists, e.g. [["l","v"],["a"]]."""
    if isinstance(masks, MaskAssignment):
        masks = masks.masks
    payload = [[m for m in NAME_ORDER if m in mask.available] for mask in masks]
    return json.dumps(payload)


def masks_from_json(text: str) -> list[ModalityMask]:
    try:
        payload = json.loads(text)
        return [ModalityMask(frozenset(entry)) for entry in payload]
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"malformed mask JSON: {exc}") from exc


def save_masks(masks: Sequence[ModalityMask] | MaskAssignment, path: str | Path) -> None:
    Path(path).write_text(masks_to_json(masks) + "\n", encoding="utf-8")


def load_masks(path: str | Path) -> list[ModalityMask]:
    return masks_from_json(Path(path).read_text(encoding="utf-8"))
