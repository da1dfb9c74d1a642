"""Dataset types, synthetic generation, batching, and on-disk serialization.

A dataset directory holds one split: ``manifest.json`` plus one flat
little-endian float32 blob per modality (``feat_l.bin``, ``feat_v.bin``,
``feat_a.bin``), each sequence stored row-major (time x dim).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigError, DatasetError

MODALITIES = ("l", "v", "a")
DEFAULT_DIMS = {"l": 64, "v": 16, "a": 16}
FULL_SCALE_DIMS = {"l": 768, "v": 47, "a": 74}
LABEL_RANGE = (-3.0, 3.0)
SPLITS = ("train", "valid", "test")
MANIFEST_NAME = "manifest.json"
BLOB_NAMES = {m: f"feat_{m}.bin" for m in MODALITIES}

_SPLIT_CODES = {"train": 0, "valid": 1, "test": 2}


@dataclass(frozen=True)
class FeatureSequence:
    """A variable-length sequence of fixed-dimension feature vectors.

    ``values`` is a (length, dim) float32 matrix; length >= 1 and all
    entries finite.
    """

    modality: str
    values: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ConfigError(
                f"feature sequence must be 2-D (time x dim), got shape {values.shape}"
            )
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ConfigError(f"feature sequence has degenerate shape {values.shape}")
        if not np.isfinite(values).all():
            raise ConfigError(f"non-finite values in {self.modality!r} feature sequence")
        object.__setattr__(self, "values", values)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MultimodalSample:
    """One complete sample: all three modalities plus a label in [-3, 3]."""

    id: str
    features: dict[str, FeatureSequence]
    label: float

    def __post_init__(self):
        if set(self.features) != set(MODALITIES):
            raise ConfigError(
                f"sample {self.id!r} must carry exactly modalities {MODALITIES}, "
                f"got {sorted(self.features)}"
            )
        for m, seq in self.features.items():
            if seq.modality != m:
                raise ConfigError(f"sample {self.id!r}: feature keyed {m!r} tagged {seq.modality!r}")
        label = float(self.label)
        if not (LABEL_RANGE[0] <= label <= LABEL_RANGE[1]) or not math.isfinite(label):
            raise ConfigError(f"sample {self.id!r} label {label} outside {LABEL_RANGE}")
        object.__setattr__(self, "label", label)

    def length(self, modality: str) -> int:
        return self.features[modality].length


@dataclass
class MultimodalDataset:
    """An in-memory split of complete samples with consistent dims."""

    split: str
    dims: dict[str, int]
    samples: list[MultimodalSample]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        if set(self.dims) != set(MODALITIES):
            raise ConfigError(f"dims must cover exactly {MODALITIES}")
        for s in self.samples:
            for m in MODALITIES:
                if s.features[m].dim != self.dims[m]:
                    raise DatasetError(
                        f"record {s.id!r}: modality {m!r} dim {s.features[m].dim} "
                        f"!= dataset dim {self.dims[m]}"
                    )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> MultimodalSample:
        return self.samples[i]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64)


@dataclass
class Batch:
    """Collated samples: per-modality zero-padded tensors plus pad masks.

    ``padded[m]`` is (B, max_len_m, dim_m) float32 with exact zeros at
    padded positions; ``pad_mask[m]`` is (B, max_len_m) bool, True where
    padded. ``availability`` is set by ``protocols.apply_mask`` and is
    None for complete batches.
    """

    samples: tuple[MultimodalSample, ...]
    padded: dict[str, torch.Tensor]
    pad_mask: dict[str, torch.Tensor]
    labels: torch.Tensor
    availability: tuple[frozenset[str], ...] | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices: Sequence[int]) -> "Batch":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        avail = None
        if self.availability is not None:
            avail = tuple(self.availability[i] for i in indices)
        return Batch(
            samples=tuple(self.samples[i] for i in indices),
            padded={m: t.index_select(0, idx) for m, t in self.padded.items()},
            pad_mask={m: t.index_select(0, idx) for m, t in self.pad_mask.items()},
            labels=self.labels.index_select(0, idx),
            availability=avail,
        )


def collate(samples: Sequence[MultimodalSample]) -> Batch:
    """Pad samples to the per-modality batch max length, preserving order."""
    if len(samples) == 0:
        raise ConfigError("cannot collate an empty sample list")
    dims = {m: samples[0].features[m].dim for m in MODALITIES}
    for s in samples:
        for m in MODALITIES:
            if s.features[m].dim != dims[m]:
                raise DatasetError(
                    f"inconsistent {m!r} dims in batch: {s.features[m].dim} vs {dims[m]} "
                    f"(record {s.id!r})"
                )
    padded: dict[str, torch.Tensor] = {}
    pad_mask: dict[str, torch.Tensor] = {}
    for m in MODALITIES:
        max_len = max(s.features[m].length for s in samples)
        feats = torch.zeros(len(samples), max_len, dims[m], dtype=torch.float32)
        mask = torch.ones(len(samples), max_len, dtype=torch.bool)
        for i, s in enumerate(samples):
            n = s.features[m].length
            feats[i, :n] = torch.from_numpy(s.features[m].values)
            mask[i, :n] = False
        padded[m] = feats
        pad_mask[m] = mask
    labels = torch.tensor([s.label for s in samples], dtype=torch.float32)
    return Batch(samples=tuple(samples), padded=padded, pad_mask=pad_mask, labels=labels)


def iter_batches(
    dataset: MultimodalDataset,
    batch_size: int,
    order: Sequence[int] | None = None,
    drop_singleton: bool = False,
) -> Iterator[Batch]:
    """Yield collated batches in ``order`` (default: dataset order).

    ``drop_singleton`` drops a trailing batch of size 1 (degenerate for
    the contrastive objective during training).
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    idx = list(range(len(dataset))) if order is None else list(order)
    for start in range(0, len(idx), batch_size):
        chunk = idx[start : start + batch_size]
        if drop_singleton and len(chunk) == 1 and start > 0:
            return
        yield collate([dataset.samples[i] for i in chunk])


def generate_synthetic(
    n_samples: int,
    dims: Mapping[str, int] | None = None,
    len_range: tuple[int, int] = (5, 20),
    seed: int = 0,
    snr: float = 8.0,
    *,
    split: str = "train",
    strengths: Mapping[str, float] | None = None,
    cross_corr: float = 0.85,
    feature_noise: float = 0.3,
    label_scale: float = 1.3,
) -> MultimodalDataset:
    """Generate a complete synthetic dataset with a linear labeling rule.

    Each modality carries a per-sample latent factor along a fixed hidden
    direction; the label is ``clip(sum_m w_m . mean_t(X^m_t) + noise, -3, 3)``
    with hidden weights ``w_m`` drawn once from ``seed``. The latent factors
    are correlated across modalities (``cross_corr``), so every modality
    subset retains signal; ``strengths`` rescales the per-modality
    contribution. ``snr`` is the ratio of clean-label std to label-noise
    std; ``label_scale`` is the clean-label std.

    Splits generated from the same ``seed`` share the hidden weights and
    directions, so train/valid/test describe one task. Deterministic given
    all arguments.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    dims = dict(DEFAULT_DIMS) if dims is None else dict(dims)
    if set(dims) != set(MODALITIES) or any(int(d) < 1 for d in dims.values()):
        raise ConfigError(f"dims must map each of {MODALITIES} to a positive int, got {dims}")
    dims = {m: int(dims[m]) for m in MODALITIES}
    lo, hi = int(len_range[0]), int(len_range[1])
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid len_range {len_range}")
    if not (snr > 0):
        raise ConfigError("snr must be > 0")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    if not (0.0 <= cross_corr < 1.0):
        raise ConfigError("cross_corr must be in [0, 1)")
    if feature_noise < 0 or label_scale <= 0:
        raise ConfigError("feature_noise must be >= 0 and label_scale > 0")
    strengths = {m: 1.0 for m in MODALITIES} if strengths is None else dict(strengths)
    if set(strengths) != set(MODALITIES) or any(s <= 0 for s in strengths.values()):
        raise ConfigError(f"strengths must map each of {MODALITIES} to a positive value")

    # Hidden task: unit directions and weights, a function of seed alone so
    # that all splits share the labeling rule.
    task_rng = np.random.default_rng(np.random.SeedSequence(seed))
    directions = {}
    for m in MODALITIES:
        u = task_rng.standard_normal(dims[m])
        directions[m] = u / np.linalg.norm(u)
    s_vec = np.array([strengths[m] for m in MODALITIES])
    pair_sum = s_vec[0] * s_vec[1] + s_vec[0] * s_vec[2] + s_vec[1] * s_vec[2]
    clean_std = math.sqrt(float(np.sum(s_vec**2)) + 2.0 * cross_corr**2 * float(pair_sum))
    scale = label_scale / clean_std
    weights = {m: scale * strengths[m] * directions[m] for m in MODALITIES}
    noise_std = label_scale / snr

    data_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_SPLIT_CODES[split],))
    )
    mix = math.sqrt(1.0 - cross_corr**2)
    samples = []
    for i in range(n_samples):
        shared = data_rng.standard_normal()
        feats = {}
        clean = 0.0
        for m in MODALITIES:
            n = int(data_rng.integers(lo, hi + 1))
            latent = cross_corr * shared + mix * data_rng.standard_normal()
            values = latent * directions[m][None, :] + feature_noise * data_rng.standard_normal(
                (n, dims[m])
            )
            feats[m] = FeatureSequence(modality=m, values=values.astype(np.float32))
            clean += float(weights[m] @ feats[m].values.mean(axis=0, dtype=np.float64))
        label = clean + noise_std * data_rng.standard_normal()
        label = float(np.clip(label, LABEL_RANGE[0], LABEL_RANGE[1]))
        samples.append(
            MultimodalSample(id=f"{split}-{i:05d}", features=feats, label=label)
        )
    return MultimodalDataset(split=split, dims=dims, samples=samples)


@dataclass
class ManifestRecord:
    id: str
    label: float
    lengths: dict[str, int]
    offsets: dict[str, int]


@dataclass
class DatasetManifest:
    """JSON-serializable index of a dataset directory."""

    split: str
    dims: dict[str, int]
    records: list[ManifestRecord] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "format_version": 1,
            "split": self.split,
            "dims": self.dims,
            "records": [
                {
                    "id": r.id,
                    "label": r.label,
                    "lengths": r.lengths,
                    "offsets": r.offsets,
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "DatasetManifest":
        try:
            records = [
                ManifestRecord(
                    id=r["id"],
                    label=float(r["label"]),
                    lengths={m: int(r["lengths"][m]) for m in MODALITIES},
                    offsets={m: int(r["offsets"][m]) for m in MODALITIES},
                )
                for r in obj["records"]
            ]
            return cls(
                split=obj["split"],
                dims={m: int(obj["dims"][m]) for m in MODALITIES},
                records=records,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed manifest: {exc}") from exc


def save_dataset(dataset: MultimodalDataset, dir_path: str | Path) -> None:
    """Write manifest.json plus one little-endian float32 blob per modality."""
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(split=dataset.split, dims=dict(dataset.dims))
    blobs = {m: bytearray() for m in MODALITIES}
    for s in dataset.samples:
        lengths = {}
        offsets = {}
        for m in MODALITIES:
            offsets[m] = len(blobs[m])
            lengths[m] = s.features[m].length
            blobs[m].extend(s.features[m].values.astype("<f4").tobytes())
        manifest.records.append(
            ManifestRecord(id=s.id, label=s.label, lengths=lengths, offsets=offsets)
        )
    (out / MANIFEST_NAME).write_text(
        json.dumps(manifest.to_json_dict(), indent=2) + "\n", encoding="utf-8"
    )
    for m in MODALITIES:
        (out / BLOB_NAMES[m]).write_bytes(bytes(blobs[m]))


def load_dataset(dir_path: str | Path) -> MultimodalDataset:
    """Load a dataset directory, validating offsets, bounds, and dims."""
    root = Path(dir_path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"missing {MANIFEST_NAME} in {root}")
    try:
        manifest = DatasetManifest.from_json_dict(
            json.loads(manifest_path.read_text(encoding="utf-8"))
        )
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable manifest in {root}: {exc}") from exc

    blobs = {}
    for m in MODALITIES:
        blob_path = root / BLOB_NAMES[m]
        if not blob_path.is_file():
            raise DatasetError(f"missing blob {BLOB_NAMES[m]} in {root}")
        blobs[m] = blob_path.read_bytes()

    for m in MODALITIES:
        dim = manifest.dims[m]
        total_rows = sum(r.lengths[m] for r in manifest.records)
        expected = total_rows * dim * 4
        actual = len(blobs[m])
        if actual != expected and total_rows > 0 and actual % (total_rows * 4) == 0:
            implied = actual // (total_rows * 4)
            raise DatasetError(
                f"dimension mismatch for modality {m!r}: manifest says {dim}, "
                f"blob size implies {implied}"
            )
        spans = sorted(
            (r.offsets[m], r.offsets[m] + r.lengths[m] * dim * 4, r.id)
            for r in manifest.records
        )
        prev_end = 0
        for start, end, rec_id in spans:
            if start < prev_end:
                raise DatasetError(
                    f"record {rec_id!r}: modality {m!r} overlaps a previous record"
                )
            prev_end = end
        for r in manifest.records:
            end = r.offsets[m] + r.lengths[m] * dim * 4
            if end > actual:
                raise DatasetError(
                    f"record {r.id!r}: modality {m!r} spans bytes "
                    f"{r.offsets[m]}..{end} beyond blob size {actual}"
                )

    samples = []
    for r in manifest.records:
        feats = {}
        for m in MODALITIES:
            dim = manifest.dims[m]
            values = np.frombuffer(
                blobs[m], dtype="<f4", count=r.lengths[m] * dim, offset=r.offsets[m]
            ).reshape(r.lengths[m], dim)
            feats[m] = FeatureSequence(modality=m, values=values.astype(np.float32))
        samples.append(MultimodalSample(id=r.id, features=feats, label=r.label))
    return MultimodalDataset(split=manifest.split, dims=manifest.dims, samples=samples)


def dataset_fingerprint(dir_path: str | Path) -> str:
    """Content hash (sha256 hex) over the manifest and all blobs."""
    root = Path(dir_path)
    h = hashlib.sha256()
    h.update((root / MANIFEST_NAME).read_bytes())
    for m in MODALITIES:
        h.update((root / BLOB_NAMES[m]).read_bytes())
    return h.hexdigest()
