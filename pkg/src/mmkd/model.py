"""Fusion architecture: shared conv projection, teacher cross-modal fusion,
student fusion, regression heads, and checkpoint (de)serialization.

The teacher fuses the lexical sequence into the visual and acoustic
sequences with two transformer decoders (no causal mask, learned [CLS]
query slot), then fuses the three head elements with a small encoder and a
linear projector. Students fuse within each modality (encoders over v/a,
the lexical projection reused as-is) and across pairs with 2-token
encoders. All attention blocks are pre-norm residual.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import torch
import torch.nn as nn

from .data import Batch, DEFAULT_DIMS, MODALITIES
from .errors import CheckpointError, ConfigError
from .protocols import (
    ALL_HEADS,
    BIMODAL_HEADS,
    COMPLETE_MASK,
    ModalityMask,
    TEACHER_HEAD,
    UNIMODAL_HEADS,
    route,
)

CKPT_MAGIC = b"MMKDCKP1"

# Fusion slot orders: trinary stacks (l, a, v); pairs keep l before a before v.
TRINARY_SLOTS = ("l", "a", "v")
PAIR_SLOTS = {"la": ("l", "a"), "lv": ("l", "v"), "av": ("a", "v")}


@dataclass
class ModelConfig:
    """Architecture hyperparameters; ``dims`` are the raw input dims."""

    d_model: int = 32
    n_heads: int = 4
    depth: int = 2
    d_hid: int = 128
    conv_kernel: int = 3
    dims: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_DIMS))
    dropout: float = 0.1
    max_len: int = 2048

    def __post_init__(self):
        for name in ("d_model", "n_heads", "depth", "d_hid", "conv_kernel", "max_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.conv_kernel % 2 != 1:
            raise ConfigError("conv_kernel must be odd (length-preserving projection)")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if set(self.dims) != set(MODALITIES) or any(int(d) < 1 for d in self.dims.values()):
            raise ConfigError(f"dims must map each of {MODALITIES} to a positive int")
        self.dims = {m: int(self.dims[m]) for m in MODALITIES}

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "depth": self.depth,
            "d_hid": self.d_hid,
            "conv_kernel": self.conv_kernel,
            "dims": dict(self.dims),
            "dropout": self.dropout,
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ModelConfig":
        try:
            return cls(
                d_model=int(obj["d_model"]),
                n_heads=int(obj["n_heads"]),
                depth=int(obj["depth"]),
                d_hid=int(obj["d_hid"]),
                conv_kernel=int(obj["conv_kernel"]),
                dims={m: int(obj["dims"][m]) for m in MODALITIES},
                dropout=float(obj["dropout"]),
                max_len=int(obj.get("max_len", 2048)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed model config: {exc}") from exc


class SinusoidalPositionalEncoding(nn.Module):
    """Classic fixed sin/cos position table, added to the input."""

    def __init__(self, d_model: int, max_len: int = 2048):
        super().__init__()
        position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
        div_term = torch.exp(
            torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model)
        )
        pe = torch.zeros(max_len, d_model)
        pe[:, 0::2] = torch.sin(position * div_term)
        pe[:, 1::2] = torch.cos(position * div_term)
        self.register_buffer("pe", pe)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] > self.pe.shape[0]:
            raise ConfigError(
                f"sequence length {x.shape[1]} exceeds positional table {self.pe.shape[0]}"
            )
        return x + self.pe[: x.shape[1]].to(x.dtype)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_hid: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_hid)
        self.fc2 = nn.Linear(d_hid, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(torch.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block; no causal mask anywhere."""

    def __init__(self, d_model: int, n_heads: int, d_hid: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = nn.MultiheadAttention(
            d_model, n_heads, dropout=dropout, batch_first=True
        )
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_hid, dropout)
        self.drop1 = nn.Dropout(dropout)
        self.drop2 = nn.Dropout(dropout)

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        attn, _ = self.self_attn(
            h, h, h, key_padding_mask=key_padding_mask, need_weights=False
        )
        x = x + self.drop1(attn)
        x = x + self.drop2(self.ff(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    """Pre-norm block: non-causal self-attention, then cross-attention."""

    def __init__(self, d_model: int, n_heads: int, d_hid: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = nn.MultiheadAttention(
            d_model, n_heads, dropout=dropout, batch_first=True
        )
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = nn.MultiheadAttention(
            d_model, n_heads, dropout=dropout, batch_first=True
        )
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_hid, dropout)
        self.drop1 = nn.Dropout(dropout)
        self.drop2 = nn.Dropout(dropout)
        self.drop3 = nn.Dropout(dropout)

    def forward(self, tgt, memory, tgt_key_padding_mask=None, memory_key_padding_mask=None):
        h = self.norm1(tgt)
        attn, _ = self.self_attn(
            h, h, h, key_padding_mask=tgt_key_padding_mask, need_weights=False
        )
        tgt = tgt + self.drop1(attn)
        h = self.norm2(tgt)
        attn, _ = self.cross_attn(
            h, memory, memory, key_padding_mask=memory_key_padding_mask, need_weights=False
        )
        tgt = tgt + self.drop2(attn)
        tgt = tgt + self.drop3(self.ff(self.norm3(tgt)))
        return tgt


class TransformerEncoder(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_hid: int, depth: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(d_model, n_heads, d_hid, dropout) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x, key_padding_mask=None):
        for layer in self.layers:
            x = layer(x, key_padding_mask=key_padding_mask)
        return self.norm(x)


class TransformerDecoder(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_hid: int, depth: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, n_heads, d_hid, dropout) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(d_model)

    def forward(self, tgt, memory, tgt_key_padding_mask=None, memory_key_padding_mask=None):
        for layer in self.layers:
            tgt = layer(
                tgt,
                memory,
                tgt_key_padding_mask=tgt_key_padding_mask,
                memory_key_padding_mask=memory_key_padding_mask,
            )
        return self.norm(tgt)


class RegressionHead(nn.Module):
    """Two-layer MLP: y = W2 relu(W1 h + b1) + b2."""

    def __init__(self, d_model: int, d_hid: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_hid)
        self.fc2 = nn.Linear(d_hid, 1)

    def forward(self, h):
        return self.fc2(torch.relu(self.fc1(h))).squeeze(-1)


@dataclass
class ForwardOutput:
    """Everything the training objective needs from one complete batch."""

    reps: dict[str, torch.Tensor]  # head id -> (B, d)
    preds: dict[str, torch.Tensor]  # head id -> (B,)
    intermediates: dict[str, torch.Tensor]  # f_l, f_v, f_a from the teacher path


@dataclass
class RoutedOutput:
    preds: torch.Tensor  # (B,)
    reps: torch.Tensor  # (B, d)
    heads: list[str]


class FusionModel(nn.Module):
    """Teacher plus six students over one shared feature projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, k = cfg.d_model, cfg.conv_kernel
        self.proj_conv = nn.ModuleDict(
            {
                m: nn.Conv1d(cfg.dims[m], d, kernel_size=k, padding=k // 2)
                for m in MODALITIES
            }
        )
        self.pos = SinusoidalPositionalEncoding(d, cfg.max_len)
        # One learned [CLS] vector per encoder/decoder instance that takes one.
        self.cls = nn.ParameterDict(
            {
                name: nn.Parameter(torch.randn(d) * d**-0.5)
                for name in ("dec_v", "dec_a", "stu_v", "stu_a")
            }
        )
        args = (d, cfg.n_heads, cfg.d_hid, cfg.depth, cfg.dropout)
        self.decoders = nn.ModuleDict(
            {"v": TransformerDecoder(*args), "a": TransformerDecoder(*args)}
        )
        self.trinary_encoder = TransformerEncoder(*args)
        self.teacher_projector = nn.Linear(3 * d, d)
        self.student_encoders = nn.ModuleDict(
            {"v": TransformerEncoder(*args), "a": TransformerEncoder(*args)}
        )
        self.bimodal_encoders = nn.ModuleDict(
            {pair: TransformerEncoder(*args) for pair in BIMODAL_HEADS}
        )
        self.bimodal_projectors = nn.ModuleDict(
            {pair: nn.Linear(2 * d, d) for pair in BIMODAL_HEADS}
        )
        self.heads = nn.ModuleDict(
            {h: RegressionHead(d, cfg.d_hid) for h in ALL_HEADS}
        )

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def project(
        self, batch: Batch, modalities: Sequence[str] = MODALITIES
    ) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
        """1D-conv each raw modality to the shared dimension, zeroing pads."""
        seqs, pads = {}, {}
        for m in modalities:
            x = batch.padded[m].to(self.dtype)
            if x.shape[-1] != self.cfg.dims[m]:
                raise ConfigError(
                    f"modality {m!r} input dim {x.shape[-1]} != configured {self.cfg.dims[m]}"
                )
            mask = batch.pad_mask[m]
            x = self.proj_conv[m](x.transpose(1, 2)).transpose(1, 2)
            seqs[m] = x.masked_fill(mask.unsqueeze(-1), 0.0)
            pads[m] = mask
        return seqs, pads

    def _with_cls(self, x: torch.Tensor, pad: torch.Tensor, cls_name: str):
        cls = self.cls[cls_name].to(x.dtype).expand(x.shape[0], 1, -1)
        tgt = torch.cat([cls, x], dim=1)
        tgt = self.pos(tgt)
        pad = torch.cat(
            [torch.zeros(x.shape[0], 1, dtype=torch.bool, device=x.device), pad], dim=1
        )
        return tgt, pad

    def teacher_binary_fuse(
        self,
        x_l: torch.Tensor,
        x_m: torch.Tensor,
        pad_l: torch.Tensor,
        pad_m: torch.Tensor,
        modality: str,
    ) -> torch.Tensor:
        """Fuse the lexical sequence into modality ``m`` via cross-attention.

        Returns the full decoded sequence, length len(x_m) + 1; index 0 is
        the [CLS] slot.
        """
        if modality not in ("v", "a"):
            raise ConfigError(f"teacher decoders exist for v/a only, got {modality!r}")
        tgt, tgt_pad = self._with_cls(x_m, pad_m, f"dec_{modality}")
        return self.decoders[modality](
            tgt, x_l, tgt_key_padding_mask=tgt_pad, memory_key_padding_mask=pad_l
        )

    def teacher_trinary_fuse(
        self, x_l: torch.Tensor, d_v: torch.Tensor, d_a: torch.Tensor
    ) -> torch.Tensor:
        """Encode the three head elements jointly and project to d."""
        slots = {"l": x_l[:, 0], "a": d_a[:, 0], "v": d_v[:, 0]}
        f = torch.stack([slots[m] for m in TRINARY_SLOTS], dim=1)  # (B, 3, d)
        encoded = self.trinary_encoder(f)
        flat = encoded.reshape(encoded.shape[0], -1)  # (B, 3d), slot order kept
        return self.teacher_projector(flat)

    def student_intra_fuse(
        self, x_m: torch.Tensor, pad_m: torch.Tensor, modality: str
    ) -> torch.Tensor:
        """Self-attention fusion within v or a; length grows by the [CLS] slot."""
        if modality not in ("v", "a"):
            raise ConfigError(f"student intra encoders exist for v/a only, got {modality!r}")
        tgt, tgt_pad = self._with_cls(x_m, pad_m, f"stu_{modality}")
        return self.student_encoders[modality](tgt, key_padding_mask=tgt_pad)

    def student_bimodal_fuse(
        self, s_first: torch.Tensor, s_second: torch.Tensor, pair: str
    ) -> torch.Tensor:
        """Fuse the head elements of two intra-fused sequences."""
        if pair not in BIMODAL_HEADS:
            raise ConfigError(f"unknown bimodal pair {pair!r}")
        f = torch.stack([s_first[:, 0], s_second[:, 0]], dim=1)  # (B, 2, d)
        encoded = self.bimodal_encoders[pair](f)
        flat = encoded.reshape(encoded.shape[0], -1)
        return self.bimodal_projectors[pair](flat)

    @staticmethod
    def uni_reps(
        s_l: torch.Tensor, s_v: torch.Tensor, s_a: torch.Tensor
    ) -> dict[str, torch.Tensor]:
        """Head-element extraction; no parameters."""
        return {"l": s_l[:, 0], "v": s_v[:, 0], "a": s_a[:, 0]}

    def regress(self, h: torch.Tensor, head: str) -> torch.Tensor:
        if head not in self.heads:
            raise ConfigError(f"unknown regression head {head!r}")
        return self.heads[head](h)

    def forward_all(self, batch: Batch) -> ForwardOutput:
        """Training path: all 7 representations and predictions per sample."""
        if batch.availability is not None and not all(
            len(a) == 3 for a in batch.availability
        ):
            raise ConfigError("forward_all requires complete batches; use forward_routed")
        seqs, pads = self.project(batch)
        d_v = self.teacher_binary_fuse(seqs["l"], seqs["v"], pads["l"], pads["v"], "v")
        d_a = self.teacher_binary_fuse(seqs["l"], seqs["a"], pads["l"], pads["a"], "a")
        h_t = self.teacher_trinary_fuse(seqs["l"], d_v, d_a)
        s_l = seqs["l"]  # lexical projection reused as-is
        s_v = self.student_intra_fuse(seqs["v"], pads["v"], "v")
        s_a = self.student_intra_fuse(seqs["a"], pads["a"], "a")
        uni = self.uni_reps(s_l, s_v, s_a)
        stu_seqs = {"l": s_l, "v": s_v, "a": s_a}
        reps = {"t": h_t}
        for pair in BIMODAL_HEADS:
            m1, m2 = PAIR_SLOTS[pair]
            reps[pair] = self.student_bimodal_fuse(stu_seqs[m1], stu_seqs[m2], pair)
        reps.update(uni)
        preds = {h: self.regress(reps[h], h) for h in ALL_HEADS}
        intermediates = {"f_l": s_l[:, 0], "f_v": d_v[:, 0], "f_a": d_a[:, 0]}
        return ForwardOutput(reps=reps, preds=preds, intermediates=intermediates)

    def _subset_representation(self, batch: Batch, head: str) -> torch.Tensor:
        """Representation for one availability pattern, reading only its modalities."""
        if head == TEACHER_HEAD:
            seqs, pads = self.project(batch)
            d_v = self.teacher_binary_fuse(seqs["l"], seqs["v"], pads["l"], pads["v"], "v")
            d_a = self.teacher_binary_fuse(seqs["l"], seqs["a"], pads["l"], pads["a"], "a")
            return self.teacher_trinary_fuse(seqs["l"], d_v, d_a)
        if head in BIMODAL_HEADS:
            m1, m2 = PAIR_SLOTS[head]
            seqs, pads = self.project(batch, (m1, m2))
            fused = {}
            for m in (m1, m2):
                fused[m] = (
                    seqs["l"] if m == "l" else self.student_intra_fuse(seqs[m], pads[m], m)
                )
            return self.student_bimodal_fuse(fused[m1], fused[m2], head)
        if head in UNIMODAL_HEADS:
            seqs, pads = self.project(batch, (head,))
            if head == "l":
                return seqs["l"][:, 0]
            return self.student_intra_fuse(seqs[head], pads[head], head)[:, 0]
        raise ConfigError(f"unknown head {head!r}")

    def forward_routed(self, batch: Batch) -> RoutedOutput:
        """Evaluation path: each sample through the head its mask routes to.

        Unavailable modalities are never projected or attended, so routed
        predictions are exactly invariant to their values.
        """
        avail = batch.availability
        if avail is None:
            avail = tuple(frozenset(MODALITIES) for _ in range(len(batch)))
        groups: dict[frozenset, list[int]] = {}
        for i, a in enumerate(avail):
            groups.setdefault(a, []).append(i)
        preds = torch.empty(len(batch), dtype=self.dtype)
        reps = torch.empty(len(batch), self.cfg.d_model, dtype=self.dtype)
        heads = [""] * len(batch)
        for pattern, indices in groups.items():
            head = route(ModalityMask(pattern))
            sub = batch.subset(indices)
            rep = self._subset_representation(sub, head)
            pred = self.regress(rep, head)
            for j, i in enumerate(indices):
                preds[i] = pred[j]
                reps[i] = rep[j]
                heads[i] = head
        return RoutedOutput(preds=preds, reps=reps, heads=heads)


def build_model(cfg: ModelConfig, seed: int) -> FusionModel:
    """Deterministically initialized model for a given seed."""
    torch.manual_seed(seed)
    return FusionModel(cfg)


def save_checkpoint(
    model: FusionModel, path: str | Path, extra: Mapping | None = None
) -> None:
    """Write a checkpoint: magic, JSON header, then raw float32 LE arrays.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header (model config plus an ordered parameter index with shapes),
    then each parameter's float32 little-endian bytes in index order.
    """
    params = [
        (name, p.detach().to(torch.float32).cpu().numpy())
        for name, p in model.named_parameters()
    ]
    header = {
        "format_version": 1,
        "model_config": model.cfg.to_dict(),
        "params": [{"name": n, "shape": list(a.shape)} for n, a in params],
        "extra": dict(extra) if extra else {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in params:
            f.write(a.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[FusionModel, dict]:
    """Reconstruct a model from a checkpoint, validating shape-by-shape."""
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{p} is not a checkpoint (bad magic)")
    cursor = len(CKPT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, cursor)
    cursor += 8
    try:
        header = json.loads(raw[cursor : cursor + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header in {p}: {exc}") from exc
    cursor += header_len

    cfg = ModelConfig.from_dict(header["model_config"])
    model = FusionModel(cfg)
    expected = dict(model.named_parameters())
    listed = [entry["name"] for entry in header["params"]]
    if set(listed) != set(expected):
        missing = sorted(set(expected) - set(listed))
        extra_names = sorted(set(listed) - set(expected))
        raise CheckpointError(
            f"parameter set mismatch: missing {missing[:3]}, unexpected {extra_names[:3]}"
        )
    import numpy as np

    with torch.no_grad():
        for entry in header["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            param = expected[name]
            if tuple(param.shape) != shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {shape}, model {tuple(param.shape)}"
                )
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 4
            if cursor + nbytes > len(raw):
                raise CheckpointError(f"checkpoint truncated while reading {name!r}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=cursor).reshape(shape)
            param.copy_(torch.from_numpy(arr.astype(np.float32)))
            cursor += nbytes
    return model, header
