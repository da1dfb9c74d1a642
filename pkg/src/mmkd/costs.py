"""Analytic parameter and FLOP accounting for the fusion architecture.

FLOPs are derived from multiply-accumulate counts (1 MAC = 2 FLOPs) of the
dense operations: conv projections, attention projections and score/value
products, feed-forward blocks, fusion projectors, and regression heads.
Elementwise work (residuals, normalization, softmax, activations, biases)
is excluded; the methodology is echoed in the report itself.
"""

from __future__ import annotations

from .model import ModelConfig
from .protocols import BIMODAL_HEADS, MODALITIES

FLOPS_PER_MAC = 2

# Cost reported for the original full-scale configuration on CMU-MOSI at
# test batch size 4, included for rough comparison; counting methodologies
# differ, so no tolerance is attached.
REFERENCE_FULL_SCALE_TEST_FLOPS = 5.2e9
DEFAULT_REFERENCE_SEQ_LEN = 50


def _attention_params(d: int) -> int:
    # Packed q/k/v projection plus output projection, with biases.
    return 3 * d * d + 3 * d + d * d + d


def _ffn_params(d: int, f: int) -> int:
    return d * f + f + f * d + d


def _encoder_layer_params(d: int, heads: int, f: int) -> int:
    return _attention_params(d) + _ffn_params(d, f) + 2 * (2 * d)


def _decoder_layer_params(d: int, heads: int, f: int) -> int:
    return 2 * _attention_params(d) + _ffn_params(d, f) + 3 * (2 * d)


def parameter_count(cfg: ModelConfig) -> dict:
    """Exact learnable-parameter count, by component and total."""
    d, f, n = cfg.d_model, cfg.d_hid, cfg.depth
    enc_stack = n * _encoder_layer_params(d, cfg.n_heads, f) + 2 * d
    dec_stack = n * _decoder_layer_params(d, cfg.n_heads, f) + 2 * d
    head = d * f + f + f * 1 + 1
    breakdown = {
        "conv_projections": sum(d * cfg.dims[m] * cfg.conv_kernel + d for m in MODALITIES),
        "cls_embeddings": 4 * d,
        "teacher_decoders": 2 * dec_stack,
        "teacher_trinary_encoder": enc_stack,
        "teacher_projector": 3 * d * d + d,
        "student_intra_encoders": 2 * enc_stack,
        "student_bimodal_encoders": len(BIMODAL_HEADS) * enc_stack,
        "student_projectors": len(BIMODAL_HEADS) * (2 * d * d + d),
        "regression_heads": 7 * head,
    }
    return {"total": sum(breakdown.values()), "breakdown": breakdown}


def _self_attention_macs(d: int, t: int) -> int:
    # q/k/v/out projections plus score and value products across heads.
    return 4 * t * d * d + 2 * t * t * d


def _cross_attention_macs(d: int, t: int, s: int) -> int:
    return 2 * t * d * d + 2 * s * d * d + 2 * t * s * d


def _ffn_macs(d: int, f: int, t: int) -> int:
    return 2 * t * d * f


def _encoder_stack_macs(cfg: ModelConfig, t: int) -> int:
    per_layer = _self_attention_macs(cfg.d_model, t) + _ffn_macs(cfg.d_model, cfg.d_hid, t)
    return cfg.depth * per_layer


def _decoder_stack_macs(cfg: ModelConfig, t: int, s: int) -> int:
    d, f = cfg.d_model, cfg.d_hid
    per_layer = (
        _self_attention_macs(d, t) + _cross_attention_macs(d, t, s) + _ffn_macs(d, f, t)
    )
    return cfg.depth * per_layer


def flop_estimate(cfg: ModelConfig, batch_size: int, seq_len: int) -> dict:
    """MAC-derived FLOPs at a fixed reference length for every modality."""
    d, f = cfg.d_model, cfg.d_hid
    n = seq_len
    t = n + 1  # [CLS]-prepended target length
    conv = {m: n * d * cfg.dims[m] * cfg.conv_kernel for m in MODALITIES}
    head = d * f + f
    teacher = {
        "conv_projections": sum(conv.values()),
        "teacher_decoders": 2 * _decoder_stack_macs(cfg, t, n),
        "teacher_trinary_encoder": _encoder_stack_macs(cfg, 3),
        "teacher_projector": 3 * d * d,
        "regression_head": head,
    }
    student_extra = {
        "student_intra_encoders": 2 * _encoder_stack_macs(cfg, t),
        "student_bimodal_encoders": len(BIMODAL_HEADS) * _encoder_stack_macs(cfg, 2),
        "student_projectors": len(BIMODAL_HEADS) * 2 * d * d,
        "student_regression_heads": 6 * head,
    }
    teacher_macs = sum(teacher.values())
    all_heads_macs = teacher_macs + sum(student_extra.values())
    return {
        "flops_per_test_batch": FLOPS_PER_MAC * batch_size * teacher_macs,
        "flops_training_forward": FLOPS_PER_MAC * batch_size * all_heads_macs,
        "teacher_breakdown_macs": teacher,
        "student_breakdown_macs": student_extra,
    }


def cost_report(
    cfg: ModelConfig,
    batch_size: int = 4,
    seq_len: int = DEFAULT_REFERENCE_SEQ_LEN,
) -> dict:
    """Parameter count plus FLOP estimates, with the methodology spelled out.

    The test-batch figure covers the complete-input (teacher) forward pass,
    matching what runs at inference on complete data; the training-forward
    figure adds the student paths.
    """
    params = parameter_count(cfg)
    flops = flop_estimate(cfg, batch_size, seq_len)
    return {
        "param_count": params["total"],
        "param_breakdown": params["breakdown"],
        "flops_per_test_batch": flops["flops_per_test_batch"],
        "flops_training_forward": flops["flops_training_forward"],
        "assumptions": {
            "batch_size": batch_size,
            "reference_seq_len": seq_len,
            "flops_per_mac": FLOPS_PER_MAC,
            "counting": (
                "dense MACs only (conv, attention projections and products, "
                "feed-forward, projectors, heads); elementwise and "
                "normalization ops excluded"
            ),
        },
        "reference_full_scale": {
            "flops_per_test_batch": REFERENCE_FULL_SCALE_TEST_FLOPS,
            "note": (
                "reported cost of the original full-scale configuration on "
                "CMU-MOSI at bs=4; counting methodology differs, so this is "
                "for orientation only"
            ),
        },
    }
