"""Contrastive knowledge distillation for sentiment regression that stays
robust when whole modalities are missing.

A complete-input teacher and six modality-subset students share one feature
projection and train jointly; a multi-view supervised contrastive loss ties
their representations together. Evaluation covers both the fixed-subset and
the random missing-rate protocols.
"""

from .data import (
    Batch,
    DEFAULT_DIMS,
    FULL_SCALE_DIMS,
    FeatureSequence,
    MODALITIES,
    MultimodalDataset,
    MultimodalSample,
    collate,
    dataset_fingerprint,
    generate_synthetic,
    iter_batches,
    load_dataset,
    save_dataset,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    MmkdError,
    TrainingDiverged,
)
from .losses import (
    ContrastiveConfig,
    LOSS_MODES,
    LossReport,
    build_view_set,
    mse_kd_loss,
    mvsc_loss,
    regression_loss,
    total_loss,
    uniview_sc_loss,
)
from .metrics import acc2, acc7, intensity_bin, mae
from .model import (
    ForwardOutput,
    FusionModel,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .protocols import (
    ALL_HEADS,
    BIMODAL_HEADS,
    COMPLETE_MASK,
    MaskAssignment,
    ModalityMask,
    STUDENT_HEADS,
    UNIMODAL_HEADS,
    apply_mask,
    enumerate_fixed_subsets,
    load_masks,
    masks_from_json,
    masks_to_json,
    missing_rate,
    route,
    sample_random_masks,
    save_masks,
)
from .training import TrainConfig, TrainResult, split_train_valid, train, validation_mae
from .evaluation import (
    AblationResult,
    EvalRow,
    EvalTable,
    ablate,
    evaluate_fixed,
    evaluate_random,
    predict_masked,
)
from .costs import cost_report, flop_estimate, parameter_count

__version__ = "0.1.0"
