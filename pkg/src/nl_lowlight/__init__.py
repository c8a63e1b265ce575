"""Weighted non-local feature denoising for low-light vision.

Pieces: a non-local block with three attention forms and analytic
gradients, a physically motivated low-light degradation pipeline, a
small frozen conv backbone whose NL blocks train against clean-image
features, and a COCO-style instance segmentation AP evaluator.  Hot
kernels run through numba when available, with a bit-compatible numpy
fallback (set NL_LOWLIGHT_NO_NUMBA=1 to force it).
"""

from .backbone import (
    AblationRow,
    ToyBackbone,
    TrainConfig,
    TrainResult,
    ablate_forms,
    build_backbone,
    dataset_loss,
    extract,
    feature_consistency_loss,
    load_checkpoint,
    save_checkpoint,
    train_nl_blocks,
    write_curve,
)
from .errors import (
    ArgumentError,
    ContractError,
    DimensionError,
    NumericError,
    ValidationError,
)
from .lowlight import (
    DEFAULT_JITTER,
    DegradationConfig,
    JitterRanges,
    degrade,
    degrade_dataset,
    noise_autocorrelation,
    per_image_config,
    read_image,
    write_image,
)
from .nlblock import (
    NLBlockParams,
    NLForm,
    block_backward,
    block_forward,
    gradcheck,
    init_params,
    load_params,
    nl_operation,
    parse_form,
    save_params,
)
from .segeval import (
    EvalReport,
    InstanceAnnotation,
    InstancePrediction,
    RLEMask,
    decode_mask,
    encode_mask,
    evaluate,
    load_annotations,
    load_predictions,
    mask_iou,
    write_report,
)

__version__ = "0.1.0"

__all__ = [
    "AblationRow", "ToyBackbone", "TrainConfig", "TrainResult",
    "ablate_forms", "build_backbone", "dataset_loss", "extract",
    "feature_consistency_loss",
    "load_checkpoint", "save_checkpoint", "train_nl_blocks", "write_curve",
    "ArgumentError", "ContractError", "DimensionError", "NumericError",
    "ValidationError",
    "DEFAULT_JITTER", "DegradationConfig", "JitterRanges", "degrade",
    "degrade_dataset", "noise_autocorrelation", "per_image_config",
    "read_image", "write_image",
    "NLBlockParams", "NLForm", "block_backward", "block_forward",
    "gradcheck", "init_params", "load_params", "nl_operation", "parse_form",
    "save_params",
    "EvalReport", "InstanceAnnotation", "InstancePrediction", "RLEMask",
    "decode_mask", "encode_mask", "evaluate", "load_annotations",
    "load_predictions", "mask_iou", "write_report",
    "__version__",
]
