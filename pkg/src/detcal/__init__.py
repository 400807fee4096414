"""detcal: detection confidence calibration toolkit.

Measures ECE / D-ECE / D-UCE and reliability tables from detection dumps,
and implements the train-time calibration mechanisms (cross-layer variance
uncertainty, logit modulation, prototype logit mixing with smoothed-label
regularization) as pure, gradient-checked tensor operations plus a
synthetic ablation trainer.
"""

from .calibration import (
    JointLossResult,
    PositiveQuerySet,
    SmoothedLabel,
    TrainConfig,
    apply_temperature,
    fit_temperature,
    focal_loss,
    joint_loss,
    mix_logits,
    mix_logits_grad,
    modulate_logits,
    quantify_uncertainty,
    regularizer_loss,
    smoothed_labels,
)
from .geometry import (
    Box,
    Detection,
    GroundTruth,
    MatchedDetection,
    hungarian_assign,
    iou,
    match_detections,
)
from .metrics import (
    BinSummary,
    CalibrationReport,
    EmptyInputError,
    d_ece,
    d_uce,
    ece,
    reliability_csv,
    reliability_json,
    reliability_table,
)
from .tensors import (
    ALGEBRAIC_TOL,
    NUMERIC_TOL,
    Tensor,
    elementwise_map,
    elementwise_mul,
    mean_over_rows,
    sigmoid,
    sigmoid_array,
    softmax_last_axis,
    variance_along_first_axis,
)
from .toy import (
    MODES,
    EvalResult,
    SyntheticScene,
    ToyConfig,
    ToyModel,
    TrainingDiverged,
    evaluate_toy,
    generate_dataset,
    positive_queries,
    run_ablation,
    run_experiment,
    train,
)

__version__ = "0.1.0"
