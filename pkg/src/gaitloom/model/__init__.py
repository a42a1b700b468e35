from .networks import (
    AblationFlags,
    ActivationDecoder,
    BASELINE_FLAGS,
    Encoder,
    EncoderConfig,
    Head,
    MainModel,
    MainOutputs,
    ModelBundle,
    TimingModel,
)
from .losses import main_loss, timing_loss
from .metrics import DegenerateLabelsError, circular_mae, metrics, nrmse, r2, rmse
from .training import (
    NumericDivergenceError,
    TrainConfig,
    evaluate,
    finetune,
    predict_angles,
    predict_timing,
    stack_inputs,
    train_main,
    train_timing,
)
from .ablation import TABLE_ORDER, AblationRow, loso_test_keys, run_ablation, write_ablation_csv

__all__ = [
    "AblationFlags", "BASELINE_FLAGS", "EncoderConfig", "Encoder", "Head",
    "ActivationDecoder", "MainModel", "MainOutputs", "TimingModel", "ModelBundle",
    "main_loss", "timing_loss",
    "metrics", "rmse", "nrmse", "r2", "circular_mae", "DegenerateLabelsError",
    "TrainConfig", "train_timing", "train_main", "finetune", "evaluate",
    "predict_angles", "predict_timing", "stack_inputs", "NumericDivergenceError",
    "TABLE_ORDER", "AblationRow", "run_ablation", "write_ablation_csv", "loso_test_keys",
]
