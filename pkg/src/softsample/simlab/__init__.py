"""Desk-scale simulation: synthetic scenes, a linear RoI classifier and a
strategy comparison runner."""

from .detector import (
    ToyDetector,
    TrainConfig,
    TrainingDivergedError,
    iterate_minibatches,
    nms,
    roi_scores,
    softmax,
    train_weighted,
    weighted_loss,
    weighted_loss_grad,
)
from .experiment import (
    DEFAULT_DROP_RATES,
    STRATEGIES,
    ExperimentResult,
    ExperimentSpec,
    Lab,
    RunLog,
    TrainingSet,
    build_training_set,
    default_grid,
    detect,
    results_sd_csv,
    results_table_csv,
    run_strategy_comparison,
    score_training_set,
    strategy_weights,
    train_toy_detector,
)
from .scenes import SceneConfig, SceneLatents, generate_scenes, roi_features
