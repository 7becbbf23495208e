from .lstm import Adam, LSTMConfig, LSTMModel, bce_loss, load_weights, save_weights
from .online import (AccuracyReport, FeatureWindow, OnlinePredictor, OraclePredictor,
                     Prediction, PredictorConfig, ReplayBuffer, TrainingExample,
                     evaluate_accuracy, forward, loss, train_step)

__all__ = [
    "Adam", "LSTMConfig", "LSTMModel", "bce_loss", "load_weights", "save_weights",
    "AccuracyReport", "FeatureWindow", "OnlinePredictor", "OraclePredictor", "Prediction",
    "PredictorConfig", "ReplayBuffer", "TrainingExample", "evaluate_accuracy", "forward",
    "loss", "train_step",
]
