from .adamatch import AdaMatchHistory, train_adamatch
from .baseline import BaselineHistory, train_baseline
from .common import TrainingError, TrainLog, predict_probs, seed_everything
from .dbacs import DbacsEnsemble, DbacsHistory, build_ensemble, train_dbacs
from .pseudo_label import OfflinePLHistory, OnlinePLHistory, train_offline_pl, train_online_pl

__all__ = [
    "AdaMatchHistory", "BaselineHistory", "DbacsEnsemble", "DbacsHistory", "OfflinePLHistory", "OnlinePLHistory",
    "TrainLog", "TrainingError", "build_ensemble", "predict_probs", "seed_everything", "train_adamatch",
    "train_baseline", "train_dbacs", "train_offline_pl", "train_online_pl",
]
