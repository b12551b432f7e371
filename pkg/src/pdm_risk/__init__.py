"""Per-timestep truck risk labeling: stacked LSTM, pseudo-labeling boost loop,
logical post-processing and majority-vote ensembling."""

from .data_model import Generation, PredictionSet, RiskLevel, TruckSeries, VariantRecord, Window

__all__ = ["Generation", "PredictionSet", "RiskLevel", "TruckSeries", "VariantRecord", "Window"]
__version__ = "0.1.0"
