"""Semiparametric panel regression with a neural-network nonparametric component."""

from panelnn.errors import PanelNNError
from panelnn.network import Activation, Architecture, ParamSet, forward, init_params
from panelnn.panel_data import PanelDataset, group_index, load_csv, temporal_split, within_transform
from panelnn.training import FitConfig, FittedModel, PenaltySpec, fit, lambda_path

__all__ = [
    "Activation",
    "Architecture",
    "FitConfig",
    "FittedModel",
    "PanelDataset",
    "PanelNNError",
    "ParamSet",
    "PenaltySpec",
    "fit",
    "forward",
    "group_index",
    "init_params",
    "lambda_path",
    "load_csv",
    "temporal_split",
    "within_transform",
]

__version__ = "0.1.0"
