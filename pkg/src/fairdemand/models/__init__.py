"""Forecaster registry and checkpoint loading."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .arima import ARIMA, arima_fit, arima_forecast
from .base import DEFAULT_HIDDEN, ForecastModel, ModelConfig, ModelError
from .linear import HistoricalAverage, MultivariateLinearRegression, ha_forecast, mlr_forward
from .neural import GRU, MLP, TGCN, gru_forward, mlp_forward, tgcn_forward

MODEL_KINDS = ("ha", "arima", "mlr", "mlp", "gru", "tgcn")

_REGISTRY = {
    "ha": HistoricalAverage,
    "arima": ARIMA,
    "mlr": MultivariateLinearRegression,
    "mlp": MLP,
    "gru": GRU,
    "tgcn": TGCN,
}


def create_model(config: ModelConfig, propagation: np.ndarray | None = None, node_ids=None) -> ForecastModel:
    cls = _REGISTRY.get(config.kind)
    if cls is None:
        raise ModelError(f"unknown model kind {config.kind!r}; expected one of {', '.join(MODEL_KINDS)}")
    if cls is TGCN:
        if propagation is None:
            raise ModelError("tgcn needs a propagation matrix")
        return TGCN(config, propagation, node_ids)
    return cls(config)


def model_from_dict(state: dict) -> ForecastModel:
    if state.get("format") != "fairdemand-checkpoint/1":
        raise ModelError("not a fairdemand checkpoint")
    config = ModelConfig.from_dict(state["config"])
    extras = state.get("extras", {})
    if config.kind == "tgcn":
        model = TGCN(config, np.array(extras["propagation"]), extras.get("node_ids") or None)
    elif config.kind == "arima":
        model = ARIMA(config, extras.get("n_nodes"))
        model.fallback = np.array(extras.get("fallback", []), dtype=np.float64)
    else:
        model = create_model(config)
    params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in state["params"].items()}
    if params or model.param_shapes():
        model.set_params(params)
    return model


def load_model(path: str | Path) -> ForecastModel:
    return model_from_dict(json.loads(Path(path).read_text()))


__all__ = [
    "ARIMA", "GRU", "MLP", "TGCN", "DEFAULT_HIDDEN", "MODEL_KINDS", "ForecastModel", "HistoricalAverage",
    "ModelConfig", "ModelError", "MultivariateLinearRegression", "arima_fit", "arima_forecast",
    "create_model", "gru_forward", "ha_forecast", "load_model", "mlp_forward", "mlr_forward",
    "model_from_dict", "tgcn_forward",
]
