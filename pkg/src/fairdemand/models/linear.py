from __future__ import annotations

import numpy as np

from .base import ForecastModel, ModelConfig, glorot


def ha_forecast(X: np.ndarray, M: int = 1) -> np.ndarray:
    """Historical average: every horizon gets the row mean of the window."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=-1, keepdims=True)
    return np.repeat(mean, M, axis=-1)


class HistoricalAverage(ForecastModel):
    kind = "ha"
    trainable = False

    def expr(self, X, p, extras):
        mean = X.mean(axis=-1, keepdims=True)
        if self.config.M == 1:
            return mean
        return X.graph.concat([mean] * self.config.M, axis=-1)

    def predict(self, X):
        return ha_forecast(X, self.config.M)


class MultivariateLinearRegression(ForecastModel):
    """One affine map from the K lags to the M horizons, shared by all nodes."""

    kind = "mlr"

    def param_shapes(self):
        K, M = self.config.K, self.config.M
        return {"B": (K, M), "b": (M,)}

    def init_params(self, rng):
        K, M = self.config.K, self.config.M
        self.params = {"B": glorot(rng, K, M), "b": np.zeros(M)}

    def expr(self, X, p, extras):
        return X @ p["B"] + p["b"]


def mlr_forward(X: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    B = np.asarray(params["B"])
    model = MultivariateLinearRegression(ModelConfig("mlr", K=B.shape[0], M=B.shape[1]))
    model.set_params(params)
    return model.predict(X)
