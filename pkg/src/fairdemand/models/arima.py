"""Per-node ARIMA(p, d, q) fitted by conditional least squares.

The recursion conditions on zero pre-sample shocks: residuals start at
``t = p`` of the differenced series.  A constant is estimated only when
``d == 0``, so ARIMA(0,1,0) is the driftless random walk.  Nodes whose fit
is explosive or non-invertible fall back to the random walk.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy.optimize import least_squares

from ..diffcore import Var
from .base import ForecastModel, ModelConfig, ModelError

log = logging.getLogger(__name__)


def _difference(series: np.ndarray, d: int) -> np.ndarray:
    for _ in range(d):
        series = np.diff(series)
    return series


def css_residuals(w: np.ndarray, const: float, phi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    p, q = len(phi), len(theta)
    eps = np.zeros_like(w)
    for t in range(p, len(w)):
        pred = const
        for i in range(p):
            pred += phi[i] * w[t - 1 - i]
        for j in range(q):
            if t - 1 - j >= p:
                pred += theta[j] * eps[t - 1 - j]
        eps[t] = w[t] - pred
    return eps[p:]


def _lagged_design(w: np.ndarray, p: int, start: int, const: bool) -> np.ndarray:
    cols = [w[start - 1 - i: len(w) - 1 - i] for i in range(p)]
    if const:
        cols.insert(0, np.ones(len(w) - start))
    return np.column_stack(cols) if cols else np.zeros((len(w) - start, 0))


def _stable(coefs: np.ndarray, sign: float) -> bool:
    """All roots of 1 + sign*(c1 z + ... + ck z^k) lie outside the unit circle."""
    if len(coefs) == 0 or not np.any(coefs):
        return True
    poly = np.r_[1.0, sign * np.asarray(coefs)][::-1]
    return bool(np.all(np.abs(np.roots(poly)) > 1.0 + 1e-6))


def fit_css(series: np.ndarray, p: int, d: int, q: int):
    """Fit one series; returns ``(const, phi, theta, ok)``."""
    w = _difference(np.asarray(series, dtype=np.float64), d)
    use_const = d == 0
    if q == 0:
        X = _lagged_design(w, p, p, use_const)
        beta = np.linalg.lstsq(X, w[p:], rcond=None)[0] if X.shape[1] else np.zeros(0)
        const = beta[0] if use_const else 0.0
        phi = beta[1:] if use_const else beta
        theta = np.zeros(0)
    else:
        # Hannan-Rissanen start: long AR for shock estimates, then OLS on lags
        m = min(max(p + q, 10), len(w) // 4)
        Xl = _lagged_design(w, m, m, True)
        a = np.linalg.lstsq(Xl, w[m:], rcond=None)[0]
        shocks = np.r_[np.zeros(m), w[m:] - Xl @ a]
        start = max(p, q) + m
        cols = [w[start - 1 - i: len(w) - 1 - i] for i in range(p)]
        cols += [shocks[start - 1 - j: len(w) - 1 - j] for j in range(q)]
        if use_const:
            cols.insert(0, np.ones(len(w) - start))
        X = np.column_stack(cols)
        beta0 = np.linalg.lstsq(X, w[start:], rcond=None)[0]
        beta0[-q:] = np.clip(beta0[-q:], -0.9, 0.9)

        def unpack(beta):
            c = beta[0] if use_const else 0.0
            off = 1 if use_const else 0
            return c, beta[off:off + p], beta[off + p:]

        res = least_squares(lambda b: css_residuals(w, *unpack(b)), beta0, method="lm")
        const, phi, theta = unpack(res.x)
    ok = _stable(phi, -1.0) and _stable(theta, 1.0) and np.all(np.isfinite(np.r_[const, phi, theta]))
    return float(const), np.asarray(phi, dtype=np.float64), np.asarray(theta, dtype=np.float64), bool(ok)


class ARIMA(ForecastModel):
    kind = "arima"

    def __init__(self, config: ModelConfig, n_nodes: int | None = None):
        super().__init__(config)
        p, d, q = config.arima_order
        if min(p, d, q) < 0:
            raise ModelError("ARIMA orders must be nonnegative")
        if config.K - d <= p:
            raise ModelError(f"window K={config.K} too short for p={p}, d={d}")
        self._n = n_nodes
        self.fallback = np.zeros(n_nodes or 0)

    @property
    def order(self):
        return self.config.arima_order

    def n_nodes(self):
        return self._n

    def param_shapes(self):
        p, d, q = self.order
        N = self._n or 0
        shapes = {"phi": (N, p), "theta": (N, q)}
        if d == 0:
            shapes["const"] = (N,)
        return shapes

    def fit(self, series: np.ndarray) -> "ARIMA":
        """Conditional least squares per node on an (N, T) training array."""
        series = np.asarray(series, dtype=np.float64)
        p, d, q = self.order
        N, T = series.shape
        if T < 10 * max(p + q + d, 1):
            raise ModelError(f"series length {T} < 10*(p+q+d)")
        self._n = N
        phi, theta, const = np.zeros((N, p)), np.zeros((N, q)), np.zeros(N)
        self.fallback = np.zeros(N)
        for i in range(N):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                c, f, t, ok = fit_css(series[i], p, d, q)
            if ok:
                const[i], phi[i], theta[i] = c, f, t
            else:
                log.warning("ARIMA%s fit for node %d is explosive or non-invertible; using (0,1,0)", self.order, i)
                self.fallback[i] = 1.0
        params = {"phi": phi, "theta": theta}
        if d == 0:
            params["const"] = const
        self.params = params
        self._infer_graph = None
        return self

    def prepare(self, train_series, rng):
        self.fit(train_series)

    def init_params(self, rng):
        if not self.params:
            raise ModelError("ARIMA parameters come from fit(), not random init")

    def expr(self, X, p, extras):
        g = X.graph
        P, d, Q = self.order
        K, M = self.config.K, self.config.M
        levels = [[X[..., k] for k in range(K)]]
        for _ in range(d):
            prev = levels[-1]
            levels.append([prev[t] - prev[t - 1] for t in range(1, len(prev))])
        w = list(levels[-1])
        phi = [p["phi"][:, i] for i in range(P)]
        theta = [p["theta"][:, j] for j in range(Q)]
        const = p.get("const")
        zero = X[..., 0] * 0.0  # carries the batch shape when no term reads X

        def one_step(t, eps):
            terms = [phi[i] * w[t - 1 - i] for i in range(P)]
            terms += [theta[j] * eps[t - 1 - j] for j in range(Q) if eps.get(t - 1 - j) is not None]
            if const is not None:
                terms.append(const)
            out = zero
            for term in terms:
                out = out + term
            return out

        eps: dict[int, Var] = {}
        for t in range(P, len(w)):
            eps[t] = w[t] - one_step(t, eps)
        outputs = []
        last = [lvl[-1] for lvl in levels]
        for _ in range(M):
            nxt = one_step(len(w), eps)
            w.append(nxt)
            for lvl in range(d - 1, -1, -1):
                nxt = last[lvl] + nxt
                last[lvl] = nxt
            last[d] = w[-1]
            outputs.append(nxt[..., None])
        pred = outputs[0] if M == 1 else g.concat(outputs, axis=-1)
        if self.fallback.any():
            rw = self.fallback[:, None]
            pred = pred * (1.0 - rw) + X[..., K - 1:K] * rw
        return pred

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self._n is None or not self.params:
            raise ModelError("ARIMA model is not fitted")
        return super().predict(X)

    def state_extras(self):
        return {"fallback": self.fallback.tolist(), "n_nodes": self._n}


def arima_fit(series: np.ndarray, p: int, d: int, q: int, K: int = 12, M: int = 1) -> ARIMA:
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    return ARIMA(ModelConfig("arima", K=K, M=M, arima_order=(p, d, q))).fit(series)


def arima_forecast(model: ARIMA, X: np.ndarray) -> np.ndarray:
    return model.predict(X)
