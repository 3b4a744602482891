from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore import Graph, Var

DEFAULT_HIDDEN = {"mlp": 300, "gru": 64, "tgcn": 64}


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Hyperparameters of one forecaster; ``hidden=None`` means the kind's default."""

    kind: str
    K: int = 12
    M: int = 1
    hidden: int | None = None
    dropout: float = 0.01
    activation: str = "relu"
    arima_order: tuple[int, int, int] = (2, 1, 1)
    gc_dim: int = 1
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        self.arima_order = tuple(int(v) for v in self.arima_order)
        if self.K < 1 or self.M < 1:
            raise ModelError("K and M must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        if self.activation not in ("relu", "linear"):
            raise ModelError(f"unknown activation {self.activation!r}")

    @property
    def hidden_size(self) -> int:
        return self.hidden if self.hidden is not None else DEFAULT_HIDDEN.get(self.kind, 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arima_order"] = list(self.arima_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ForecastModel:
    """Maps a batch of normalized windows (B, N, K) to forecasts (B, N, M).

    Subclasses describe their parameters through :meth:`param_shapes` and
    their forward computation through :meth:`expr`, which emits diffcore
    expressions; the same expression serves training and inference.
    """

    kind = ""
    trainable = True
    uses_dropout = False

    def __init__(self, config: ModelConfig):
        if config.kind != self.kind:
            raise ModelError(f"config kind {config.kind!r} given to {type(self).__name__}")
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self._infer_graph: tuple[Graph, Var, dict] | None = None

    # -- parameters ---------------------------------------------------------
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init_params(self, rng: np.random.Generator) -> None:
        self.params = {name: np.zeros(shape) for name, shape in self.param_shapes().items()}

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def prepare(self, train_series: np.ndarray, rng: np.random.Generator) -> None:
        """Initialise parameters before gradient training (``train_series`` is N x T, normalized)."""
        self.init_params(rng)

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        shapes = self.param_shapes()
        for name, shape in shapes.items():
            if name not in params:
                raise ModelError(f"missing parameter {name!r}")
            if tuple(np.shape(params[name])) != tuple(shape):
                raise ModelError(f"parameter {name!r} has shape {np.shape(params[name])}, expected {shape}")
        self.params = {k: np.array(params[k], dtype=np.float64) for k in shapes}
        self._infer_graph = None

    # -- graph construction -------------------------------------------------
    def n_nodes(self) -> int | None:
        return None

    def declare(self, g: Graph, train_mode: bool) -> tuple[Var, dict[str, Var], dict[str, Var]]:
        X = g.input("X", shape=(None, self.n_nodes(), self.config.K))
        pvars = {name: g.input(f"param:{name}", shape=shape) for name, shape in self.param_shapes().items()}
        extras = {}
        if train_mode and self.uses_dropout and self.config.dropout > 0:
            extras["dropout_mask"] = g.input("dropout_mask", shape=(None, None, self.config.hidden_size))
        return X, pvars, extras

    def build(self, g: Graph, train_mode: bool = False):
        """Declare inputs on ``g`` and return ``(X, params, extras, prediction)``."""
        X, pvars, extras = self.declare(g, train_mode)
        return X, pvars, extras, self.expr(X, pvars, extras)

    def expr(self, X: Var, p: dict[str, Var], extras: dict[str, Var]) -> Var:
        raise NotImplementedError

    def param_bindings(self, params: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        params = self.params if params is None else params
        return {f"param:{k}": v for k, v in params.items()}

    def extra_bindings(self, batch_shape: tuple[int, int], rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.uses_dropout and self.config.dropout > 0:
            p = self.config.dropout
            shape = batch_shape + (self.config.hidden_size,)
            return {"dropout_mask": (rng.random(shape) >= p) / (1.0 - p)}
        return {}

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Inference-mode forecast for windows shaped (B, N, K) or (N, K)."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
        if X.shape[-1] != self.config.K:
            raise ModelError(f"window length {X.shape[-1]} != K={self.config.K}")
        if self._infer_graph is None:
            g = Graph()
            Xv, _, _, pred = self.build(g, train_mode=False)
            self._infer_graph = (g, pred, {})
        g, pred, _ = self._infer_graph
        g.forward({"X": X, **self.param_bindings()})
        out = np.array(g.value(pred))
        return out[0] if single else out

    # -- checkpoints --------------------------------------------------------
    def state_extras(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {
            "format": "fairdemand-checkpoint/1",
            "kind": self.kind,
            "config": self.config.to_dict(),
            "extras": self.state_extras(),
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self.params.items()},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
