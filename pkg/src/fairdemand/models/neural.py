from __future__ import annotations

import numpy as np

from ..diffcore import Graph, Var
from .base import ForecastModel, ModelConfig, ModelError, glorot


class MLP(ForecastModel):
    """One hidden layer applied to each node's window; dropout after the hidden layer."""

    kind = "mlp"
    uses_dropout = True

    def param_shapes(self):
        K, M, H = self.config.K, self.config.M, self.config.hidden_size
        return {"W1": (K, H), "b1": (H,), "W2": (H, M), "b2": (M,)}

    def init_params(self, rng):
        K, M, H = self.config.K, self.config.M, self.config.hidden_size
        self.params = {"W1": glorot(rng, K, H), "b1": np.zeros(H), "W2": glorot(rng, H, M), "b2": np.zeros(M)}

    def expr(self, X, p, extras):
        hidden = X @ p["W1"] + p["b1"]
        if self.config.activation == "relu":
            hidden = hidden.relu()
        if "dropout_mask" in extras:
            hidden = hidden * extras["dropout_mask"]
        return hidden @ p["W2"] + p["b2"]


def mlp_forward(X, params, train_mode: bool = False, dropout_mask=None, dropout: float = 0.01,
                activation: str = "relu") -> np.ndarray:
    K, H = np.shape(params["W1"])
    M = np.shape(params["W2"])[1]
    model = MLP(ModelConfig("mlp", K=K, M=M, hidden=H, dropout=dropout, activation=activation))
    model.set_params(params)
    if not train_mode:
        return model.predict(X)
    X = np.asarray(X, dtype=np.float64)
    g = Graph()
    _, _, extras, pred = model.build(g, train_mode=True)
    bindings = {"X": X, **model.param_bindings()}
    if extras:
        if dropout_mask is None:
            raise ModelError("train_mode needs an explicit dropout mask")
        bindings["dropout_mask"] = dropout_mask
    g.forward(bindings)
    return np.array(g.value(pred))


def _gru_param_shapes(D: int, H: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for gate in ("z", "r", "n"):
        shapes[f"W_{gate}"] = (D, H)
        shapes[f"U_{gate}"] = (H, H)
        shapes[f"b_{gate}"] = (H,)
    shapes["W_out"] = (H, 1)
    shapes["b_out"] = (1,)
    return shapes


def _gru_init(rng: np.random.Generator, D: int, H: int) -> dict[str, np.ndarray]:
    params = {}
    for gate in ("z", "r", "n"):
        params[f"W_{gate}"] = glorot(rng, D, H)
        params[f"U_{gate}"] = glorot(rng, H, H)
        params[f"b_{gate}"] = np.zeros(H)
    params["W_out"] = glorot(rng, H, 1)
    params["b_out"] = np.zeros(1)
    return params


def gru_cell(x: Var, h: Var | None, p: dict[str, Var]) -> Var:
    """h' = (1 - z) h + z n with update z, reset r, candidate n = tanh(x W + (r h) U + b).

    ``p`` holds the per-gate weights plus the fused update/reset blocks
    ``W_zr``, ``U_zr``, ``b_zr`` (see :func:`fuse_gates`).
    """
    if h is None:  # zero initial state: r is irrelevant and h U vanishes
        z = (x @ p["W_z"] + p["b_z"]).sigmoid()
        n = (x @ p["W_n"] + p["b_n"]).tanh()
        return z * n
    gates = (x @ p["W_zr"] + h @ p["U_zr"] + p["b_zr"]).sigmoid()
    size = p["size"]
    z, r = gates[..., :size], gates[..., size:]
    n = (x @ p["W_n"] + (r * h) @ p["U_n"] + p["b_n"]).tanh()
    return h + z * (n - h)


def fuse_gates(p: dict[str, Var], size: int) -> dict:
    """Concatenate the update and reset weights so both gates share one matmul."""
    g = p["U_z"].graph
    return {
        **p,
        "W_zr": g.concat([p["W_z"], p["W_r"]], axis=-1),
        "U_zr": g.concat([p["U_z"], p["U_r"]], axis=-1),
        "b_zr": g.concat([p["b_z"], p["b_r"]], axis=-1),
        "size": size,
    }


class GRU(ForecastModel):
    """Gated recurrent unit over the K lags; each node is a sequence of scalars.

    Forecasts past the first horizon feed the previous prediction back in.
    """

    kind = "gru"

    def input_dim(self) -> int:
        return 1

    def param_shapes(self):
        return _gru_param_shapes(self.input_dim(), self.config.hidden_size)

    def init_params(self, rng):
        self.params = _gru_init(rng, self.input_dim(), self.config.hidden_size)

    def step_input(self, x_t: Var, p: dict[str, Var]) -> Var:
        return x_t

    def expr(self, X, p, extras):
        p = fuse_gates(p, self.config.hidden_size)
        h = None
        for k in range(self.config.K):
            h = gru_cell(self.step_input(X[..., k:k + 1], p), h, p)
        outputs = [h @ p["W_out"] + p["b_out"]]
        for _ in range(1, self.config.M):
            h = gru_cell(self.step_input(outputs[-1], p), h, p)
            outputs.append(h @ p["W_out"] + p["b_out"])
        return outputs[0] if len(outputs) == 1 else X.graph.concat(outputs, axis=-1)


def gru_forward(X, params) -> np.ndarray:
    H = np.shape(params["U_z"])[0]
    X = np.asarray(X)
    model = GRU(ModelConfig("gru", K=X.shape[-1], hidden=H))
    model.set_params(params)
    return model.predict(X)


class TGCN(GRU):
    """GRU whose per-step input is the graph-convolved demand  A_hat x_t Theta."""

    kind = "tgcn"

    def __init__(self, config: ModelConfig, propagation: np.ndarray, node_ids=None):
        super().__init__(config)
        A = np.asarray(propagation, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ModelError("propagation matrix must be square")
        self.propagation = A
        self.node_ids = tuple(node_ids) if node_ids is not None else None

    def n_nodes(self) -> int:
        return self.propagation.shape[0]

    def input_dim(self) -> int:
        return self.config.gc_dim

    def param_shapes(self):
        return {"Theta": (1, self.config.gc_dim), **super().param_shapes()}

    def init_params(self, rng):
        theta = glorot(rng, 1, self.config.gc_dim)
        super().init_params(rng)
        self.params = {"Theta": theta, **self.params}

    def step_input(self, x_t, p):
        return (self.propagation @ x_t) @ p["Theta"]

    def check_nodes(self, node_ids) -> None:
        if self.node_ids is not None and tuple(node_ids) != self.node_ids:
            raise ModelError("propagation matrix node order differs from the data")

    def state_extras(self):
        return {"propagation": self.propagation.tolist(), "node_ids": list(self.node_ids or [])}


def tgcn_forward(X, params, propagation) -> np.ndarray:
    H = np.shape(params["U_z"])[0]
    F = np.shape(params["Theta"])[1]
    X = np.asarray(X)
    A = np.asarray(propagation)
    if X.shape[-2] != A.shape[0]:
        raise ModelError(f"window has {X.shape[-2]} nodes, propagation matrix {A.shape[0]}")
    model = TGCN(ModelConfig("tgcn", K=X.shape[-1], hidden=H, gc_dim=F), A)
    model.set_params(params)
    return model.predict(X)
