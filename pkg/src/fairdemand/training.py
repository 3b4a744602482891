"""Combined accuracy/fairness loss, Adam training with early stopping, and
the lambda grid search."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import (
    DemandTensor,
    GroupLabeling,
    Normalizer,
    ProtectedAttributeTable,
    SplitSpec,
    WindowedSamples,
    chronological_split,
    fit_normalizer,
    label_groups,
    make_windows,
)
from .diffcore import Graph, NonFiniteError, Var
from .fairness import (
    DEMAND_FLOOR,
    FairnessError,
    FairnessReport,
    attribute_corr_matrix,
    benchmark_regularizer_expr,
    correlation_expr,
    fairness_report,
    masked_attribute_stats,
    multiple_correlation_expr,
)
from .models import ForecastModel, ModelConfig, create_model

log = logging.getLogger(__name__)

FAIRNESS_MODES = ("multi", "single", "em", "rfg", "ifg", "none")
DEFAULT_LAMBDA_GRID = (0.0, 0.025, 0.05, 0.075, 0.1, 0.2, 0.3, 0.4, 0.5)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    """``lam`` weighs the fairness term; ``attributes`` picks the protected
    attributes it sees (all of them when None, exactly one for single/em/rfg/ifg)."""

    lam: float = 0.0
    mode: str = "multi"
    attributes: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.mode not in FAIRNESS_MODES:
            raise ValueError(f"unknown fairness mode {self.mode!r}")
        if not (0.0 <= self.lam <= 1.0) or math.isnan(self.lam):
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.mode == "none":
            object.__setattr__(self, "lam", 0.0)
        if self.attributes is not None:
            object.__setattr__(self, "attributes", tuple(self.attributes))
        if self.mode in ("single", "em", "rfg", "ifg") and (self.attributes is None or len(self.attributes) != 1):
            raise ValueError(f"mode {self.mode!r} needs exactly one attribute")

    def to_dict(self) -> dict:
        return {"lam": self.lam, "mode": self.mode, "attributes": None if self.attributes is None else list(self.attributes)}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.max_epochs, self.patience, self.clip_norm) <= 0:
            raise ValueError("training hyperparameters must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_R: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list, compare=False)
    best_epoch: int = -1  # zero-based; -1 when nothing was trained

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_R", "wall_time", "best"])
        for i in range(len(self)):
            w.writerow([i + 1, repr(self.train_loss[i]), repr(self.val_loss[i]), repr(self.val_R[i]),
                        f"{self.wall_time[i]:.3f}", int(i == self.best_epoch)])
        return buf.getvalue()


class EarlyStopping:
    """Tracks the best validation loss and keeps a copy of its parameters."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.best_params: dict[str, np.ndarray] | None = None
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float, params: dict[str, np.ndarray]) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            self.best_params = {k: v.copy() for k, v in params.items()}
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- data bundle -------------------------------------------------------------

@dataclass
class SplitArrays:
    """Normalized windows plus the per-(sample, step) constants of the fairness term."""

    X: np.ndarray  # (S, N, K) normalized
    Y: np.ndarray  # (S, N, M) normalized
    Y_raw: np.ndarray  # (S, N, M)

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass
class PreparedData:
    tensor: DemandTensor
    table: ProtectedAttributeTable
    labeling: GroupLabeling
    normalizer: Normalizer
    K: int
    M: int
    train: SplitArrays
    val: SplitArrays
    test: SplitArrays
    train_series: np.ndarray  # (N, T_train) normalized
    node_scale: np.ndarray  # (N,) raw training mean

    @property
    def n_nodes(self) -> int:
        return self.tensor.n_nodes


def _split_arrays(w: WindowedSamples, norm: Normalizer) -> SplitArrays:
    return SplitArrays(norm.normalize(w.X), norm.normalize(w.Y), w.Y)


def prepare_data(
    tensor: DemandTensor,
    table: ProtectedAttributeTable,
    K: int = 12,
    M: int = 1,
    split: SplitSpec = SplitSpec(),
    norm_mode: str = "node",
    labeling: GroupLabeling | None = None,
) -> PreparedData:
    """Chronological split, windows inside each split, normalizer fit on train only."""
    if tuple(table.node_ids) != tuple(tensor.node_ids):
        raise ValueError("attribute table and demand tensor disagree on node order")
    train, val, test = chronological_split(tensor, split)
    norm = fit_normalizer(train, norm_mode)
    return PreparedData(
        tensor=tensor,
        table=table,
        labeling=labeling if labeling is not None else label_groups(table),
        normalizer=norm,
        K=K,
        M=M,
        train=_split_arrays(make_windows(train, K, M), norm),
        val=_split_arrays(make_windows(val, K, M), norm),
        test=_split_arrays(make_windows(test, K, M), norm),
        train_series=norm.normalize(train.values),
        node_scale=train.values.mean(axis=1),
    )


# -- loss --------------------------------------------------------------------

class FairnessTerm:
    """Numeric context of the fairness term for one LossConfig on one dataset."""

    def __init__(self, cfg: LossConfig, table: ProtectedAttributeTable, labeling: GroupLabeling,
                 node_scale: np.ndarray | None = None):
        self.cfg = cfg
        names = cfg.attributes if cfg.attributes is not None else table.names
        missing = [a for a in names if a not in table.names]
        if missing:
            raise ValueError(f"unknown protected attributes {missing}")
        self.names = tuple(names)
        self.cols = [table.names.index(a) for a in self.names]
        self.Z = table.Z[:, self.cols]
        self.omega_inv = attribute_corr_matrix(self.Z).omega_inv if cfg.mode in ("multi", "single", "none") else None
        self.labeling = labeling
        self.node_scale = node_scale

    @property
    def uses_r(self) -> bool:
        return self.cfg.mode in ("multi", "single")

    def batch_constants(self, Y_raw: np.ndarray) -> dict[str, np.ndarray]:
        """Mask-dependent constants for raw targets (B, N, M), laid out (B, M, N[, Q])."""
        y = np.swapaxes(Y_raw, 1, 2)
        mask = y >= DEMAND_FLOOR
        out = {"y_raw": y, "denom": np.where(mask, y, 1.0)}
        if self.omega_inv is not None:
            out["w"] = mask.astype(np.float64)
            out["n"] = np.maximum(out["w"].sum(axis=-1, keepdims=True), 1.0)
            out["z_c"], out["z_norm"] = masked_attribute_stats(mask, self.Z)
        return out

    def r_expr(self, pred_raw_t: Var, c: dict[str, Var]) -> Var:
        """Mean over (batch, step) of R between APE and the attributes."""
        e = abs(c["y_raw"] - pred_raw_t) / c["denom"]
        corr = correlation_expr(e, c["w"], c["n"], c["z_c"], c["z_norm"])
        return multiple_correlation_expr(corr, self.omega_inv).mean()

    def expr(self, pred_raw_t: Var, c: dict[str, Var]) -> Var:
        if self.uses_r:
            return self.r_expr(pred_raw_t, c)
        j = self.labeling.index(self.names[0])
        return benchmark_regularizer_expr(self.cfg.mode, pred_raw_t, self.labeling, j, self.node_scale)


CONSTANT_SHAPES = {
    "y_raw": (None, None, None),
    "denom": (None, None, None),
    "w": (None, None, None),
    "n": (None, None, 1),
    "z_c": (None, None, None, None),
    "z_norm": (None, None, None),
}


class LossGraph:
    """Model forward plus the combined loss, built once and re-bound per batch.

    loss = (1 - lam) * MSE(normalized) + lam * fairness(denormalized);
    mode ``none`` builds the MSE alone.  With ``monitor`` set, R over the
    monitor's attributes is exposed as ``self.R`` (it is the term itself
    when the loss already uses R).
    """

    def __init__(self, model: ForecastModel, term: FairnessTerm, normalizer: Normalizer, train_mode: bool,
                 monitor: FairnessTerm | None = None):
        self.model, self.term = model, term
        self.r_term = term if term.uses_r else monitor
        self.graph = g = Graph()
        X, pvars, extras, pred = model.build(g, train_mode=train_mode)
        self.pvars, self.pred = pvars, pred
        self.Y = g.input("Y", shape=(None, None, model.config.M))
        diff = pred - self.Y
        self.mse = (diff * diff).mean()
        cfg = term.cfg
        need_fair = cfg.mode != "none"
        want_r = monitor is not None and self.r_term is not None
        self.consts: dict[str, Var] = {}
        self.fair = self.R = None
        if need_fair or want_r:
            keys = ["y_raw", "denom"] + (["w", "n", "z_c", "z_norm"] if term.uses_r or want_r else [])
            self.consts = {k: g.input(k, shape=CONSTANT_SHAPES[k]) for k in keys}
            pred_raw_t = (pred * normalizer.std + normalizer.mean).transpose(0, 2, 1)
            if need_fair:
                self.fair = term.expr(pred_raw_t, self.consts)
            if want_r:
                self.R = self.fair if term.uses_r else self.r_term.r_expr(pred_raw_t, self.consts)
        self.loss = (1.0 - cfg.lam) * self.mse + cfg.lam * self.fair if need_fair else self.mse
        g.set_output(self.loss)

    def bindings(self, X, Y, Y_raw, params, extra=None) -> dict:
        b = {"X": X, "Y": Y, **self.model.param_bindings(params)}
        if self.consts:
            consts = (self.r_term or self.term).batch_constants(Y_raw)
            b.update({k: consts[k] for k in self.consts})
        if extra:
            b.update(extra)
        return b


def combined_loss(
    pred: np.ndarray,
    Y: np.ndarray,
    Y_raw: np.ndarray,
    normalizer: Normalizer,
    term: FairnessTerm,
) -> float:
    """Numeric value of the combined loss for normalized predictions (B, N, M)."""
    g = Graph()
    P = g.input("P", shape=np.shape(pred))
    Yv = g.input("Y", shape=np.shape(Y))
    diff = P - Yv
    mse = (diff * diff).mean()
    if term.cfg.mode == "none":
        g.set_output(mse)
        return g.evaluate({"P": pred, "Y": Y})
    consts = term.batch_constants(Y_raw)
    cv = {k: g.input(k) for k in consts}
    fair = term.expr((P * normalizer.std + normalizer.mean).transpose(0, 2, 1), cv)
    g.set_output((1.0 - term.cfg.lam) * mse + term.cfg.lam * fair)
    return g.evaluate({"P": pred, "Y": Y, **consts})


# -- training ----------------------------------------------------------------

def _mean_over_batches(lg: LossGraph, split: SplitArrays, params, batch_size: int) -> tuple[float, float]:
    """Sample-weighted mean of the loss and of R over a split in inference mode."""
    total_loss = total_r = 0.0
    S = len(split)
    for start in range(0, S, batch_size):
        sl = slice(start, start + batch_size)
        vals = lg.graph.forward(lg.bindings(split.X[sl], split.Y[sl], split.Y_raw[sl], params))
        n = min(batch_size, S - start)
        total_loss += float(vals[lg.loss.id]) * n
        if lg.R is not None:
            total_r += float(vals[lg.R.id]) * n
    return total_loss / S, total_r / S


def train(
    model: ForecastModel,
    data: PreparedData,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, dict[str, np.ndarray]], None] | None = None,
) -> tuple[ForecastModel, TrainHistory]:
    """Mini-batch Adam on the combined loss; returns the best-validation parameters."""
    history = TrainHistory()
    rng = np.random.default_rng(train_cfg.seed)
    if len(data.train) == 0 or len(data.val) == 0:
        raise TrainingError("train and validation windows must be non-empty")
    if not model.trainable:
        return model, history
    model.prepare(data.train_series, rng)
    if model.n_nodes() is not None and model.n_nodes() != data.n_nodes:
        raise TrainingError(f"model expects {model.n_nodes()} nodes, data has {data.n_nodes}")

    term = FairnessTerm(loss_cfg, data.table, data.labeling, data.node_scale)
    monitor = FairnessTerm(LossConfig(0.0, "none"), data.table, data.labeling, data.node_scale)
    train_graph = LossGraph(model, term, data.normalizer, train_mode=True)
    val_graph = LossGraph(model, term, data.normalizer, train_mode=False, monitor=monitor)

    params = {k: v.copy() for k, v in model.params.items()}
    names = list(params)
    wrt = [f"param:{k}" for k in names]
    opt = Adam(train_cfg.lr)
    stopper = EarlyStopping(train_cfg.patience)
    S = len(data.train)
    t0 = time.perf_counter()
    for epoch in range(train_cfg.max_epochs):
        order = rng.permutation(S)
        running = 0.0
        for b, start in enumerate(range(0, S, train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            extra = model.extra_bindings((len(idx), data.n_nodes), rng)
            binds = train_graph.bindings(data.train.X[idx], data.train.Y[idx], data.train.Y_raw[idx], params, extra)
            try:
                loss, grads = train_graph.graph.value_and_gradients(binds, wrt)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in epoch {epoch + 1}, batch {b}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch + 1}, batch {b}")
            grads = {k: np.array(grads[w], dtype=np.float64) for k, w in zip(names, wrt)}
            clip_by_global_norm(grads, train_cfg.clip_norm)
            opt.step(params, grads)
            running += loss * len(idx)
        val_loss, val_r = _mean_over_batches(val_graph, data.val, params, max(train_cfg.batch_size, 256))
        history.train_loss.append(running / S)
        history.val_loss.append(val_loss)
        history.val_R.append(val_r)
        history.wall_time.append(time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, params)
        if stopper.step(epoch, val_loss, params):
            break
    history.best_epoch = stopper.best_epoch
    model.set_params(stopper.best_params if stopper.best_params is not None else params)
    return model, history


def predict_raw(model: ForecastModel, X: np.ndarray, normalizer: Normalizer, batch_size: int = 256) -> np.ndarray:
    """Denormalized forecasts (S, N, M) for normalized windows."""
    parts = [model.predict(X[s:s + batch_size]) for s in range(0, X.shape[0], batch_size)]
    return normalizer.denormalize(np.concatenate(parts, axis=0))


def evaluate(model: ForecastModel, data: PreparedData, split: str = "test", lam: float = 0.0,
             name: str | None = None, pooling: str = "per_step") -> FairnessReport:
    arrays = getattr(data, split)
    pred = predict_raw(model, arrays.X, data.normalizer)
    report = fairness_report(arrays.Y_raw, pred, data.table, data.labeling, name or model.kind, lam, pooling)
    if report.mae > report.rmse + 1e-12:
        raise FairnessError("MAE exceeds RMSE")
    return report


# -- grid search -------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    lambdas: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    hyper: dict = field(default_factory=dict)  # model kind -> list of ModelConfig overrides
    tau: float = 0.10

    def __post_init__(self):
        lams = tuple(float(v) for v in self.lambdas)
        if not lams:
            raise ValueError("lambda grid is empty")
        if 0.0 not in lams:
            raise ValueError("lambda grid must include 0 (the fairness-unaware baseline)")
        if any(not 0.0 <= v <= 1.0 for v in lams):
            raise ValueError("lambda values must lie in [0, 1]")
        object.__setattr__(self, "lambdas", lams)

    def overrides(self, kind: str) -> list[dict]:
        return list(self.hyper.get(kind, [{}])) or [{}]


@dataclass
class GridRow:
    config: ModelConfig
    loss: LossConfig
    report: FairnessReport
    history: TrainHistory
    model: ForecastModel | None = None

    @property
    def fairness_score(self) -> float:
        return sum(abs(v) for v in self.report.corr.values() if v is not None)


@dataclass
class GridResult:
    rows: list[GridRow]
    best: GridRow
    baseline: GridRow
    constraint_failed: bool


def run_seed(base_seed: int, kind: str) -> int:
    """Per-model training seed; independent of lambda so every grid point shares an init."""
    return (base_seed * 1_000_003 + zlib.crc32(kind.encode())) % (2 ** 32)


def fit_one(
    config: ModelConfig,
    data: PreparedData,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    propagation: np.ndarray | None = None,
    pooling: str = "per_step",
) -> GridRow:
    model = create_model(config, propagation, data.tensor.node_ids)
    model, history = train(model, data, loss_cfg, train_cfg)
    report = evaluate(model, data, "test", loss_cfg.lam, pooling=pooling)
    return GridRow(config, loss_cfg, report, history, model)


def select_best(rows: Sequence[GridRow], tau: float = 0.10) -> tuple[GridRow, GridRow, bool]:
    """Minimize sum |Corr| subject to RMSE <= (1 + tau) * baseline RMSE; ties go to lower RMSE."""
    baselines = [r for r in rows if r.loss.lam == 0.0]
    if not baselines:
        raise ValueError("grid results lack a lambda = 0 row")
    baseline = min(baselines, key=lambda r: (r.report.rmse, r.fairness_score))
    limit = (1.0 + tau) * baseline.report.rmse
    ok = [r for r in rows if r.report.rmse <= limit]
    failed = not ok
    pool = ok if ok else list(rows)
    best = min(pool, key=lambda r: (r.fairness_score, r.report.rmse))
    return best, baseline, failed


def grid_search(
    kind: str,
    grid: GridSpec,
    data: PreparedData,
    loss_template: LossConfig,
    train_cfg: TrainConfig = TrainConfig(),
    base_config: ModelConfig | None = None,
    propagation: np.ndarray | None = None,
    keep_models: bool = False,
    pooling: str = "per_step",
) -> GridResult:
    """Train every (hyperparameter override, lambda) pair and select the best lambda."""
    base = base_config or ModelConfig(kind, K=data.K, M=data.M)
    rows = []
    for override in grid.overrides(kind):
        cfg_dict = {**base.to_dict(), **override, "kind": kind}
        config = ModelConfig.from_dict(cfg_dict)
        tcfg = TrainConfig(**{**train_cfg.to_dict(), "seed": run_seed(train_cfg.seed, kind)})
        for lam in grid.lambdas:
            loss_cfg = LossConfig(lam, loss_template.mode, loss_template.attributes)
            row = fit_one(config, data, loss_cfg, tcfg, propagation, pooling)
            if not keep_models:
                row.model = None
            rows.append(row)
            log.info("%s lam=%g rmse=%.4f sum|corr|=%.4f", kind, lam, row.report.rmse, row.fairness_score)
    best, baseline, failed = select_best(rows, grid.tau)
    if failed:
        log.warning("%s: no configuration satisfies the RMSE constraint; returning the fairness-optimal one", kind)
    return GridResult(rows, best, baseline, failed)


def percent_change(original: float | None, modified: float | None) -> float | None:
    """(|o| - |m|) * 100 / |o|; positive means the magnitude shrank."""
    if original is None or modified is None:
        return None
    if original == 0:
        return 0.0
    return (abs(original) - abs(modified)) * 100.0 / abs(original)
