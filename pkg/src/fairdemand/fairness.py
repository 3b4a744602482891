"""Accuracy-equality metrics and the differentiable fairness terms.

Two layers live here.  The numpy functions (:func:`ape`, :func:`pag`,
:func:`pearson`, :func:`multiple_correlation`, :func:`fairness_report`)
score finished predictions.  The ``*_expr`` builders emit the same
quantities as :mod:`fairdemand.diffcore` expressions so they can sit inside
a training loss.

Node-time pairs whose true demand is below one trip are masked: APE is
undefined at zero demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import ADVANTAGED, DISADVANTAGED, GroupLabeling, ProtectedAttributeTable
from .diffcore import Var

PEARSON_EPS = math.exp(-20)
SQRT_EPS = 1e-12
RIDGE = 1e-8
DEMAND_FLOOR = 1.0
MAX_CONDITION = 1e14
REGULARIZER_KINDS = ("em", "rfg", "ifg")
RATIO_FLOOR = 1e-3


class FairnessError(ValueError):
    pass


@dataclass(frozen=True)
class AccuracyVector:
    e: np.ndarray
    mask: np.ndarray  # True where the node counts

    def __post_init__(self):
        if self.e.shape != self.mask.shape:
            raise FairnessError("APE values and mask differ in shape")


def ape(y_true, y_pred, floor: float = DEMAND_FLOOR) -> AccuracyVector:
    """Absolute percentage error; entries with ``y_true < floor`` are masked."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise FairnessError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    mask = y_true >= floor
    e = np.where(mask, np.abs(y_true - y_pred) / np.where(mask, y_true, 1.0), 0.0)
    return AccuracyVector(e, mask)


def _flat_to_zero(centered: np.ndarray, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero the centered values of rows that are constant over the mask.

    Rounding in the mean leaves ~1e-17 residuals that the tiny denominator
    guard would otherwise amplify into a spurious nonzero correlation.
    """
    x = np.broadcast_to(x, np.broadcast_shapes(x.shape, w.shape))
    on = np.broadcast_to(w, x.shape) > 0
    hi = np.where(on, x, -np.inf).max(axis=-1, keepdims=True)
    lo = np.where(on, x, np.inf).min(axis=-1, keepdims=True)
    return np.where(hi == lo, 0.0, centered)


def _masked_pearson(e: np.ndarray, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pearson r along the last axis with 0/1 weights ``w``; eps-guarded denominator."""
    n = w.sum(axis=-1, keepdims=True)
    e_c = _flat_to_zero((e - (w * e).sum(axis=-1, keepdims=True) / n) * w, e, w)
    z_c = _flat_to_zero((z - (w * z).sum(axis=-1, keepdims=True) / n) * w, z, w)
    num = (e_c * z_c).sum(axis=-1)
    den = np.sqrt((e_c ** 2).sum(axis=-1)) * np.sqrt((z_c ** 2).sum(axis=-1)) + PEARSON_EPS
    return num / den


def pearson(e, z, mask=None) -> float:
    """Pearson correlation over unmasked entries, ``exp(-20)`` added to the denominator."""
    if isinstance(e, AccuracyVector):
        e, mask = e.e, e.mask
    e = np.asarray(e, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if e.shape != z.shape:
        raise FairnessError(f"shape mismatch {e.shape} vs {z.shape}")
    w = np.ones_like(e) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.sum() < 2:
        raise FairnessError("pearson needs at least two unmasked nodes")
    return float(_masked_pearson(e, z, w))


def pag(acc: AccuracyVector, labeling: GroupLabeling, j: int) -> float | None:
    """Mean APE of disadvantaged minus advantaged nodes, in percent.

    Middle-band nodes are ignored.  Returns ``None`` when either group has
    no unmasked node or the attribute is degenerate.
    """
    if labeling.degenerate[j]:
        return None
    lab = labeling.labels[j]
    dis = (lab == DISADVANTAGED) & acc.mask
    adv = (lab == ADVANTAGED) & acc.mask
    if not dis.any() or not adv.any():
        return None
    return float((acc.e[dis].mean() - acc.e[adv].mean()) * 100.0)


@dataclass(frozen=True)
class AttributeCorrelationMatrix:
    omega: np.ndarray
    omega_inv: np.ndarray
    ridge: float
    condition: float


def attribute_corr_matrix(table: ProtectedAttributeTable | np.ndarray, ridge: float = RIDGE) -> AttributeCorrelationMatrix:
    Z = table.Z if isinstance(table, ProtectedAttributeTable) else np.asarray(table, dtype=np.float64)
    N, Q = Z.shape
    if Q < 1 or N < 3:
        raise FairnessError(f"need Q >= 1 attributes and N >= 3 nodes, got Q={Q}, N={N}")
    zt = Z.T
    omega = _masked_pearson(zt[:, None, :], zt[None, :, :], np.ones((1, 1, N)))
    omega = 0.5 * (omega + omega.T)
    np.fill_diagonal(omega, 1.0)
    ridged = omega + ridge * np.eye(Q)
    cond = float(np.linalg.cond(ridged))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise FairnessError(f"attribute correlation matrix is singular (condition number {cond:.3g})")
    return AttributeCorrelationMatrix(omega, np.linalg.inv(ridged), ridge, cond)


def correlation_vector(acc: AccuracyVector, Z: np.ndarray) -> np.ndarray:
    if acc.mask.sum() < 2:
        raise FairnessError("need at least two unmasked nodes")
    w = acc.mask.astype(np.float64)
    return _masked_pearson(acc.e[None, :], np.asarray(Z, dtype=np.float64).T, w[None, :])


def multiple_correlation(acc: AccuracyVector, Z: np.ndarray, omega_inv: np.ndarray) -> float:
    """sqrt(c' Omega^-1 c + eps) where c holds the APE-attribute correlations."""
    c = correlation_vector(acc, Z)
    return float(np.sqrt(c @ omega_inv @ c + SQRT_EPS))


# -- differentiable terms ---------------------------------------------------

def ape_expr(pred_raw: Var, y_raw: np.ndarray | Var, denom: np.ndarray | Var) -> Var:
    """|y - pred| / denom; ``denom`` is y with masked entries replaced by 1."""
    return abs(y_raw - pred_raw) / denom


def masked_attribute_stats(mask: np.ndarray, Z: np.ndarray):
    """Centered attributes and their norms for each masked node set.

    ``mask`` has shape (..., N); returns ``z_c`` with shape (..., N, Q) and
    ``z_norm`` with shape (..., Q).  These are constants with respect to the
    model parameters and are precomputed per batch.
    """
    w = mask.astype(np.float64)[..., None]
    n = np.maximum(w.sum(axis=-2, keepdims=True), 1.0)
    z_c = (Z - (w * Z).sum(axis=-2, keepdims=True) / n) * w
    z_norm = np.sqrt((z_c ** 2).sum(axis=-2))
    return z_c, z_norm


def correlation_expr(e: Var, w, n, z_c, z_norm) -> Var:
    """Correlation of ``e`` (..., N) with each attribute -> (..., Q).

    ``w`` is the 0/1 node mask, ``n`` its count along the node axis (kept
    dims, floored at 1), ``z_c``/``z_norm`` come from
    :func:`masked_attribute_stats`.  Arrays or graph inputs are accepted.
    """
    e_c = (e - (e * w).sum(axis=-1, keepdims=True) / n) * w
    num = (e_c[..., None] * z_c).sum(axis=-2)
    e_norm = (e_c * e_c).sum(axis=-1, keepdims=True).sqrt(SQRT_EPS)
    return num / (e_norm * z_norm + PEARSON_EPS)


def multiple_correlation_expr(c: Var, omega_inv: np.ndarray) -> Var:
    """sqrt(c' Omega^-1 c + eps) over the last axis of ``c``."""
    return ((c @ omega_inv) * c).sum(axis=-1).sqrt(SQRT_EPS)


def _group_weights(labeling: GroupLabeling, j: int) -> tuple[np.ndarray, np.ndarray]:
    if labeling.degenerate[j]:
        raise FairnessError(f"attribute {labeling.names[j]!r} is degenerate")
    lab = labeling.labels[j]
    adv = (lab == ADVANTAGED).astype(np.float64)
    dis = (lab == DISADVANTAGED).astype(np.float64)
    if adv.sum() == 0 or dis.sum() == 0:
        raise FairnessError("both groups must be non-empty")
    return adv / adv.sum(), dis / dis.sum()


def benchmark_regularizer_expr(
    kind: str,
    pred_raw: Var,
    labeling: GroupLabeling,
    j: int,
    node_scale: np.ndarray | None = None,
) -> Var:
    """EM / RFG / IFG penalty on node predictions laid out as (..., N).

    ``node_scale`` is each node's mean observed training demand; RFG and
    IFG divide predictions by it to get a per-capita style proxy.  The
    result is averaged over all leading axes.
    """
    kind = kind.lower()
    adv_w, dis_w = _group_weights(labeling, j)
    if kind == "em":
        gap = pred_raw @ adv_w - pred_raw @ dis_w
        return (gap * gap).mean()
    if kind not in ("rfg", "ifg"):
        raise FairnessError(f"unknown regularizer {kind!r}")
    if node_scale is None:
        raise FairnessError(f"{kind} needs per-node training means")
    proxy = pred_raw / np.maximum(np.asarray(node_scale, dtype=np.float64), RATIO_FLOOR)
    m_adv, m_dis = proxy @ adv_w, proxy @ dis_w
    if kind == "rfg":
        gap = m_adv - m_dis
        return (gap * gap).mean()
    # mean over all cross-group pairs of (p_a - p_d)^2, expanded
    sq = proxy * proxy
    return (sq @ adv_w + sq @ dis_w - 2.0 * m_adv * m_dis).mean()


# -- reports ----------------------------------------------------------------

@dataclass
class FairnessReport:
    model: str
    lam: float
    mae: float
    rmse: float
    attributes: tuple[str, ...]
    corr: dict[str, float | None] = field(default_factory=dict)
    pag: dict[str, float | None] = field(default_factory=dict)

    def row(self) -> dict:
        out = {"model": self.model, "lambda": self.lam, "MAE": self.mae, "RMSE": self.rmse}
        for a in self.attributes:
            out[f"{a}:Corr"] = self.corr.get(a)
            out[f"{a}:PAG"] = self.pag.get(a)
        return out


def _pag_matrix(e: np.ndarray, mask: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """PAG per row of ``e`` (rows x N); NaN where a group is empty."""
    w = mask.astype(np.float64)
    dis = w * (labels == DISADVANTAGED)
    adv = w * (labels == ADVANTAGED)
    nd, na = dis.sum(axis=-1), adv.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        gap = (e * dis).sum(axis=-1) / nd - (e * adv).sum(axis=-1) / na
    gap[(nd == 0) | (na == 0)] = np.nan
    return gap * 100.0


def fairness_report(
    y_true: np.ndarray,
    y_pred: np.ndarray,
    table: ProtectedAttributeTable,
    labeling: GroupLabeling,
    model: str = "",
    lam: float = 0.0,
    pooling: str = "per_step",
) -> FairnessReport:
    """MAE, RMSE and per-attribute Corr/PAG for raw-unit arrays shaped (S, N, M).

    ``per_step`` scores every (sample, horizon) slice across nodes and averages
    the slices; ``pooled`` treats all node-time pairs as one population.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    err = y_pred - y_true
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err ** 2).mean()))
    acc = ape(y_true, y_pred)
    # (S, N, M) -> rows of node vectors
    e = np.moveaxis(acc.e, 1, -1).reshape(-1, y_true.shape[1])
    mask = np.moveaxis(acc.mask, 1, -1).reshape(-1, y_true.shape[1])
    report = FairnessReport(model, float(lam), mae, rmse, table.names)
    for j, name in enumerate(table.names):
        z = table.Z[:, j]
        if pooling == "per_step":
            ok = mask.sum(axis=1) >= 2
            r = _masked_pearson(e[ok], z[None, :], mask[ok].astype(np.float64))
            report.corr[name] = float(r.mean()) if r.size else None
            if labeling.degenerate[j]:
                report.pag[name] = None
            else:
                gaps = _pag_matrix(e, mask, labeling.labels[j])
                gaps = gaps[~np.isnan(gaps)]
                report.pag[name] = float(gaps.mean()) if gaps.size else None
        elif pooling == "pooled":
            flat = AccuracyVector(e.ravel(), mask.ravel())
            zz = np.broadcast_to(z, e.shape).ravel()
            report.corr[name] = pearson(flat, zz) if flat.mask.sum() >= 2 else None
            lab = np.broadcast_to(labeling.labels[j], e.shape).ravel()
            if labeling.degenerate[j]:
                report.pag[name] = None
            else:
                g = _pag_matrix(flat.e[None, :], flat.mask[None, :], lab[None, :])[0]
                report.pag[name] = None if np.isnan(g) else float(g)
        else:
            raise FairnessError(f"unknown pooling mode {pooling!r}")
    return report
