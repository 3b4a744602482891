"""Synthetic city with planted attribute-dependent forecast error.

Node attributes come from a Gaussian copula whose correlations default to
the race/education/age/income pattern of a large US city.  Each attribute
gets an oriented disadvantage score (positive = disadvantaged); a weighted
sum of these scores scales the node's multiplicative noise, and another
weighted sum scales its demand level.  Counts are Poisson around a daily
profile times a slowly varying AR(1) log-intensity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np
from scipy.special import ndtr

from .dataset import DEFAULT_ATTRIBUTES, DEFAULT_DIRECTIONS, DemandTensor, ProtectedAttributeTable

CITY_CORRELATION = (
    (1.000, 0.620, 0.504, -0.748),
    (0.620, 1.000, 0.682, -0.610),
    (0.504, 0.682, 1.000, -0.403),
    (-0.748, -0.610, -0.403, 1.000),
)


@dataclass(frozen=True)
class SyntheticSpec:
    n_nodes: int = 60
    n_steps: int = 2000
    seed: int = 0
    attributes: tuple[str, ...] = DEFAULT_ATTRIBUTES
    correlation: tuple[tuple[float, ...], ...] = CITY_CORRELATION
    base_level: float = 50.0  # median expected trips per interval
    level_loadings: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2)  # log-level change per unit disadvantage
    noise_base: float = 0.15  # multiplicative noise sd at zero disadvantage
    noise_loadings: tuple[float, ...] = (0.4, 0.4, 0.4, 0.4)  # log-sd change per unit disadvantage
    noise_cap: float = 0.8  # upper bound on the noise sd
    level_spread: float = 0.3  # idiosyncratic log-level sd
    daily_amplitude: float = 0.6
    ar_coef: float = 0.9
    ar_sd: float = 0.1
    t0: str = "2021-01-01T00:00:00+00:00"
    interval_minutes: int = 60
    spacing_m: float = 60.0  # typical nearest-neighbour spacing of zone centroids

    def __post_init__(self):
        Q = len(self.attributes)
        for name in ("level_loadings", "noise_loadings"):
            if len(getattr(self, name)) != Q:
                raise ValueError(f"{name} needs one entry per attribute")
        C = np.asarray(self.correlation, dtype=np.float64)
        if C.shape != (Q, Q):
            raise ValueError("correlation must be Q x Q")
        if np.linalg.eigvalsh(C).min() <= 0:
            raise ValueError("correlation matrix must be positive definite")
        if self.n_nodes < 5 or self.n_steps < 48:
            raise ValueError("need at least 5 nodes and 48 steps")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attributes"] = list(self.attributes)
        d["correlation"] = [list(r) for r in self.correlation]
        d["level_loadings"] = list(self.level_loadings)
        d["noise_loadings"] = list(self.noise_loadings)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("attributes", "level_loadings", "noise_loadings"):
            if key in d:
                d[key] = tuple(d[key])
        if "correlation" in d:
            d["correlation"] = tuple(tuple(r) for r in d["correlation"])
        return cls(**d)


@dataclass
class SyntheticCity:
    spec: SyntheticSpec
    tensor: DemandTensor
    table: ProtectedAttributeTable
    disadvantage: np.ndarray  # (N, Q) oriented standard-normal scores
    noise_sd: np.ndarray  # (N,)
    level: np.ndarray  # (N,)
    expected: np.ndarray = field(repr=False)  # (N, T) noise-free intensity
    distances: np.ndarray = field(repr=False)  # (N, N) centroid distances in meters


def generate(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticCity:
    rng = np.random.default_rng(spec.seed)
    N, T, Q = spec.n_nodes, spec.n_steps, len(spec.attributes)
    C = np.asarray(spec.correlation, dtype=np.float64)
    G = rng.standard_normal((N, Q)) @ np.linalg.cholesky(C).T
    Z = ndtr(G)
    directions = tuple(DEFAULT_DIRECTIONS.get(a, "high") for a in spec.attributes)
    sign = np.array([-1.0 if d == "high" else 1.0 for d in directions])
    S = G * sign  # high score = disadvantaged

    level = spec.base_level * np.exp(S @ np.asarray(spec.level_loadings) + spec.level_spread * rng.standard_normal(N))
    noise_sd = np.minimum(spec.noise_base * np.exp(S @ np.asarray(spec.noise_loadings)), spec.noise_cap)

    t = np.arange(T)
    phase = rng.uniform(0, 2 * np.pi, N)
    daily = 1.0 + spec.daily_amplitude * np.sin(2 * np.pi * t[None, :] / 24.0 + phase[:, None])
    eta = np.zeros((N, T))
    shocks = spec.ar_sd * rng.standard_normal((N, T))
    for k in range(1, T):
        eta[:, k] = spec.ar_coef * eta[:, k - 1] + shocks[:, k]
    expected = level[:, None] * daily * np.exp(eta)
    noise = np.exp(noise_sd[:, None] * rng.standard_normal((N, T)) - 0.5 * noise_sd[:, None] ** 2)
    counts = rng.poisson(expected * noise).astype(np.float64)

    # drawn last so the demand series do not depend on the geometry settings
    xy = rng.uniform(0.0, spec.spacing_m * np.sqrt(N), size=(N, 2))
    distances = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=-1))

    node_ids = tuple(f"n{i:03d}" for i in range(N))
    t0 = datetime.fromisoformat(spec.t0).astimezone(timezone.utc)
    tensor = DemandTensor(node_ids, t0, timedelta(minutes=spec.interval_minutes), counts)
    table = ProtectedAttributeTable(node_ids, tuple(spec.attributes), Z, directions)
    return SyntheticCity(spec, tensor, table, S, noise_sd, level, expected, distances)
