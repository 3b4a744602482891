"""Spatial graphs: thresholded Gaussian-kernel weights, binary adjacency and
the symmetric-normalized propagation matrix used by graph convolution."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_SIGMA2 = 1e4
DEFAULT_ALPHA = 0.5


class GraphInputError(ValueError):
    pass


@dataclass(frozen=True)
class WeightedAdjacency:
    node_ids: tuple[str, ...]
    W: np.ndarray
    sigma2: float
    alpha: float

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.W))


def gaussian_adjacency(
    distances,
    sigma2: float = DEFAULT_SIGMA2,
    alpha: float = DEFAULT_ALPHA,
    node_ids: Sequence[str] | None = None,
    unit_scale: float = 1.0,
) -> WeightedAdjacency:
    """w_ij = exp(-d_ij^2 / sigma2) when i != j and the kernel is at least ``alpha``, else 0.

    ``unit_scale`` converts the supplied distances into the unit ``sigma2`` is
    expressed in (1.0 keeps them as given).
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise GraphInputError(f"distance matrix must be square, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise GraphInputError("distance matrix has non-finite entries")
    if np.any(d < 0):
        raise GraphInputError("distances must be nonnegative")
    if not sigma2 > 0:
        raise GraphInputError("sigma2 must be positive")
    if not 0.0 <= alpha < 1.0:
        raise GraphInputError("alpha must lie in [0, 1)")
    if unit_scale != 1.0:
        d = d * unit_scale
    kernel = np.exp(-(d * d) / sigma2)
    W = np.where(kernel >= alpha, kernel, 0.0)
    np.fill_diagonal(W, 0.0)
    ids = tuple(node_ids) if node_ids is not None else tuple(str(i) for i in range(d.shape[0]))
    if len(ids) != d.shape[0]:
        raise GraphInputError("node_ids length does not match the distance matrix")
    return WeightedAdjacency(ids, W, float(sigma2), float(alpha))


def binary_adjacency(neighbor_pairs: Iterable[tuple[int, int]], n_nodes: int) -> np.ndarray:
    A = np.zeros((n_nodes, n_nodes))
    for i, j in neighbor_pairs:
        i, j = int(i), int(j)
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise GraphInputError(f"pair ({i}, {j}) out of range for {n_nodes} nodes")
        if i == j:
            log.warning("ignoring self-pair (%d, %d)", i, j)
            continue
        A[i, j] = A[j, i] = 1.0
    return A


def propagation_matrix(A) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise GraphInputError("adjacency must be square")
    A_tilde = A + np.eye(A.shape[0])
    inv_sqrt = 1.0 / np.sqrt(A_tilde.sum(axis=1))
    P = inv_sqrt[:, None] * A_tilde * inv_sqrt[None, :]
    return (P + P.T) / 2.0


def read_distance_csv(path: str | Path) -> tuple[tuple[str, ...], np.ndarray]:
    """N x N matrix with a header row of zone ids; rows follow the header order."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise GraphInputError(f"{path}: empty distance file")
    ids = tuple(c.strip() for c in rows[0])
    body = [r for r in rows[1:] if r]
    if len(body) != len(ids):
        raise GraphInputError(f"{path}: {len(body)} rows for {len(ids)} zone ids")
    try:
        D = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise GraphInputError(f"{path}: {exc}") from None
    if D.shape != (len(ids), len(ids)):
        raise GraphInputError(f"{path}: distance matrix is not {len(ids)}x{len(ids)}")
    return ids, D


def read_pair_csv(path: str | Path, node_ids: Sequence[str]) -> np.ndarray:
    """``zone_a,zone_b`` rows to a binary adjacency in ``node_ids`` order; unknown zones are skipped."""
    index = {z: i for i, z in enumerate(node_ids)}
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"zone_a", "zone_b"} <= set(reader.fieldnames):
            raise GraphInputError(f"{path}: expected columns zone_a,zone_b")
        for row in reader:
            a, b = row["zone_a"].strip(), row["zone_b"].strip()
            if a in index and b in index:
                pairs.append((index[a], index[b]))
            else:
                log.warning("pair (%s, %s) references a zone outside the node set", a, b)
    return binary_adjacency(pairs, len(node_ids))


def align_matrix(ids: Sequence[str], M: np.ndarray, node_ids: Sequence[str]) -> np.ndarray:
    """Reorder a square matrix keyed by ``ids`` to ``node_ids`` order."""
    index = {z: i for i, z in enumerate(ids)}
    missing = [z for z in node_ids if z not in index]
    if missing:
        raise GraphInputError(f"matrix lacks zones {missing[:5]}")
    order = [index[z] for z in node_ids]
    return M[np.ix_(order, order)]
