"""Normalized expert distances and scope-level geometry helpers.

Each projection distance is a norm-balanced relative Frobenius distance in
[0, 2); the expert distance averages it over the gate/up/down projections.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import ExpertWeights, MoEModel, Ref

DEFAULT_EPS = 1e-8

PROJECTIONS = ("gate", "up", "down")


def projection_distance(a: np.ndarray, b: np.ndarray, eps: float = DEFAULT_EPS) -> float:
    if a.shape != b.shape:
        raise ValueError("projection shape mismatch")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    num = 2.0 * np.linalg.norm(a64 - b64)
    den = np.linalg.norm(a64) + np.linalg.norm(b64) + 2.0 * eps
    return float(num / den)


def expert_distance(e: ExpertWeights, f: ExpertWeights, eps: float = DEFAULT_EPS) -> float:
    """Mean projection distance over gate, up, down."""
    total = 0.0
    for proj in PROJECTIONS:
        total += projection_distance(getattr(e, proj), getattr(f, proj), eps)
    return total / len(PROJECTIONS)


@dataclass
class DistanceTable:
    scope: list[Ref]          # ascending (layer, index)
    values: np.ndarray        # symmetric, zero diagonal
    eps: float = DEFAULT_EPS
    _index: dict[Ref, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {ref: i for i, ref in enumerate(self.scope)}

    def index_of(self, ref: Ref) -> int:
        try:
            return self._index[ref]
        except KeyError:
            raise ValueError(f"expert {ref} not in scope") from None

    def distance(self, a: Ref, b: Ref) -> float:
        return float(self.values[self.index_of(a), self.index_of(b)])


def distance_matrix(model: MoEModel, scope: list[Ref], eps: float = DEFAULT_EPS) -> DistanceTable:
    """Full pairwise table; each pair computed once and mirrored so the
    matrix is symmetric by construction."""
    scope = sorted(scope)
    n = len(scope)
    values = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            d = expert_distance(model.expert(scope[i]), model.expert(scope[j]), eps)
            values[i, j] = d
            values[j, i] = d
    return DistanceTable(scope=scope, values=values, eps=eps)


def replaceability(ref: Ref, table: DistanceTable) -> float:
    """Nearest-neighbor distance within the scope."""
    if len(table.scope) < 2:
        raise ValueError("replaceability undefined for a singleton scope")
    i = table.index_of(ref)
    row = np.delete(table.values[i], i)
    return float(row.min())


def nearest_neighbor(ref: Ref, table: DistanceTable) -> tuple[Ref, float]:
    """Closest other expert; ties broken by ascending (layer, index)."""
    if len(table.scope) < 2:
        raise ValueError("nearest neighbor undefined for a singleton scope")
    i = table.index_of(ref)
    best = None
    best_d = None
    for j, other in enumerate(table.scope):
        if j == i:
            continue
        d = float(table.values[i, j])
        if best_d is None or d < best_d:
            best, best_d = other, d
    return best, best_d


def minmax_norm(values, eps: float = DEFAULT_EPS) -> np.ndarray:
    """(x - min) / (max - min + eps) over the whole scope."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("minmax_norm of empty input")
    lo = values.min()
    hi = values.max()
    return (values - lo) / (hi - lo + eps)


def dump_distance_csv(table: DistanceTable, path) -> None:
    """Upper-triangle rows `ref_i, ref_j, distance` in ascending pair order."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer_i", "expert_i", "layer_j", "expert_j", "distance"])
        for i, a in enumerate(table.scope):
            for j in range(i + 1, len(table.scope)):
                b = table.scope[j]
                writer.writerow([a[0], a[1], b[0], b[1], repr(float(table.values[i, j]))])
