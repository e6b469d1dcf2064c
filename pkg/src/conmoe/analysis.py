"""Plan evaluation: output fidelity against the original model, logical
reduction accounting, cross-layer nearest-neighbor structure, and the
scope-size sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import DEFAULT_EPS, distance_matrix, nearest_neighbor
from .model import MoEModel, model_forward_trace
from .plan import ConsolidationPlan
from .planner import ScopeConfig, consolidate, scope_partition


@dataclass
class FidelityReport:
    per_layer_error: list[float]
    end_to_end_error: float
    token_count: int
    achieved_reduction: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_layer_error": self.per_layer_error,
            "end_to_end_error": self.end_to_end_error,
            "token_count": self.token_count,
            "achieved_reduction": self.achieved_reduction,
            "metadata": self.metadata,
        }


@dataclass
class NNReport:
    counts: list[list[int]]          # counts[source_layer][target_layer]
    per_layer_fraction: list[float]  # cross-layer fraction per source layer
    overall_fraction: float

    def to_dict(self) -> dict:
        return {
            "counts": self.counts,
            "per_layer_fraction": self.per_layer_fraction,
            "overall_fraction": self.overall_fraction,
        }


def _relative_error(got: np.ndarray, want: np.ndarray, eps: float) -> float:
    return float(np.linalg.norm(got - want) / (np.linalg.norm(want) + eps))


def evaluate_fidelity(
    model: MoEModel,
    plan: ConsolidationPlan,
    tokens: np.ndarray,
    eps: float = DEFAULT_EPS,
) -> FidelityReport:
    """Run the original and consolidated stacks side by side and average
    the relative L2 error of each layer's output and of the final state."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("tokens must be a non-empty (count, hidden) array")
    plan.validate()
    num_layers = model.spec.num_layers
    layer_err = np.zeros(num_layers)
    final_err = 0.0
    for t in range(tokens.shape[0]):
        h = tokens[t]
        orig_final, orig_outs = model_forward_trace(model, h)
        plan_final, plan_outs = model_forward_trace(model, h, plan)
        for l in range(num_layers):
            layer_err[l] += _relative_error(plan_outs[l], orig_outs[l], eps)
        final_err += _relative_error(plan_final, orig_final, eps)
    count = tokens.shape[0]
    return FidelityReport(
        per_layer_error=[float(x) / count for x in layer_err],
        end_to_end_error=final_err / count,
        token_count=count,
        achieved_reduction=reduction_accounting(plan),
        metadata={"policy": plan.policy, "rho": plan.rho, "scope_size": plan.scope_size},
    )


def reduction_accounting(plan: ConsolidationPlan) -> float:
    """1 - distinct prototypes / original slots. A prototype shared by many
    slots counts once."""
    total = len(plan.assignment)
    distinct = len(plan.distinct_prototypes())
    return 1.0 - distinct / total


def cross_layer_nn(model: MoEModel, scope_size: int, eps: float = DEFAULT_EPS) -> NNReport:
    """For each expert, find its nearest neighbor inside its scope and tally
    whether it sits in the same layer or a different one."""
    num_layers = model.spec.num_layers
    n = model.spec.num_experts
    if scope_size == 1 and n < 2:
        raise ValueError("nearest neighbor needs at least 2 candidates per scope")
    counts = [[0] * num_layers for _ in range(num_layers)]
    for layers in scope_partition(num_layers, scope_size):
        refs = [(l, i) for l in layers for i in range(n)]
        table = distance_matrix(model, refs, eps)
        for ref in refs:
            nn, _ = nearest_neighbor(ref, table)
            counts[ref[0]][nn[0]] += 1
    per_layer = [
        (sum(row) - row[l]) / sum(row)
        for l, row in enumerate(counts)
    ]
    cross_total = sum(
        sum(row) - row[l] for l, row in enumerate(counts)
    )
    return NNReport(
        counts=counts,
        per_layer_fraction=per_layer,
        overall_fraction=cross_total / (num_layers * n),
    )


def dump_nn_csvs(report: NNReport, heatmap_path, fractions_path) -> None:
    with open(heatmap_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["source_layer", "target_layer", "count"])
        for src, row in enumerate(report.counts):
            for tgt, c in enumerate(row):
                writer.writerow([src, tgt, c])
    with open(fractions_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "cross_layer_fraction"])
        for l, frac in enumerate(report.per_layer_fraction):
            writer.writerow([l, repr(frac)])
        writer.writerow(["overall", repr(report.overall_fraction)])


def scope_sweep(
    model: MoEModel,
    stats,
    rho: float,
    scope_sizes: list[int],
    tokens: np.ndarray,
    base_config: ScopeConfig | None = None,
) -> list[FidelityReport]:
    """Consolidate and evaluate at each scope size with a constant rho."""
    config = base_config or ScopeConfig(rho=rho)
    reports = []
    for size in scope_sizes:
        plan = consolidate(model, stats, replace(config, rho=rho, scope_size=size))
        reports.append(evaluate_fidelity(model, plan, tokens, config.eps))
    return reports
