"""Train-free MoE expert-pool consolidation: prototype selection,
deterministic slot remapping, pruning/merging baselines, and fidelity
analysis on synthetic checkpoints."""

from .model import (
    DupConfig,
    ExpertWeights,
    MoELayer,
    MoEModel,
    ModelSpec,
    TopKSelection,
    consolidated_moe_forward,
    expert_forward,
    gen_synthetic,
    gen_tokens,
    materialize,
    model_forward,
    moe_forward,
    router_topk,
)
from .calibration import CalibStats, contribution, frequency, reap_score, run_calibration
from .geometry import (
    DistanceTable,
    distance_matrix,
    expert_distance,
    minmax_norm,
    nearest_neighbor,
    projection_distance,
    replaceability,
)
from .plan import ConsolidationPlan, Scope, identity_plan
from .planner import (
    ScopeConfig,
    ScoreTable,
    assign,
    brute_force_optimal,
    budget,
    consolidate,
    objective,
    scope_partition,
    select_prototypes,
    score,
)
from .baselines import FusedModel, fuse_weighted_average, merge_msmoe, prune_frequency, prune_reap
from .analysis import (
    FidelityReport,
    NNReport,
    cross_layer_nn,
    evaluate_fidelity,
    reduction_accounting,
    scope_sweep,
)
from .store import (
    read_checkpoint,
    read_plan,
    read_stats,
    write_checkpoint,
    write_plan,
    write_stats,
)

__version__ = "0.1.0"
