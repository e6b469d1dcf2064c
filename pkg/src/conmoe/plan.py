"""Consolidation plans: prototype sets per scope plus the deterministic
slot-to-prototype reassignment map."""

from __future__ import annotations

from dataclasses import dataclass, field

Ref = tuple[int, int]

PLAN_VERSION = 1

POLICIES = (
    "identity",
    "adaptive",
    "fixed_k",
    "usage_topk",
    "reap_topk",
    "distance_only",
    "prune_frequency",
    "prune_reap",
    "merge_msmoe",
)


@dataclass
class Scope:
    layers: list[int]
    prototypes: list[Ref]  # deduplicated, ascending (layer, index)


@dataclass
class ConsolidationPlan:
    rho: float
    scope_size: int
    policy: str
    scopes: list[Scope]
    assignment: dict[Ref, Ref]
    drop_mask: set[Ref] = field(default_factory=set)
    metadata: dict = field(default_factory=dict)
    version: int = PLAN_VERSION

    def assignment_for(self, ref: Ref) -> Ref:
        try:
            return self.assignment[ref]
        except KeyError:
            raise ValueError(f"slot {ref} missing from plan") from None

    @property
    def is_pruning(self) -> bool:
        return bool(self.drop_mask)

    def scope_of(self, ref: Ref) -> Scope:
        for scope in self.scopes:
            if ref[0] in scope.layers:
                return scope
        raise ValueError(f"slot {ref} not covered by any scope")

    def slots(self) -> list[Ref]:
        return sorted(self.assignment)

    def clusters(self) -> dict[Ref, list[Ref]]:
        """Prototype-centered partition of all non-dropped slots."""
        out: dict[Ref, list[Ref]] = {}
        for scope in self.scopes:
            for p in scope.prototypes:
                out[p] = []
        for slot in self.slots():
            if slot in self.drop_mask:
                continue
            out[self.assignment[slot]].append(slot)
        return out

    def distinct_prototypes(self) -> set[Ref]:
        out: set[Ref] = set()
        for scope in self.scopes:
            out.update(scope.prototypes)
        return out

    def validate(self):
        if not (0.0 <= self.rho < 1.0):
            raise ValueError("rho must be in [0, 1)")
        if self.scope_size < 1:
            raise ValueError("scope_size must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy: {self.policy!r}")
        seen_layers: set[int] = set()
        for scope in self.scopes:
            if len(set(scope.prototypes)) != len(scope.prototypes):
                raise ValueError("duplicate prototype reference in scope")
            if sorted(scope.prototypes) != scope.prototypes:
                raise ValueError("prototypes not in canonical order")
            for p in scope.prototypes:
                if p[0] not in scope.layers:
                    raise ValueError("prototype outside its scope's layers")
            overlap = seen_layers.intersection(scope.layers)
            if overlap:
                raise ValueError(f"layers {sorted(overlap)} appear in two scopes")
            seen_layers.update(scope.layers)
        protos_by_layer = {
            p: scope for scope in self.scopes for p in scope.prototypes
        }
        for slot, target in self.assignment.items():
            if slot[0] not in seen_layers:
                raise ValueError(f"slot {slot} outside all scopes")
            if slot in self.drop_mask:
                if target != slot:
                    raise ValueError("dropped slots must map to themselves")
                continue
            scope = self.scope_of(slot)
            if target not in protos_by_layer or protos_by_layer[target] is not scope:
                raise ValueError(f"dangling assignment: {slot} -> {target}")
        for p, scope in protos_by_layer.items():
            if p not in self.drop_mask and self.assignment.get(p) != p:
                raise ValueError(f"prototype {p} does not map to itself")
        for ref in self.drop_mask:
            if ref not in self.assignment:
                raise ValueError(f"drop mask references unknown slot {ref}")


def identity_plan(num_layers: int, num_experts: int, scope_size: int = 1,
                  rho: float = 0.0, metadata: dict | None = None) -> ConsolidationPlan:
    """Every slot is its own prototype."""
    from .planner import scope_partition  # local import avoids a cycle

    scopes = []
    assignment: dict[Ref, Ref] = {}
    for layers in scope_partition(num_layers, scope_size):
        protos = [(l, i) for l in layers for i in range(num_experts)]
        scopes.append(Scope(layers=list(layers), prototypes=protos))
        for ref in protos:
            assignment[ref] = ref
    return ConsolidationPlan(
        rho=rho,
        scope_size=scope_size,
        policy="identity",
        scopes=scopes,
        assignment=assignment,
        metadata=dict(metadata or {}),
    )
