import numpy as np
import pytest

from conmoe import (
    DupConfig,
    ModelSpec,
    ScopeConfig,
    assign,
    brute_force_optimal,
    budget,
    consolidate,
    distance_matrix,
    gen_synthetic,
    gen_tokens,
    objective,
    run_calibration,
    scope_partition,
    select_prototypes,
    score,
)
from conmoe.geometry import DistanceTable
from conmoe.planner import ScoreRow, ScoreTable, importance_weights
from conmoe.store import canonical_json, plan_to_dict


def table_from(values, layer=0):
    n = len(values)
    return DistanceTable(scope=[(layer, i) for i in range(n)], values=np.asarray(values, dtype=np.float64))


def score_table(scores, layer=0):
    t = ScoreTable()
    for i, s in enumerate(scores):
        t.rows[(layer, i)] = ScoreRow(0, 0, 0, 0, s)
    return t


def brute_objective(prototypes, table, weights):
    """Independent oracle: plain python double loop, no numpy mins."""
    total = 0.0
    for i, ref in enumerate(table.scope):
        best = None
        for p in prototypes:
            d = float(table.values[i][table.scope.index(p)])
            if best is None or d < best:
                best = d
        total += float(weights[i]) * best
    return total


class TestScopePartition:
    def test_even_split(self):
        assert scope_partition(8, 4) == [[0, 1, 2, 3], [4, 5, 6, 7]]

    def test_layer_local(self):
        assert scope_partition(8, 1) == [[i] for i in range(8)]

    def test_ragged_tail(self):
        assert scope_partition(10, 4) == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            scope_partition(4, 0)


class TestBudget:
    @pytest.mark.parametrize("rho,pool,want", [
        (0.25, 64, 48),
        (0.5, 64, 32),
        (0.99, 4, 1),
        (0.5, 7, 4),   # round half away from zero
        (0.0, 5, 5),
    ])
    def test_formula(self, rho, pool, want):
        assert budget(rho, pool) == want

    def test_floor_guard(self):
        assert budget(0.999, 2) == 1


class TestScore:
    def test_product_of_normalized(self, small_model, small_stats):
        refs = [(0, i) for i in range(small_model.spec.num_experts)]
        table = distance_matrix(small_model, refs)
        scores = score(small_stats, table)
        for ref, row in scores.rows.items():
            assert 0.0 <= row.contribution_norm <= 1.0
            assert 0.0 <= row.replaceability_norm <= 1.0
            assert row.score == pytest.approx(row.contribution_norm * row.replaceability_norm)

    def test_all_equal_contributions_zero_scores(self, small_model):
        from conmoe.calibration import CalibStats, ExpertStats

        refs = [(0, i) for i in range(small_model.spec.num_experts)]
        stats = CalibStats(
            token_total=4, top_k=2,
            records={r: ExpertStats(routed_count=1, sum_weighted_norm=2.0, topk_count=1)
                     for r in small_model.slots()},
        )
        table = distance_matrix(small_model, refs)
        scores = score(stats, table)
        assert all(row.score == 0.0 for row in scores.rows.values())

    def test_scale_invariance_of_selection(self, small_model, small_stats):
        refs = [(0, i) for i in range(small_model.spec.num_experts)]
        table = distance_matrix(small_model, refs)
        base = score(small_stats, table)
        scaled_stats = run_scaled(small_stats, 3.5)
        scaled = score(scaled_stats, table)
        for k in (2, 4, 6):
            a = select_prototypes(base, small_stats, table, k, "adaptive")
            b = select_prototypes(scaled, scaled_stats, table, k, "adaptive")
            assert a == b


def run_scaled(stats, factor):
    from conmoe.calibration import CalibStats, ExpertStats

    return CalibStats(
        token_total=stats.token_total,
        top_k=stats.top_k,
        records={
            ref: ExpertStats(rec.routed_count, rec.sum_weighted_norm * factor, rec.topk_count)
            for ref, rec in stats.records.items()
        },
    )


class TestSelectPrototypes:
    def test_adaptive_tie_break(self):
        scores = score_table([0.9, 0.1, 0.5, 0.5])
        table = table_from(np.zeros((4, 4)))
        got = select_prototypes(scores, None, table, 2, "adaptive")
        assert got == [(0, 0), (0, 2)]

    def test_usage_topk(self, small_model):
        from conmoe.calibration import CalibStats, ExpertStats

        counts = [5, 3, 1, 0]
        stats = CalibStats(
            token_total=9, top_k=1,
            records={(0, i): ExpertStats(c, float(c), c) for i, c in enumerate(counts)},
        )
        table = table_from(np.zeros((4, 4)))
        got = select_prototypes(score_table([0, 0, 0, 0]), stats, table, 2, "usage_topk")
        assert got == [(0, 0), (0, 1)]

    def test_fixed_k_equal_per_layer(self, small_stats, small_model):
        refs = [(l, i) for l in (0, 1) for i in range(4)]
        table = distance_matrix(small_model, refs)
        scores = score(small_stats, table)
        got = select_prototypes(scores, small_stats, table, 4, "fixed_k", layers=[0, 1])
        assert sum(1 for r in got if r[0] == 0) == 2
        assert sum(1 for r in got if r[0] == 1) == 2

    def test_fixed_k_remainder_to_earliest(self, small_stats, small_model):
        refs = [(l, i) for l in (0, 1) for i in range(4)]
        table = distance_matrix(small_model, refs)
        scores = score(small_stats, table)
        got = select_prototypes(scores, small_stats, table, 5, "fixed_k", layers=[0, 1])
        assert sum(1 for r in got if r[0] == 0) == 3
        assert sum(1 for r in got if r[0] == 1) == 2

    def test_budget_exceeds_pool(self):
        with pytest.raises(ValueError):
            select_prototypes(score_table([1.0, 0.5]), None, table_from(np.zeros((2, 2))), 3, "adaptive")


class TestAssign:
    def test_nearest(self):
        table = table_from([[0.0, 0.2, 0.7], [0.2, 0.0, 0.9], [0.7, 0.9, 0.0]])
        m = assign([(0, 1), (0, 2)], table)
        assert m[(0, 0)] == (0, 1)

    def test_prototype_maps_to_itself(self, small_model):
        refs = [(0, i) for i in range(small_model.spec.num_experts)]
        table = distance_matrix(small_model, refs)
        protos = [(0, 0), (0, 3), (0, 5)]
        m = assign(protos, table)
        for p in protos:
            assert m[p] == p

    def test_equidistant_tie_break(self):
        table = table_from([[0.0, 0.5, 0.5], [0.5, 0.0, 1.0], [0.5, 1.0, 0.0]])
        m = assign([(0, 1), (0, 2)], table)
        assert m[(0, 0)] == (0, 1)


class TestConsolidate:
    def test_rho_zero_is_identity(self, small_model, small_stats):
        plan = consolidate(small_model, small_stats, ScopeConfig(rho=0.0))
        assert all(plan.assignment[r] == r for r in plan.assignment)
        for scope in plan.scopes:
            n = small_model.spec.num_experts
            assert len(scope.prototypes) == len(scope.layers) * n

    def test_duplicate_pairs_map_at_zero_distance(self):
        spec = ModelSpec(2, 8, 16, 24, 2)
        model, dup_map = gen_synthetic(spec, seed=13, dup=DupConfig("within"))
        tokens = gen_tokens(32, spec.hidden_dim, seed=5)
        stats = run_calibration(model, tokens)
        plan = consolidate(model, stats, ScopeConfig(rho=0.5, scope_size=1))
        for l in range(spec.num_layers):
            refs = [(l, i) for i in range(spec.num_experts)]
            table = distance_matrix(model, refs)
            protos = set(plan.scopes[l].prototypes)
            for ref in refs:
                if ref not in protos:
                    assert table.distance(ref, plan.assignment[ref]) == 0.0

    def test_plan_bytes_deterministic(self, small_model, small_stats):
        a = consolidate(small_model, small_stats, ScopeConfig(rho=0.5, scope_size=2))
        b = consolidate(small_model, small_stats, ScopeConfig(rho=0.5, scope_size=2))
        assert canonical_json(plan_to_dict(a)) == canonical_json(plan_to_dict(b))

    def test_sigma1_adaptive_equals_fixed_k(self, small_model, small_stats):
        a = consolidate(small_model, small_stats, ScopeConfig(rho=0.5, scope_size=1, policy="adaptive"))
        b = consolidate(small_model, small_stats, ScopeConfig(rho=0.5, scope_size=1, policy="fixed_k"))
        assert a.assignment == b.assignment
        assert [s.prototypes for s in a.scopes] == [s.prototypes for s in b.scopes]

    def test_assignment_optimality(self, small_model, small_stats):
        plan = consolidate(small_model, small_stats, ScopeConfig(rho=0.5, scope_size=2))
        for scope in plan.scopes:
            refs = [(l, i) for l in scope.layers for i in range(small_model.spec.num_experts)]
            table = distance_matrix(small_model, refs)
            for ref in refs:
                best = min(table.distance(ref, p) for p in scope.prototypes)
                assert table.distance(ref, plan.assignment[ref]) == best


class TestObjective:
    def test_full_scope_is_zero(self, small_model, small_stats):
        refs = [(0, i) for i in range(4)]
        table = distance_matrix(small_model, refs)
        w = np.ones(4)
        assert objective(refs, table, w) == 0.0

    def test_two_expert_scope(self):
        table = table_from([[0.0, 0.6], [0.6, 0.0]])
        assert objective([(0, 0)], table, np.ones(2)) == pytest.approx(0.6)

    def test_matches_independent_oracle(self, rng):
        for _ in range(20):
            n = int(rng.integers(3, 8))
            sym = rng.random((n, n))
            vals = (sym + sym.T) / 2
            np.fill_diagonal(vals, 0.0)
            table = table_from(vals)
            w = rng.random(n)
            k = int(rng.integers(1, n))
            protos = [table.scope[i] for i in sorted(rng.choice(n, size=k, replace=False))]
            got = objective(protos, table, w)
            want = brute_objective(protos, table, w)
            assert got == pytest.approx(want, rel=1e-10, abs=1e-14)

    def test_empty_prototypes_rejected(self):
        with pytest.raises(ValueError):
            objective([], table_from(np.zeros((2, 2))), np.ones(2))


class TestBruteForceOptimal:
    def test_full_budget_zero(self, rng):
        vals = rng.random((4, 4))
        vals = (vals + vals.T) / 2
        np.fill_diagonal(vals, 0.0)
        table = table_from(vals)
        _, best = brute_force_optimal(table, 4, np.ones(4))
        assert best == 0.0

    def test_duplicates_plus_distant(self):
        # experts 0 and 1 are exact duplicates; expert 2 is far from both
        vals = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
        table = table_from(vals)
        protos, best = brute_force_optimal(table, 2, np.ones(3))
        assert (0, 2) in protos
        assert best == 0.0
        assert protos == [(0, 0), (0, 2)]  # lexicographic tie rule

    def test_planner_never_beats_oracle(self, small_model, small_stats):
        refs = [(0, i) for i in range(small_model.spec.num_experts)]
        table = distance_matrix(small_model, refs)
        scores = score(small_stats, table)
        w = importance_weights(small_stats, refs)
        for k in (1, 2, 4):
            protos = select_prototypes(scores, small_stats, table, k, "adaptive")
            _, best = brute_force_optimal(table, k, w)
            assert objective(protos, table, w) >= best - 1e-12

    def test_monotone_in_budget(self, small_model, small_stats):
        refs = [(0, i) for i in range(6)]
        table = distance_matrix(small_model, refs)
        w = np.ones(len(refs))
        values = [brute_force_optimal(table, k, w)[1] for k in range(1, 7)]
        assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))

    def test_cap(self):
        table = table_from(np.zeros((30, 30)))
        with pytest.raises(ValueError, match="cap"):
            brute_force_optimal(table, 15, np.ones(30), cap=1000)
