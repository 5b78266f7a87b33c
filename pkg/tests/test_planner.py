import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radiomap import planner as P, scenes
from radiomap.errors import ConflictError, DomainError
from radiomap.partition import partition_scene
from radiomap.scene import OccupancyGrid


def _euclid(m, seed=0):
    pts = np.random.default_rng(seed).uniform(0, 20, (m, 2))
    return np.linalg.norm(pts[:, None] - pts[None], axis=2)


def _all_pairs(m):
    return {(i, j) for i in range(m) for j in range(i + 1, m)}


def _brute_assign(a, b, travel):
    return min(sum(travel[a[p], b[q]] for p, q in enumerate(perm))
               for perm in itertools.permutations(range(len(a))))


class TestMatrix:
    def test_init(self):
        assert P.init_matrix(2).to_json() == [[1, 0], [0, 1]]
        assert len(P.init_matrix(3).pending()) == 3
        assert P.init_matrix(22).count(0) == 231

    def test_init_too_small(self):
        with pytest.raises(DomainError):
            P.init_matrix(1)

    def test_mark(self):
        m = P.mark(P.init_matrix(3), (0, 1), 1)
        assert m.state[0, 1] == m.state[1, 0] == 1
        assert P.mark(m, (1, 0), 1) == m

    def test_mark_diagonal(self):
        with pytest.raises(DomainError):
            P.mark(P.init_matrix(3), (1, 1), 1)

    def test_terminal_conflict(self):
        m = P.mark(P.init_matrix(3), (0, 1), -1)
        with pytest.raises(ConflictError):
            P.mark(m, (0, 1), 1)

    def test_rejects_asymmetric(self):
        s = np.eye(3, dtype=np.int8)
        s[0, 1] = 1
        with pytest.raises(DomainError):
            P.CollectionMatrix(s)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.sampled_from([1, -1])), max_size=30))
    def test_mark_sequence_keeps_invariants(self, ops):
        m = P.init_matrix(6)
        for i, j, v in ops:
            before = m.state.copy()
            try:
                m = P.mark(m, (i, j), v)
            except (DomainError, ConflictError):
                np.testing.assert_array_equal(m.state, before)
                continue
            assert np.array_equal(m.state, m.state.T)
            assert np.all(np.diag(m.state) == 1)
            # terminal entries never change
            term = before != 0
            np.testing.assert_array_equal(m.state[term], before[term])


class TestPairs:
    def test_examples(self):
        assert P.pairs_of((0, 1)) == {(0, 1)}
        assert P.pairs_of((2, 5, 7)) == {(2, 5), (2, 7), (5, 7)}
        assert len(P.pairs_of(tuple(range(9)))) == 36
        assert P.pairs_of((7, 2)) == {(2, 7)}


class TestSetCover:
    def test_m4_n3_needs_three(self):
        cfgs = P.greedy_set_cover(_all_pairs(4), 4, 3)
        assert len(cfgs) == 3
        # brute force confirms no two 3-subsets cover all 6 pairs
        subsets = list(itertools.combinations(range(4), 3))
        assert not any(P.pairs_of(a) | P.pairs_of(b) == _all_pairs(4) for a in subsets for b in subsets)

    def test_m22_n9(self):
        cfgs = P.greedy_set_cover(_all_pairs(22), 22, 9)
        assert 7 <= len(cfgs) <= 13
        assert set().union(*map(P.pairs_of, cfgs)) >= _all_pairs(22)

    def test_single_pair(self):
        assert P.greedy_set_cover({(0, 1)}, 5, 2) == [(0, 1)]

    def test_spec_growth_order(self):
        # region 2 touches most pairs, then ties go to the lowest id
        U = {(0, 2), (1, 2), (2, 3), (0, 1)}
        assert P.greedy_set_cover(U, 4, 3)[0] == (0, 1, 2)

    def test_bad_id(self):
        with pytest.raises(DomainError):
            P.greedy_set_cover({(0, 7)}, 5, 3)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 14).flatmap(lambda m: st.tuples(
        st.just(m), st.integers(2, m),
        st.sets(st.tuples(st.integers(0, m - 1), st.integers(0, m - 1)).filter(lambda p: p[0] < p[1]))),
    ), st.booleans())
    def test_cover_properties(self, inst, multi):
        m, n, U = inst
        cfgs = P.greedy_set_cover(U, m, n, multi_start=multi, rng=np.random.default_rng(0) if multi else None)
        got = set().union(*map(P.pairs_of, cfgs)) if cfgs else set()
        assert got >= U
        assert all(len(set(c)) == n for c in cfgs)
        assert len(cfgs) >= math.ceil(len(U) / math.comb(n, 2))

    def test_prune_keeps_cover(self):
        cfgs = [(0, 1, 2), (0, 1, 3), (2, 3, 4), (0, 1, 2)]
        U = {(0, 1), (0, 2), (1, 3), (2, 4)}
        kept = P.prune_redundant(cfgs, U)
        assert len(kept) < len(cfgs)
        assert set().union(*map(P.pairs_of, kept)) >= U


class TestTransitionCost:
    def test_identity(self):
        t = _euclid(5)
        cost, cfg = P.transition_cost((0, 1, 2), (0, 1, 2), t)
        assert cost == 0 and cfg == (0, 1, 2)

    def test_two_robot_example(self):
        t = np.zeros((4, 4))
        t[0, 2], t[0, 3], t[1, 2], t[1, 3] = 1, 2, 2, 1
        t = t + t.T
        cost, cfg = P.transition_cost((0, 1), (2, 3), t)
        assert cost == 2 and cfg == (2, 3)
        cost, cfg = P.transition_cost((0, 1), (3, 2), t)
        assert cost == 2 and cfg == (2, 3)

    def test_size_mismatch(self):
        with pytest.raises(DomainError):
            P.transition_cost((0, 1), (0, 1, 2), _euclid(4))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, 10, (12, 12))
        t = (t + t.T) / 2
        np.fill_diagonal(t, 0)
        a = tuple(rng.choice(12, 6, replace=False))
        b = tuple(rng.choice(12, 6, replace=False))
        cost, cfg = P.transition_cost(a, b, t)
        assert cost == pytest.approx(_brute_assign(a, b, t), abs=1e-9)
        assert sorted(cfg) == sorted(b)
        assert sum(t[x, y] for x, y in zip(a, cfg)) == pytest.approx(cost)


class TestTsp:
    def test_single_config(self):
        t = _euclid(6)
        plan = P.order_configs_tsp([(3, 4)], (0, 1), t)
        assert plan.n_configs == 1
        assert plan.total_cost == pytest.approx(P.transition_cost((0, 1), (3, 4), t)[0])

    @pytest.mark.parametrize("seed", range(4))
    def test_small_instances_optimal(self, seed):
        t = _euclid(10, seed)
        rng = np.random.default_rng(seed)
        cfgs = []
        while len(cfgs) < 3:
            c = tuple(sorted(int(x) for x in rng.choice(10, 3, replace=False)))
            if c not in cfgs and c != (0, 1, 2):
                cfgs.append(c)
        start = (0, 1, 2)
        plan = P.order_configs_tsp(cfgs, start, t)
        best = math.inf
        for perm in itertools.permutations(cfgs):
            cur, total = start, 0.0
            for c in perm:
                cost, cur = P.transition_cost(cur, c, t)
                total += cost
            best = min(best, total)
        assert plan.total_cost == pytest.approx(best, abs=1e-9)
        assert sorted(map(sorted, plan.configs)) == sorted(map(sorted, cfgs))

    def test_three_configs_path_metric(self):
        t = np.abs(np.subtract.outer(np.arange(8.0), np.arange(8.0)))
        cfgs = [(6, 7), (2, 3), (4, 5)]
        plan = P.order_configs_tsp(cfgs, (0, 1), t)
        assert [tuple(sorted(c)) for c in plan.configs] == [(2, 3), (4, 5), (6, 7)]
        assert plan.total_cost == pytest.approx(12.0)

    def test_two_opt_never_worse_than_nn(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pts = rng.uniform(0, 1, (12, 2))
            d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
            nn = P.nearest_neighbor_path(d)
            opt = P.two_opt(d, nn)
            assert P._path_cost(d, opt) <= P._path_cost(d, nn) + 1e-12
            assert opt[0] == 0 and sorted(opt) == list(range(12))


class TestPlans:
    def test_two_robots_m3(self):
        t = _euclid(3)
        plan = P.plan_two_robots(P.init_matrix(3), (0, 1), t)
        assert plan.n_configs == 3
        assert plan.covered_pairs == _all_pairs(3)

    def test_two_robots_m2(self):
        plan = P.plan_two_robots(P.init_matrix(2), (0, 1), _euclid(2))
        assert plan.configs == [(0, 1)] and plan.total_cost == 0

    def test_two_robots_partial(self):
        m = P.mark(P.init_matrix(3), (0, 1), 1)
        plan = P.plan_two_robots(m, (0, 1), _euclid(3))
        assert {tuple(sorted(c)) for c in plan.configs} == {(0, 2), (1, 2)}

    def test_two_robots_no_zeros(self):
        m = P.mark(P.init_matrix(2), (0, 1), 1)
        assert P.plan_two_robots(m, (0, 1), _euclid(2)).is_empty()

    def test_multi_m4(self):
        plan = P.plan_multi(P.init_matrix(4), 3, (0, 1, 2), _euclid(4))
        assert plan.n_configs == 3
        assert plan.covered_pairs >= _all_pairs(4)

    def test_multi_m22_n15(self):
        plan = P.plan_multi(P.init_matrix(22), 15, tuple(range(15)), _euclid(22), restarts=2)
        assert 3 <= plan.n_configs <= 5
        assert plan.covered_pairs >= _all_pairs(22)

    def test_multi_empty(self):
        m = P.init_matrix(4)
        for p in _all_pairs(4):
            m = P.mark(m, p, 1)
        assert P.plan_multi(m, 3, (0, 1, 2), _euclid(4)).is_empty()

    def test_multi_costs_consistent(self):
        t = _euclid(10, 2)
        plan = P.plan_multi(P.init_matrix(10), 4, (0, 1, 2, 3), t, restarts=3)
        cur = plan.start
        for cfg, cost in zip(plan.configs, plan.costs):
            assert cost == pytest.approx(sum(t[a, b] for a, b in zip(cur, cfg)))
            assert sorted(cfg) != sorted(cur) or cost == 0
            cur = cfg
        assert plan.total_cost == pytest.approx(sum(plan.costs))
        assert plan.n_configs >= math.ceil(45 / 6)

    def test_replan_skips_failed_pair(self):
        m = P.init_matrix(4)
        m = P.mark(m, (2, 3), -1)
        plan = P.replan_on_failure(m, (0, 1, 2), 3, _euclid(4))
        assert plan.n_configs == 2
        assert plan.covered_pairs >= m.pending()

    def test_replan_all_failed(self):
        m = P.init_matrix(4)
        for p in _all_pairs(4):
            m = P.mark(m, p, -1)
        assert P.replan_on_failure(m, (0, 1, 2), 3, _euclid(4)).is_empty()

    def test_plan_json_round_trip(self, tmp_path):
        plan = P.plan_multi(P.init_matrix(6), 3, (0, 1, 2), _euclid(6), restarts=1)
        plan.save(tmp_path / "plan.json")
        back = P.Plan.load(tmp_path / "plan.json")
        assert back.configs == plan.configs
        assert back.costs == pytest.approx(plan.costs)


class TestBaseline:
    def test_m4(self):
        t = _euclid(4)
        base = P.baseline_greedy(P.init_matrix(4), 3, (0, 1, 2), t)
        multi = P.plan_multi(P.init_matrix(4), 3, (0, 1, 2), t)
        assert base.n_configs >= 3
        assert base.n_configs >= multi.n_configs
        assert base.covered_pairs >= _all_pairs(4)

    def test_single_remaining(self):
        m = P.init_matrix(4)
        for p in _all_pairs(4) - {(1, 3)}:
            m = P.mark(m, p, 1)
        base = P.baseline_greedy(m, 3, (0, 1, 2), _euclid(4))
        assert base.n_configs == 1 and (1, 3) in base.covered_pairs

    def test_coverage_first_then_cheapest(self):
        t = _euclid(6, 5)
        m = P.init_matrix(6)
        base = P.baseline_greedy(m, 3, (0, 1, 2), t)
        first = base.configs[0]
        # first step must cover 3 new pairs, and be the cheapest such move
        full = [c for c in itertools.combinations(range(6), 3)]
        best = min(P.transition_cost((0, 1, 2), c, t)[0] for c in full if len(P.pairs_of(c) & m.pending()) == 3)
        assert len(P.pairs_of(first) & m.pending()) == 3
        assert base.costs[0] == pytest.approx(best)

    def test_cap_truncation_noted(self):
        base = P.baseline_greedy(P.init_matrix(8), 3, (0, 1, 2), _euclid(8), candidate_cap=10)
        assert any("truncated" in n for n in base.notes)

    def test_cost_objective(self):
        t = _euclid(7, 1)
        base = P.baseline_greedy(P.init_matrix(7), 3, (0, 1, 2), t, objective="cost")
        assert base.covered_pairs >= _all_pairs(7)


class TestTravel:
    def _open_grid(self):
        return OccupancyGrid(np.zeros((40, 12, 8), dtype=bool), 0.25, np.zeros(3))

    def test_straight_line(self):
        g = self._open_grid()
        d = P.shortest_path_lengths(g, [np.array([1.125, 1.125, 1.125])], [np.array([6.125, 1.125, 1.125])])
        assert 5.0 - 1e-9 <= d[0, 0] <= 5.0 + math.sqrt(3) * 0.25

    def test_walled_off(self):
        occ = np.zeros((40, 12, 8), dtype=bool)
        occ[20] = True
        g = OccupancyGrid(occ, 0.25, np.zeros(3))
        d = P.shortest_path_lengths(g, [np.array([1.0, 1.0, 1.0])], [np.array([9.0, 1.0, 1.0])])
        assert d[0, 0] == P.UNREACHABLE

    def test_matrix_properties(self, two_rooms):
        g = scenes.two_rooms(door=(2.0, 3.0))
        part = partition_scene(g)
        t = P.travel_cost_matrix(part, g)
        assert np.allclose(t, t.T)
        assert np.all(np.diag(t) == 0)
        assert np.all(t[~np.eye(part.m, dtype=bool)] > 0)
        sealed = P.travel_cost_matrix(partition_scene(two_rooms), two_rooms)
        assert (sealed == P.UNREACHABLE).any()
