"""Data-collection planning over a partitioned scene.

The collection state matrix tracks which region pairs still need
measurements. A plan is an ordered list of team configurations (which
region each robot occupies); consecutive configurations are linked by an
optimal robot-to-region assignment.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import ConflictError, DomainError

log = logging.getLogger(__name__)

UNREACHABLE = 1e9
"""Travel-cost sentinel for region pairs with no free-space path (meters)."""

Config = tuple[int, ...]
Pair = tuple[int, int]


def canon(i: int, j: int) -> Pair:
    return (i, j) if i < j else (j, i)


# -- collection state ------------------------------------------------------

class CollectionMatrix:
    """Symmetric {-1, 0, 1} region x region state with a unit diagonal."""

    def __init__(self, state: NDArray[np.int8]):
        state = np.asarray(state, dtype=np.int8)
        if state.ndim != 2 or state.shape[0] != state.shape[1]:
            raise DomainError(f"collection matrix must be square, got {state.shape}")
        if not np.array_equal(state, state.T):
            raise DomainError("collection matrix must be symmetric")
        if not np.all(np.diag(state) == 1):
            raise DomainError("collection matrix diagonal must be 1")
        if not np.all(np.isin(state, (-1, 0, 1))):
            raise DomainError("collection matrix entries must be in {-1, 0, 1}")
        self.state = state

    @property
    def m(self) -> int:
        return self.state.shape[0]

    def pending(self) -> set[Pair]:
        i, j = np.nonzero(np.triu(self.state == 0, k=1))
        return {(int(a), int(b)) for a, b in zip(i, j)}

    def count(self, value: int) -> int:
        return int(np.triu(self.state == value, k=1).sum())

    def copy(self) -> "CollectionMatrix":
        return CollectionMatrix(self.state.copy())

    def __eq__(self, other):
        return isinstance(other, CollectionMatrix) and np.array_equal(self.state, other.state)

    def to_json(self) -> list[list[int]]:
        return self.state.astype(int).tolist()

    @classmethod
    def from_json(cls, data) -> "CollectionMatrix":
        return cls(np.asarray(data, dtype=np.int8))


def init_matrix(m: int) -> CollectionMatrix:
    if m < 2:
        raise DomainError(f"need at least 2 regions, got {m}")
    return CollectionMatrix(np.eye(m, dtype=np.int8))


def mark(matrix: CollectionMatrix, pair: Pair, value: int) -> CollectionMatrix:
    """Set a pair's state to 1 (collected) or -1 (infeasible); returns a new matrix.

    Terminal states never revert; re-marking with the same value is a no-op.
    """
    i, j = int(pair[0]), int(pair[1])
    if value not in (1, -1):
        raise DomainError(f"mark value must be 1 or -1, got {value}")
    if i == j:
        raise DomainError(f"cannot mark diagonal entry ({i}, {j})")
    if not (0 <= i < matrix.m and 0 <= j < matrix.m):
        raise DomainError(f"pair ({i}, {j}) out of range for m={matrix.m}")
    cur = int(matrix.state[i, j])
    if cur != 0 and cur != value:
        raise ConflictError(f"pair ({i}, {j}) is already terminal ({cur}), cannot set {value}")
    out = matrix.state.copy()
    out[i, j] = out[j, i] = value
    return CollectionMatrix(out)


def pairs_of(config: Sequence[int]) -> set[Pair]:
    return {canon(a, b) for a, b in itertools.combinations(config, 2)}


# -- set cover -------------------------------------------------------------

def _best_growth(remaining: NDArray[np.int64], n: int, rng=None) -> list[int]:
    """Grow one configuration from every pending seed pair at once; return the best."""
    m = remaining.shape[0]
    si, sj = np.nonzero(np.triu(remaining, k=1))
    S = len(si)
    rows = np.arange(S)
    chosen = np.empty((S, n), dtype=np.int64)
    chosen[:, 0], chosen[:, 1] = si, sj
    in_set = np.zeros((S, m), dtype=bool)
    in_set[rows, si] = in_set[rows, sj] = True
    gain = remaining[si] + remaining[sj]
    covered = remaining[si, sj].astype(np.float64)
    for step in range(2, n):
        g = np.where(in_set, -1.0, gain.astype(np.float64))
        if rng is not None:
            g = g + rng.random(g.shape) * 0.5  # integer gains: noise only breaks ties
        r = np.argmax(g, axis=1)
        covered += gain[rows, r]
        chosen[:, step] = r
        in_set[rows, r] = True
        gain += remaining[r]
    if rng is not None:
        covered = covered + rng.random(S) * 0.5
    return [int(x) for x in chosen[int(np.argmax(covered))]]


def _single_growth(remaining: NDArray[np.int64], n: int) -> list[int]:
    chosen = [int(np.argmax(remaining.sum(axis=1)))]
    in_set = np.zeros(remaining.shape[0], dtype=bool)
    in_set[chosen[0]] = True
    gain = remaining[:, chosen[0]].copy()
    while len(chosen) < n:
        r = int(np.argmax(np.where(in_set, -1, gain)))
        chosen.append(r)
        in_set[r] = True
        gain += remaining[:, r]
    return chosen


def greedy_set_cover(U: Iterable[Pair], m: int, n: int, multi_start: bool = False,
                     rng=None) -> list[Config]:
    """Configurations of ``n`` regions whose pairs jointly cover ``U``.

    Each configuration is grown region by region, always adding the region
    that covers the most new pairs with those already chosen (ties -> lowest
    id). By default growth starts from the region incident to most uncovered
    pairs. With ``multi_start`` every uncovered pair is tried as a seed, the
    best-covering growth wins, ties are broken at random when ``rng`` is
    given, and configurations made redundant by later ones are dropped.
    """
    if n < 2 or n > m:
        raise DomainError(f"need 2 <= n <= m, got n={n}, m={m}")
    remaining = np.zeros((m, m), dtype=np.int64)
    U = list(U)
    for i, j in U:
        if not (0 <= i < m and 0 <= j < m) or i == j:
            raise DomainError(f"pair ({i}, {j}) is not a valid pair for m={m}")
        remaining[i, j] = remaining[j, i] = 1
    configs: list[Config] = []
    while remaining.any():
        best = _best_growth(remaining, n, rng) if multi_start else _single_growth(remaining, n)
        idx = np.array(best)
        remaining[np.ix_(idx, idx)] = 0
        configs.append(tuple(sorted(best)))
    return prune_redundant(configs, U) if multi_start else configs


def _pair_counts(configs: Sequence[Config], U: Iterable[Pair]) -> dict[Pair, int]:
    cnt = {canon(*p): 0 for p in U}
    for c in configs:
        for p in pairs_of(c):
            if p in cnt:
                cnt[p] += 1
    return cnt


def prune_redundant(configs: Sequence[Config], U: Iterable[Pair]) -> list[Config]:
    """Drop configurations whose target pairs are all covered elsewhere (last first)."""
    U = list(U)
    cnt = _pair_counts(configs, U)
    keep = list(configs)
    for k in range(len(keep) - 1, -1, -1):
        mine = [p for p in pairs_of(keep[k]) if p in cnt]
        if all(cnt[p] > 1 for p in mine):
            for p in mine:
                cnt[p] -= 1
            del keep[k]
    return keep


# -- assignment ------------------------------------------------------------

def hungarian(cost: NDArray[np.float64]) -> tuple[float, list[int]]:
    """Minimum-cost perfect matching on a square matrix.

    Returns ``(total, cols)`` with ``cols[row]`` the column matched to each row.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DomainError(f"cost matrix must be square, got {c.shape}")
    if c.shape[0] == 0:
        return 0.0, []
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].sum()), [int(j) for j in cols]


def transition_cost(a: Sequence[int], b: Sequence[int],
                    travel: NDArray[np.float64]) -> tuple[float, Config]:
    """Cheapest way to move the team from ``a`` to the regions of ``b``.

    ``a`` is robot-ordered (robot p stands in ``a[p]``). Returns the total
    travel and the robot-ordered target configuration.
    """
    if len(a) != len(b):
        raise DomainError(f"configuration sizes differ: {len(a)} vs {len(b)}")
    if sorted(a) == sorted(b):
        return 0.0, tuple(a)
    travel = np.asarray(travel)
    if len(a) == 2:
        s = travel[a[0], b[0]] + travel[a[1], b[1]]
        x = travel[a[0], b[1]] + travel[a[1], b[0]]
        return (float(s), tuple(b)) if s <= x else (float(x), (b[1], b[0]))
    cost = travel[np.ix_(list(a), list(b))]
    total, cols = hungarian(cost)
    return total, tuple(b[c] for c in cols)


# -- plans -----------------------------------------------------------------

@dataclass
class Plan:
    start: Config
    configs: list[Config] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    compute_time: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return float(sum(self.costs))

    @property
    def assignments(self) -> list[dict[int, int]]:
        return [{p: r for p, r in enumerate(c)} for c in self.configs]

    @property
    def covered_pairs(self) -> set[Pair]:
        out: set[Pair] = set()
        for c in self.configs:
            out |= pairs_of(c)
        return out

    @property
    def n_configs(self) -> int:
        return len(self.configs)

    @property
    def n_transitions(self) -> int:
        """Moves that change the occupied region set (the start is not a move)."""
        prev, count = self.start, 0
        for c in self.configs:
            count += sorted(c) != sorted(prev)
            prev = c
        return count

    def is_empty(self) -> bool:
        return not self.configs

    def to_json_dict(self) -> dict:
        prev = self.start
        steps = []
        for c, cost in zip(self.configs, self.costs):
            steps.append({"from": list(prev), "to": list(c), "cost": cost})
            prev = c
        return {
            "start": list(self.start),
            "configs": [list(c) for c in self.configs],
            "transitions": steps,
            "total_cost": self.total_cost,
            "n_configs": self.n_configs,
            "n_transitions": self.n_transitions,
            "compute_time_s": self.compute_time,
            "notes": self.notes,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Plan":
        try:
            start = tuple(int(x) for x in data["start"])
            configs = [tuple(int(x) for x in c) for c in data["configs"]]
            costs = [float(t["cost"]) for t in data.get("transitions", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise DomainError(f"malformed plan: {exc}") from exc
        if len(costs) != len(configs):
            raise DomainError("malformed plan: transitions and configs disagree")
        return cls(start, configs, costs, float(data.get("compute_time_s", 0.0)),
                   list(data.get("notes", [])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Plan":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def _config_distances(nodes: list[Config], travel) -> NDArray[np.float64]:
    k = len(nodes)
    d = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            d[i, j] = d[j, i] = transition_cost(nodes[i], nodes[j], travel)[0]
    return d


def _path_cost(d, path) -> float:
    return float(sum(d[path[i], path[i + 1]] for i in range(len(path) - 1)))


def nearest_neighbor_path(d: NDArray[np.float64]) -> list[int]:
    """Open path from node 0 visiting every node, always to the nearest unvisited."""
    k = len(d)
    path = [0]
    left = np.ones(k, dtype=bool)
    left[0] = False
    while left.any():
        row = np.where(left, d[path[-1]], np.inf)
        nxt = int(np.argmin(row))
        path.append(nxt)
        left[nxt] = False
    return path


def two_opt(d: NDArray[np.float64], path: list[int]) -> list[int]:
    """2-opt on an open path with a fixed first node, to local optimality."""
    p = list(path)
    k = len(p)
    improved = True
    while improved:
        improved = False
        for i in range(1, k - 1):
            js = np.arange(i + 1, k)
            a, b = p[i - 1], p[i]
            pj = np.array(p)[js]
            nxt = np.array(p + [-1])[js + 1]
            has_next = nxt >= 0
            delta = d[a, pj] - d[a, b]
            delta = delta + np.where(has_next, d[b, np.where(has_next, nxt, 0)]
                                     - d[pj, np.where(has_next, nxt, 0)], 0.0)
            best = int(np.argmin(delta))
            if delta[best] < -1e-9:
                j = int(js[best])
                p[i:j + 1] = p[i:j + 1][::-1]
                improved = True
    return p


def order_configs_tsp(configs: Sequence[Config], start: Config,
                      travel: NDArray[np.float64]) -> Plan:
    """Order configurations by an open TSP path from ``start``.

    Nearest-neighbor construction followed by 2-opt; edge weights are
    assignment transition costs between region sets.
    """
    t0 = time.perf_counter()
    start = tuple(start)
    if not configs:
        return Plan(start, compute_time=time.perf_counter() - t0)
    nodes = [start] + [tuple(c) for c in configs]
    d = _config_distances(nodes, travel)
    path = two_opt(d, nearest_neighbor_path(d))
    plan = Plan(start)
    cur = start
    for idx in path[1:]:
        cost, nxt = transition_cost(cur, nodes[idx], travel)
        plan.configs.append(nxt)
        plan.costs.append(cost)
        cur = nxt
    plan.compute_time = time.perf_counter() - t0
    return plan


def plan_two_robots(matrix: CollectionMatrix, start: Config, travel) -> Plan:
    t0 = time.perf_counter()
    if len(start) != 2:
        raise DomainError(f"two-robot planning needs a 2-region start, got {start}")
    configs = sorted(matrix.pending())
    plan = order_configs_tsp(configs, start, travel)
    plan.compute_time = time.perf_counter() - t0
    return plan


def _refill_idle(order: list[Config], start: Config, U: list[Pair], n: int,
                 travel: NDArray[np.float64]) -> list[Config]:
    """Move non-essential robots toward their neighbors in the sequence.

    A region is essential to a configuration when it belongs to a target
    pair no other configuration covers. The remaining slots are refilled
    with regions close to the previous and next configurations (regions the
    team already occupies first), keeping a change only if it shortens the
    path.
    """
    seq = [tuple(start)] + list(order)
    cnt = _pair_counts(order, U)
    m = travel.shape[0]
    for k in range(1, len(seq)):
        cur = seq[k]
        essential = {r for p in pairs_of(cur) if cnt.get(p) == 1 for r in p}
        if len(essential) == n:
            continue
        prev = list(seq[k - 1])
        nxt = list(seq[k + 1]) if k + 1 < len(seq) else []
        score = travel[:, prev].min(axis=1)
        if nxt:
            score = score + travel[:, nxt].min(axis=1)
        ranked = [int(r) for r in np.lexsort((np.arange(m), score)) if int(r) not in essential]
        cand = tuple(sorted(essential | set(ranked[:n - len(essential)])))

        def local(c):
            v = transition_cost(seq[k - 1], c, travel)[0]
            return v + (transition_cost(c, seq[k + 1], travel)[0] if nxt else 0.0)

        if cand != tuple(sorted(cur)) and local(cand) < local(cur) - 1e-9:
            for p in pairs_of(cur):
                if p in cnt:
                    cnt[p] -= 1
            for p in pairs_of(cand):
                if p in cnt:
                    cnt[p] += 1
            seq[k] = cand
    return [tuple(sorted(c)) for c in seq[1:]]


def _swap_search(order: list[Config], start: Config, U: list[Pair],
                 travel: NDArray[np.float64], max_sweeps: int = 4) -> list[Config]:
    """First-improvement local search on a fixed-order cover.

    Moves: replace one region of a configuration, or exchange one region
    between two configurations. A move is kept when the cover stays complete
    and the path cost drops.
    """
    seq = [tuple(sorted(start))] + [tuple(sorted(c)) for c in order]
    cnt = _pair_counts(order, U)
    cache: dict = {}
    K = len(seq)
    m = travel.shape[0]

    def tc(a, b):
        key = (a, b) if a <= b else (b, a)
        if key not in cache:
            cache[key] = transition_cost(a, b, travel)[0]
        return cache[key]

    def cost_around(ks):
        edges = {e for k in ks for e in (k, k + 1) if 1 <= e < K}  # edge e: e-1 -> e
        return sum(tc(seq[e - 1], seq[e]) for e in edges)

    def bump(c, out, into, sign):
        # pair-count change from swapping ``out`` for ``into`` inside c
        for y in c:
            if y != out:
                p = canon(out, y)
                if p in cnt:
                    cnt[p] -= sign
                q = canon(into, y)
                if q in cnt:
                    cnt[q] += sign

    def try_move(changes) -> bool:
        # changes: [(k, out, into)]
        ks = [k for k, _, _ in changes]
        before = cost_around(ks)
        olds = []
        for k, out, into in changes:
            bump(seq[k], out, into, 1)
            olds.append(seq[k])
            seq[k] = swap(seq[k], out, into)
        ok = all(cnt[canon(out, y)] > 0 for (k, out, into), old in zip(changes, olds)
                 for y in old if y != out and canon(out, y) in cnt)
        if ok and cost_around(ks) < before - 1e-9:
            return True
        for (k, out, into), old in reversed(list(zip(changes, olds))):
            seq[k] = old
            bump(old, out, into, -1)
        return False

    def swap(c, out, into):
        return tuple(sorted(set(c) - {out} | {into}))

    def critical(c, r):
        # partners y of r in c whose pair (r, y) only c covers
        return {y for y in c if y != r and cnt.get(canon(r, y), 2) == 1}

    for _ in range(max_sweeps):
        improved = False
        for k in range(1, K):
            for r in seq[k]:
                if critical(seq[k], r):
                    continue
                if any(try_move([(k, r, x)]) for x in range(m) if x not in seq[k]):
                    improved = True
                    break
        for k in range(1, K):
            for l in range(k + 1, K):
                sk, sl = set(seq[k]), set(seq[l])
                done = False
                for a in sorted(sk - sl):
                    ca = critical(seq[k], a)
                    if not ca <= sl:
                        continue
                    for b in sorted(sl - sk):
                        if b in ca or not critical(seq[l], b) <= sk - {a}:
                            continue
                        if try_move([(k, a, b), (l, b, a)]):
                            improved = done = True
                            break
                    if done:
                        break
        if not improved:
            break
    return seq[1:]


def _polish(plan: Plan, start: Config, U: list[Pair], n: int, travel, rounds: int) -> Plan:
    for _ in range(rounds):
        order = [tuple(sorted(c)) for c in plan.configs]
        refined = _refill_idle(order, start, U, n, travel)
        refined = prune_redundant(_swap_search(refined, start, U, travel), U)
        cand = order_configs_tsp(refined, start, travel)
        if cand.total_cost >= plan.total_cost - 1e-9:
            break
        plan = cand
    return plan


def _search_cover(U: list[Pair], m: int, n: int, start: Config, travel, restarts: int,
                  rng, refine_rounds: int) -> Plan:
    best = None
    for r in range(restarts + 2):
        if r == 0:
            configs = greedy_set_cover(U, m, n)
        else:
            configs = greedy_set_cover(U, m, n, multi_start=True, rng=None if r == 1 else rng)
        if best is not None and len(configs) > best.n_configs:
            continue
        plan = _polish(order_configs_tsp(configs, start, travel), start, U, n, travel,
                       refine_rounds)
        if best is None or (plan.n_configs, plan.total_cost) < (best.n_configs, best.total_cost - 1e-9):
            best = plan
    return best


def plan_multi(matrix: CollectionMatrix, n: int, start: Config, travel,
               restarts: int = 16, seed: int = 0, refine_rounds: int = 3) -> Plan:
    """Set cover of the pending pairs, then TSP ordering of the cover.

    The plain greedy cover is complemented by a multi-start cover and
    ``restarts`` multi-start covers with seeded random tie-breaking. Each
    ordered cover is polished (idle robots re-placed near their neighbors in
    the sequence, redundant configurations dropped, sequence re-ordered) and
    the one with the fewest configurations, then the lowest cost, is kept.

    When the start configuration itself has pending pairs, a second search
    measures them in place first and covers the rest; of the two plans the
    one with fewer transitions, then lower cost, is returned.
    """
    t0 = time.perf_counter()
    if n <= 2:
        raise DomainError(f"multi-robot planning needs n > 2, got {n}")
    if len(start) != n:
        raise DomainError(f"start configuration has {len(start)} regions, expected {n}")
    start = tuple(start)
    U = sorted(matrix.pending())
    if not U:
        return Plan(start, compute_time=time.perf_counter() - t0)
    travel = np.asarray(travel, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = _search_cover(U, matrix.m, n, start, travel, restarts, rng, refine_rounds)
    own = pairs_of(start)
    rest = [p for p in U if p not in own]
    if len(rest) < len(U):
        tail = (_search_cover(rest, matrix.m, n, start, travel, restarts, rng, refine_rounds)
                if rest else Plan(start))
        seeded = Plan(start, [start] + tail.configs, [0.0] + tail.costs, notes=tail.notes)
        if (seeded.n_transitions, seeded.total_cost) < (best.n_transitions, best.total_cost - 1e-9):
            best = seeded
    best.compute_time = time.perf_counter() - t0
    return best


def plan_collection(matrix: CollectionMatrix, n: int, start: Config, travel) -> Plan:
    """Dispatch to the two-robot or multi-robot planner."""
    if n == 2:
        return plan_two_robots(matrix, start, travel)
    return plan_multi(matrix, n, start, travel)


def replan_on_failure(matrix: CollectionMatrix, previous: Config, n: int, travel) -> Plan:
    """Re-solve from ``previous`` over whatever pairs are still pending."""
    return plan_collection(matrix, n, tuple(previous), travel)


# -- greedy baseline -------------------------------------------------------

def _combos(m: int, n: int, cap: int) -> tuple[NDArray[np.int64], bool]:
    total = math.comb(m, n)
    count = min(total, cap)
    it = itertools.combinations(range(m), n)
    arr = np.fromiter(itertools.chain.from_iterable(itertools.islice(it, count)),
                      dtype=np.int64, count=count * n).reshape(count, n)
    return arr, total > cap


def baseline_greedy(matrix: CollectionMatrix, n: int, start: Config, travel,
                    objective: str = "coverage", candidate_cap: int = 2_000_000,
                    chunk: int = 32768) -> Plan:
    """Step-wise greedy over all n-subsets of regions.

    With ``objective="cost"`` each step takes the cheapest move among the
    configurations that add at least one pending pair (ties -> more new
    pairs). With ``objective="coverage"`` it takes the configuration adding
    the most pending pairs (ties -> cheapest move). The scan covers at most
    ``candidate_cap`` subsets; truncation is recorded in ``plan.notes``.
    """
    if objective not in ("cost", "coverage"):
        raise DomainError(f"unknown baseline objective {objective!r}")
    t0 = time.perf_counter()
    travel = np.asarray(travel, dtype=np.float64)
    m = matrix.m
    if n < 2 or n > m:
        raise DomainError(f"need 2 <= n <= m, got n={n}, m={m}")
    if len(start) != n:
        raise DomainError(f"start configuration has {len(start)} regions, expected {n}")
    combos, truncated = _combos(m, n, candidate_cap)
    plan = Plan(tuple(start))
    if truncated:
        msg = f"candidate scan truncated to {candidate_cap} of {math.comb(m, n)} {n}-subsets"
        log.warning(msg)
        plan.notes.append(msg)
    remaining = (matrix.state == 0).astype(np.int64)
    np.fill_diagonal(remaining, 0)
    cur = tuple(start)
    while remaining.any():
        cover = np.empty(len(combos), dtype=np.int64)
        for s in range(0, len(combos), chunk):
            c = combos[s:s + chunk]
            cover[s:s + chunk] = remaining[c[:, :, None], c[:, None, :]].sum(axis=(1, 2)) // 2
        if cover.max() == 0:
            plan.notes.append("pending pairs not reachable within the candidate scan")
            break
        keep = cover == cover.max() if objective == "coverage" else cover > 0
        cand, cand_cover = combos[keep], cover[keep]
        # assignment lower bound: every robot (and every target) takes its cheapest option
        rows = travel[list(cur)]
        lb = np.empty(len(cand))
        for s in range(0, len(cand), chunk):
            sub = rows[:, cand[s:s + chunk]]  # (n, K, n)
            lb[s:s + chunk] = np.maximum(sub.min(axis=2).sum(axis=0), sub.min(axis=0).sum(axis=1))
        order = np.lexsort((-cand_cover, lb))
        best = (math.inf, 0)
        best_cfg = None
        for k in order:
            if lb[k] > best[0] + 1e-9:
                break
            cost, cfg = transition_cost(cur, tuple(int(x) for x in cand[k]), travel)
            key = (cost, -int(cand_cover[k]))
            if cost < best[0] - 1e-9 or (abs(cost - best[0]) <= 1e-9 and key[1] < best[1]):
                best, best_cfg = key, cfg
        idx = np.array(best_cfg)
        remaining[np.ix_(idx, idx)] = 0
        plan.configs.append(best_cfg)
        plan.costs.append(best[0])
        cur = best_cfg
    plan.compute_time = time.perf_counter() - t0
    return plan


# -- travel costs ----------------------------------------------------------

def _free_graph(grid):
    occ = grid.occupancy
    dims = np.array(occ.shape)
    flat = np.arange(occ.size).reshape(occ.shape)
    rows, cols, w = [], [], []
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=3) if o > (0, 0, 0)]
    for o in offsets:
        lo = [max(0, -k) for k in o]
        hi = [dims[i] - max(0, k) for i, k in enumerate(o)]
        a = tuple(slice(lo[i], hi[i]) for i in range(3))
        b = tuple(slice(lo[i] + o[i], hi[i] + o[i]) for i in range(3))
        ok = ~occ[a] & ~occ[b]
        rows.append(flat[a][ok])
        cols.append(flat[b][ok])
        w.append(np.full(int(ok.sum()), grid.resolution * math.sqrt(sum(k * k for k in o))))
    r, c, ww = np.concatenate(rows), np.concatenate(cols), np.concatenate(w)
    return coo_matrix((ww, (r, c)), shape=(occ.size, occ.size)).tocsr()


def region_anchors(partition) -> list[NDArray[np.float64] | None]:
    """Per region, the waypoint nearest the region center (None if no waypoints)."""
    out = []
    for r in partition.regions:
        wp = np.asarray(r.waypoints).reshape(-1, 3)
        if len(wp) == 0:
            out.append(None)
        else:
            out.append(wp[int(np.argmin(np.linalg.norm(wp - r.center, axis=1)))])
    return out


def shortest_path_lengths(grid, sources, targets) -> NDArray[np.float64]:
    """Free-space path lengths (26-connected, Euclidean steps); UNREACHABLE if none."""
    graph = _free_graph(grid)
    src = [int(np.ravel_multi_index(grid.voxel_of(p), grid.dims)) for p in sources]
    tgt = [int(np.ravel_multi_index(grid.voxel_of(p), grid.dims)) for p in targets]
    dist = dijkstra(graph, directed=False, indices=src)[:, tgt]
    return np.where(np.isfinite(dist), dist, UNREACHABLE)


def travel_cost_matrix(partition, grid) -> NDArray[np.float64]:
    anchors = region_anchors(partition)
    m = len(anchors)
    cost = np.full((m, m), UNREACHABLE)
    np.fill_diagonal(cost, 0.0)
    have = [i for i, a in enumerate(anchors) if a is not None]
    if len(have) > 1:
        pts = [anchors[i] for i in have]
        d = shortest_path_lengths(grid, pts, pts)
        d = np.minimum(d, d.T)
        for a, i in enumerate(have):
            for b, j in enumerate(have):
                if i != j:
                    cost[i, j] = d[a, b]
    return cost
