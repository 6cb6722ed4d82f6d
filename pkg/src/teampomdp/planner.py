"""Dynamic programming for the coordinated system.

`exact_dp` runs backward induction over full prescription-observation
histories; `compressed_dp` runs the identical recursion over common-AIS
values; `value_iteration` computes the fixed point of the stationary
compressed Bellman operator for time-invariant generator bundles.

Values are accumulated with the per-step multiplier-parametrized cost
c + <lambda, d - kappa>.  The duality layer converts aggregates to the
plain Lagrangian C + <lambda, D - kappa> (which subtracts <lambda, kappa>
once instead of once per discounted step).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import compression
from .coordinator import (
    CoordinationPolicy,
    DeterministicPrescription,
    PrescriptionHistory,
    enumerate_deterministic_prescriptions,
    sort_key,
)
from .model import EnumerationLimitError, ModelSpec

__all__ = [
    "NumericError",
    "TreeNode",
    "Edge",
    "CoordinatorTree",
    "ValueTables",
    "CompressedValueTables",
    "FixedPointResult",
    "lambda_cost",
    "build_coordinator_tree",
    "exact_dp",
    "compressed_dp",
    "value_iteration",
    "finite_horizon_envelope",
    "lambda_cost_bounds",
    "discounted_sum",
    "enumerate_coordination_policies",
    "q_value_stochastic",
]

DEFAULT_TREE_GUARD = 10**6


class NumericError(RuntimeError):
    """A numeric contract was broken (divergence, NaN)."""


def lambda_cost(model: ModelSpec, lam: Sequence[float], s, a: tuple) -> float:
    """One-step cost c(s,a) + <lam, d(s,a) - kappa>; lam must be nonnegative."""
    lam = tuple(float(x) for x in lam)
    if any(x < 0 for x in lam):
        raise ValueError("multipliers must be nonnegative")
    return model.lambda_step_cost(s, a, lam)


def lambda_cost_bounds(model: ModelSpec, lam: Sequence[float]) -> tuple[float, float]:
    """(l_low, l_high): bounds of the lambda-parametrized step cost."""
    b = model.cost_bounds()
    lam = np.asarray(lam, dtype=float)
    lo = b["c_low"] + float(lam @ (b["d_low"] - np.asarray(model.kappa)))
    hi = b["c_up"] + float(lam @ (b["d_up"] - np.asarray(model.kappa)))
    return lo, hi


def discounted_sum(alpha: float, T: int) -> float:
    """sum_{t=1..T} alpha^(t-1)."""
    return (1.0 - alpha**T) / (1.0 - alpha)


@dataclass
class TreeNode:
    items: tuple
    weight: float = 0.0
    cond: dict = field(default_factory=dict)  # (state, private profile) -> prob


@dataclass
class Edge:
    exp_c: float
    exp_d: tuple
    branches: tuple  # ((common_obs, prob, child_items), ...)


@dataclass
class CoordinatorTree:
    model: ModelSpec
    T: int
    layers: list  # per t: dict items -> TreeNode
    edges: list  # per t: dict items -> list[(DeterministicPrescription, Edge)]

    def layer_weights(self, t: int) -> dict:
        return {items: n.weight for items, n in self.layers[t - 1].items()}


def build_coordinator_tree(
    model: ModelSpec,
    T: int,
    guard: int = DEFAULT_TREE_GUARD,
    prescription_guard: int = 10**5,
    with_edges: bool = True,
    best_effort: bool = False,
) -> CoordinatorTree:
    """Forward enumeration of all prescription-observation histories.

    Each node stores the exact conditional law of (state, private histories)
    given its history, which is policy-independent; edges cache the expected
    immediate costs and the successor distribution for every deterministic
    prescription on the node's realized private sets.  `with_edges=False`
    skips the cost caches (certification needs the node layers only), which
    in particular skips the whole final-layer prescription sweep.
    `best_effort` returns the deepest tree fitting the guard instead of
    raising.
    """
    first: dict = {}
    for (s, o), p in model.initial:
        if p <= 0.0:
            continue
        o0, priv = model.split_obs(o)
        items = (o0,)
        node = first.setdefault(items, TreeNode(items))
        node.weight += p
        hp = tuple((po,) for po in priv)
        node.cond[(s, hp)] = node.cond.get((s, hp), 0.0) + p
    for node in first.values():
        node.cond = {k: v / node.weight for k, v in node.cond.items()}
    layers = [first]
    edges: list = []
    total = len(first)
    K = model.num_constraints
    # (s, a) -> ((o0, private parts, s2, q), ...): avoids re-splitting inside hot loops
    trans_prep = {
        key: tuple((o2[0], o2[1:], s2, q) for (s2, o2), q in row if q > 0.0)
        for key, row in model.transition.items()
    }
    for t in range(1, T + 1):
        if not with_edges and t == T:
            break
        node_domains = {}
        projected = total
        for items, node in layers[t - 1].items():
            domains = [
                sorted({hp[n] for _s, hp in node.cond}, key=sort_key)
                for n in range(model.num_agents)
            ]
            node_domains[items] = domains
            n_gamma = 1
            for n in range(model.num_agents):
                n_gamma *= len(model.actions[n]) ** len(domains[n])
            projected += n_gamma * (1 + (len(model.common_obs) if t < T else 0))
        if projected > guard:
            if best_effort and t > 1:
                return CoordinatorTree(model=model, T=t, layers=layers[:t], edges=edges)
            raise EnumerationLimitError(
                f"coordinator tree exceeds guard ({projected} > {guard}) at t={t}"
            )
        cur_edges: dict = {}
        nxt: dict = {}
        for items, node in layers[t - 1].items():
            gammas = enumerate_deterministic_prescriptions(
                model, node_domains[items], guard=prescription_guard
            )
            share = node.weight / len(gammas)
            elist = []
            cond_items = list(node.cond.items())
            for gamma in gammas:
                actions = [dict(gamma.rows[n]) for n in range(model.num_agents)]
                exp_c = 0.0
                exp_d = [0.0] * K
                buckets: dict = {}
                for (s, hp), p in cond_items:
                    a = tuple(actions[n][hp[n]] for n in range(model.num_agents))
                    key = (s, a)
                    if with_edges:
                        exp_c += p * model.cost_c[key]
                        dvec = model.cost_d[key]
                        for k in range(K):
                            exp_d[k] += p * dvec[k]
                    if t < T:
                        for o0, priv2, s2, q in trans_prep[key]:
                            hp2 = tuple(hp[n] + (a[n], priv2[n]) for n in range(model.num_agents))
                            bucket = buckets.setdefault(o0, {})
                            bucket[(s2, hp2)] = bucket.get((s2, hp2), 0.0) + p * q
                branches = []
                for o0 in sorted(buckets):
                    bucket = buckets[o0]
                    mass = sum(bucket.values())
                    if mass <= 0.0:
                        continue
                    child_items = items + (gamma.key, o0)
                    child = nxt.setdefault(child_items, TreeNode(child_items))
                    child.weight += share * mass
                    for sk, v in bucket.items():
                        child.cond[sk] = child.cond.get(sk, 0.0) + v / mass
                    branches.append((o0, mass, child_items))
                if with_edges:
                    elist.append((gamma, Edge(exp_c, tuple(exp_d), tuple(branches))))
            if with_edges:
                cur_edges[items] = elist
                total += len(elist)
        edges.append(cur_edges)
        if t < T:
            layers.append(nxt)
            total += len(nxt)
    return CoordinatorTree(model=model, T=T, layers=layers, edges=edges)


@dataclass
class ValueTables:
    """Backward-induction output of the full-history dynamic program."""

    lam: tuple
    T: int
    V: list  # per t: dict items -> value
    Q: list  # per t: dict (items, gamma key) -> value
    chosen: list  # per t: dict items -> DeterministicPrescription
    aggregate: float  # sum over initial histories of P(h) * V_1(h)
    lagrangian_aggregate: float  # aggregate + <lam,kappa>*(S_T - 1)
    tree: CoordinatorTree | None = None

    def policy(self, name: str = "dp") -> CoordinationPolicy:
        return CoordinationPolicy(self.chosen, name=name)


def _aggregate_offset(model: ModelSpec, lam, T: int) -> float:
    # The per-step cost subtracts <lam,kappa> every discounted step; the plain
    # Lagrangian subtracts it once.
    lk = float(np.dot(lam, model.kappa))
    return lk * (discounted_sum(model.discount, T) - 1.0)


def exact_dp(
    model: ModelSpec,
    lam: Sequence[float],
    T: int,
    tree: CoordinatorTree | None = None,
    guard: int = DEFAULT_TREE_GUARD,
) -> ValueTables:
    """Optimal coordination policy for the horizon-T discounted lambda-cost.

    Backward recursion with V_{T+1} = 0; the minimum ranges over the node's
    deterministic prescriptions, ties resolving to the first in lexicographic
    order.
    """
    lam = tuple(float(x) for x in lam)
    if any(x < 0 for x in lam):
        raise ValueError("multipliers must be nonnegative")
    if tree is None or tree.T < T:
        tree = build_coordinator_tree(model, T, guard=guard)
    alpha = model.discount
    kappa = model.kappa
    K = model.num_constraints
    V: list = [dict() for _ in range(T + 1)]
    Q: list = [dict() for _ in range(T)]
    chosen: list = [dict() for _ in range(T)]
    for t in range(T, 0, -1):
        v_next = V[t]  # V[t] holds layer t+1 values (V[T] stays empty = 0)
        for items, elist in tree.edges[t - 1].items():
            best = None
            best_gamma = None
            for gamma, edge in elist:
                q = edge.exp_c
                for k in range(K):
                    q += lam[k] * (edge.exp_d[k] - kappa[k])
                if t < T:
                    cont = 0.0
                    for _o0, pbr, child in edge.branches:
                        cont += pbr * v_next[child]
                    q += alpha * cont
                Q[t - 1][(items, gamma.key)] = q
                if best is None or q < best:
                    best = q
                    best_gamma = gamma
            V[t - 1][items] = best
            chosen[t - 1][items] = best_gamma
    aggregate = sum(node.weight * V[0][items] for items, node in tree.layers[0].items())
    return ValueTables(
        lam=lam,
        T=T,
        V=V[:T],
        Q=Q,
        chosen=chosen,
        aggregate=aggregate,
        lagrangian_aggregate=aggregate + _aggregate_offset(model, lam, T),
        tree=tree,
    )


def q_value_stochastic(
    model: ModelSpec,
    tree: CoordinatorTree,
    t: int,
    items: tuple,
    prescription,
    lam: Sequence[float],
) -> float:
    """Q at the last layer (t = T) for a possibly stochastic prescription.

    The one-step objective is affine in each prescription row, so this is the
    quantity whose minimum is attained at a deterministic vertex.
    """
    if t != tree.T:
        raise ValueError("stochastic Q evaluation is supported at the final layer only")
    node = tree.layers[t - 1][items]
    lam = tuple(lam)
    total = 0.0
    for (s, hp), p in node.cond.items():
        dists = [prescription.row(n, hp[n]) for n in range(model.num_agents)]
        combos = [((), 1.0)]
        for d in dists:
            combos = [(ja + (i,), pj * pi) for ja, pj in combos for i, pi in zip(d.ids, d.probs) if pi > 0.0]
        for a, pa in combos:
            total += p * pa * model.lambda_step_cost(s, a, lam)
    return total


def enumerate_coordination_policies(tree: CoordinatorTree) -> list[CoordinationPolicy]:
    """Every deterministic coordination policy over realized branches.

    Only assignments on histories the policy itself reaches are enumerated;
    unreached histories never affect values.  Exponential: small horizons only.
    """
    model = tree.model
    T = tree.T

    def expand(t: int, reached: list) -> list[list[dict]]:
        if t > T:
            return [[{} for _ in range(0)]]
        options_per_node = []
        for items in reached:
            elist = tree.edges[t - 1][items]
            options_per_node.append([(items, gamma, edge) for gamma, edge in elist])
        results = []
        for combo in _product(options_per_node):
            layer_map = {items: gamma for items, gamma, _e in combo}
            children = sorted(
                {child for _i, _g, e in combo for _o, _p, child in e.branches},
                key=sort_key,
            )
            if t == T:
                results.append([layer_map])
            else:
                for tail in expand(t + 1, children):
                    results.append([layer_map] + tail)
        return results

    roots = sorted(tree.layers[0].keys(), key=sort_key)
    out = []
    for assignment in expand(1, roots):
        out.append(CoordinationPolicy(assignment))
    return out


def _product(lists):
    if not lists:
        yield ()
        return
    head, *rest = lists
    for h in head:
        for r in _product(rest):
            yield (h,) + r


@dataclass
class CompressedValueTables:
    """Backward-induction output over common-AIS values."""

    lam: tuple
    T: int
    V: list  # per t: dict z0 -> value
    Q: list  # per t: dict (z0, lamhat key) -> value
    chosen: list  # per t: dict z0 -> DeterministicPrescription (reduced)
    aggregate: float
    lagrangian_aggregate: float
    layers: list | None = None  # pooled layers

    def initial_value(self, bundle, common_obs) -> float:
        return self.V[0][compression.initial_common_value(bundle, common_obs)]


def compressed_dp(
    model: ModelSpec,
    bundle,
    lam: Sequence[float],
    T: int,
    guard: int = compression.DEFAULT_SUPPORT_GUARD,
) -> CompressedValueTables:
    """Identical recursion to exact_dp over (common AIS value, reduced
    prescription) pairs; expectations group the exact forward law by AIS value."""
    lam = tuple(float(x) for x in lam)
    if any(x < 0 for x in lam):
        raise ValueError("multipliers must be nonnegative")
    layers = compression.pooled_layers(model, bundle, T, guard=guard)
    alpha = model.discount
    kappa = model.kappa
    K = model.num_constraints
    N = model.num_agents
    trans = compression.transition_prep(model)
    V: list = [dict() for _ in range(T)]
    Q: list = [dict() for _ in range(T)]
    chosen: list = [dict() for _ in range(T)]
    for t in range(T, 0, -1):
        v_next = V[t] if t < T else {}
        for z0, node in layers[t - 1].items():
            lamhats = compression.group_prescriptions(
                model, node.private_value_sets(N)
            )
            zps = sorted({zp for _s, zp in node.cond}, key=sort_key)
            best = None
            best_lam = None
            for lh in lamhats:
                actions = [dict(lh.rows[n]) for n in range(N)]
                a_of = {zp: tuple(actions[n][zp[n]] for n in range(N)) for zp in zps}
                z0n_of: dict = {}
                q = 0.0
                for (s, zp), p in node.cond.items():
                    key = (s, a_of[zp])
                    step = model.cost_c[key]
                    dvec = model.cost_d[key]
                    for k in range(K):
                        step += lam[k] * (dvec[k] - kappa[k])
                    q += p * step
                    if t < T:
                        # successor value depends on the common AIS value only
                        for o0, _priv2, _s2, pq in trans[key]:
                            z0n = z0n_of.get(o0)
                            if z0n is None:
                                z0n = bundle.common_update(z0, lh.key, o0)
                                z0n_of[o0] = z0n
                            q += alpha * p * pq * v_next[z0n]
                Q[t - 1][(z0, lh.key)] = q
                if best is None or q < best:
                    best = q
                    best_lam = lh
            V[t - 1][z0] = best
            chosen[t - 1][z0] = best_lam
    aggregate = sum(node.weight * V[0][z0] for z0, node in layers[0].items())
    return CompressedValueTables(
        lam=lam,
        T=T,
        V=V,
        Q=Q,
        chosen=chosen,
        aggregate=aggregate,
        lagrangian_aggregate=aggregate + _aggregate_offset(model, lam, T),
        layers=layers,
    )


@dataclass
class FixedPointResult:
    """Fixed point of the stationary compressed Bellman operator."""

    V: dict  # z0 -> value
    Q: dict  # (z0, lamhat key) -> value
    iterations: int
    residual: float
    nodes: dict  # z0 -> stationary node data (cond, lamhats, kernel)
    stationarity_gap: float  # max over repeated z0 of per-layer row deviation


class _StationaryModel:
    """Pooled, time-collapsed compressed model with closure checking."""

    def __init__(self, model: ModelSpec, bundle, build_horizon: int, guard: int):
        self.model = model
        self.bundle = bundle
        layers = compression.pooled_layers(model, bundle, build_horizon, guard=guard)
        merged: dict = {}
        per_layer_cond: dict = {}
        for layer in layers:
            for z0, node in layer.items():
                m = merged.setdefault(z0, PooledAccum(z0))
                m.weight += node.weight
                for k, v in node.cond.items():
                    m.cond[k] = m.cond.get(k, 0.0) + node.weight * v
                per_layer_cond.setdefault(z0, []).append(node.cond)
        for m in merged.values():
            m.cond = {k: v / m.weight for k, v in m.cond.items()}
        self.nodes = merged
        self.stationarity_gap = _stationarity_gap(per_layer_cond)
        # rows and closure
        self.lamhats = {}
        self.kernel = {}
        missing = set()
        N = model.num_agents
        trans = compression.transition_prep(model)
        for z0, m in self.nodes.items():
            value_sets = [
                sorted({zp[n] for _s, zp in m.cond}, key=sort_key)
                for n in range(N)
            ]
            lamhats = compression.group_prescriptions(model, value_sets)
            self.lamhats[z0] = lamhats
            zps = sorted({zp for _s, zp in m.cond}, key=sort_key)
            for lh in lamhats:
                actions = [dict(lh.rows[n]) for n in range(N)]
                a_of = {zp: tuple(actions[n][zp[n]] for n in range(N)) for zp in zps}
                z0n_of: dict = {}
                exp_c = 0.0
                exp_d = [0.0] * model.num_constraints
                succ: dict = {}
                for (s, zp), p in m.cond.items():
                    key = (s, a_of[zp])
                    exp_c += p * model.cost_c[key]
                    for k in range(model.num_constraints):
                        exp_d[k] += p * model.cost_d[key][k]
                    for o0, _priv2, _s2, q in trans[key]:
                        z0n = z0n_of.get(o0)
                        if z0n is None:
                            z0n = bundle.common_update(z0, lh.key, o0)
                            z0n_of[o0] = z0n
                        succ[z0n] = succ.get(z0n, 0.0) + p * q
                        if z0n not in self.nodes:
                            missing.add(z0n)
                self.kernel[(z0, lh.key)] = (exp_c, tuple(exp_d), succ)
        if missing:
            raise NumericError(
                "AIS range does not close under the recursive update "
                f"({len(missing)} unseen values, e.g. {next(iter(missing))!r}); "
                "a finite time-invariant range is required for value iteration"
            )


@dataclass
class PooledAccum:
    z0: object
    weight: float = 0.0
    cond: dict = field(default_factory=dict)


def _stationarity_gap(per_layer_cond: dict) -> float:
    gap = 0.0
    for _z0, conds in per_layer_cond.items():
        if len(conds) < 2:
            continue
        keys = set()
        for c in conds:
            keys |= set(c)
        for k in keys:
            vals = [c.get(k, 0.0) for c in conds]
            gap = max(gap, max(vals) - min(vals))
    return gap


def value_iteration(
    model: ModelSpec,
    bundle,
    lam: Sequence[float],
    tol: float = 1e-6,
    build_horizon: int = 6,
    max_sweeps: int = 100000,
    guard: int = compression.DEFAULT_SUPPORT_GUARD,
) -> FixedPointResult:
    """Iterate the compressed Bellman operator from 0 to its fixed point.

    Stops when the sup-norm successive difference is at most
    tol*(1-alpha)/alpha, which bounds the fixed-point error by tol.
    """
    if not bundle.time_invariant:
        raise ValueError("value iteration requires a time-invariant generator bundle")
    lam = tuple(float(x) for x in lam)
    alpha = model.discount
    if not (0.0 < alpha < 1.0):
        raise ValueError("discount must lie in (0,1)")
    sm = _StationaryModel(model, bundle, build_horizon, guard)
    V = {z0: 0.0 for z0 in sm.nodes}
    stop = tol * (1.0 - alpha) / alpha
    kappa = model.kappa
    K = model.num_constraints
    grow_streak = 0
    prev_res = None
    for i in range(1, max_sweeps + 1):
        Vn = {}
        Q = {}
        for z0 in sm.nodes:
            best = None
            for lh in sm.lamhats[z0]:
                exp_c, exp_d, succ = sm.kernel[(z0, lh.key)]
                q = exp_c
                for k in range(K):
                    q += lam[k] * (exp_d[k] - kappa[k])
                q += alpha * sum(p * V[z] for z, p in succ.items())
                Q[(z0, lh.key)] = q
                if best is None or q < best:
                    best = q
            Vn[z0] = best
        res = max(abs(Vn[z] - V[z]) for z in V)
        V = Vn
        if res <= stop:
            return FixedPointResult(
                V=V, Q=Q, iterations=i, residual=res,
                nodes=sm.nodes, stationarity_gap=sm.stationarity_gap,
            )
        if prev_res is not None and res > prev_res:
            grow_streak += 1
            if grow_streak >= 10:
                raise NumericError("value iteration residual grew 10 sweeps in a row")
        else:
            grow_streak = 0
        prev_res = res
    raise NumericError(f"value iteration did not reach tolerance in {max_sweeps} sweeps")


def apply_bellman(model: ModelSpec, sm_nodes, sm_lamhats, sm_kernel, lam, V: dict) -> dict:
    """One sweep of the compressed Bellman operator on an arbitrary table."""
    alpha = model.discount
    kappa = model.kappa
    K = model.num_constraints
    out = {}
    for z0 in sm_nodes:
        best = None
        for lh in sm_lamhats[z0]:
            exp_c, exp_d, succ = sm_kernel[(z0, lh.key)]
            q = exp_c
            for k in range(K):
                q += lam[k] * (exp_d[k] - kappa[k])
            q += alpha * sum(p * V[z] for z, p in succ.items())
            if best is None or q < best:
                best = q
        out[z0] = best
    return out


def stationary_model(model: ModelSpec, bundle, build_horizon: int = 10,
                     guard: int = compression.DEFAULT_SUPPORT_GUARD) -> _StationaryModel:
    """Expose the pooled stationary compressed model (for operator tests)."""
    return _StationaryModel(model, bundle, build_horizon, guard)


def finite_horizon_envelope(
    v_value: float,
    t: int,
    T: int,
    alpha: float,
    lam: Sequence[float],
    model: ModelSpec,
) -> tuple[float, float]:
    """Interval guaranteed to contain the infinite-horizon value V_t given the
    horizon-T value: [v + a^(T-t+1)/(1-a) * l_low, v + a^(T-t+1)/(1-a) * l_high]."""
    if not (0.0 < alpha < 1.0):
        raise ValueError("discount must lie in (0,1)")
    if t > T:
        raise ValueError("t must not exceed T")
    lo_c, hi_c = lambda_cost_bounds(model, lam)
    scale = alpha ** (T - t + 1) / (1.0 - alpha)
    return v_value + scale * lo_c, v_value + scale * hi_c
