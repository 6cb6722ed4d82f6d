"""Approximate-information-state generators and their exhaustive certification.

A generator bundle compresses private histories (per agent) and the
coordinator's prescription-observation history (common side) through
recursive updates.  Certification measures, over every reachable history, how
far the compressed conditionals drift from the exact ones; the resulting
attributes feed closed-form optimality-gap bounds for the compressed dynamic
program and its infinite-horizon fixed point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import compression, planner
from .coordinator import sort_key
from .model import EnumerationLimitError, ModelSpec

__all__ = [
    "GeneratorBundle",
    "Certification",
    "GapBounds",
    "builtin_generator",
    "parse_generator",
    "certify",
    "certify_infinite",
    "gap_bounds",
    "check_finite_gap",
    "check_infinite_gap",
]


@dataclass(frozen=True)
class GeneratorBundle:
    """Recursive compressors for private histories and the common history.

    private_update[n](z_prev, common_obs, private_obs, prev_action) -> z
    common_update(z_prev, reduced_prescription_key, common_obs) -> z
    The very first update receives prev_action / prescription key None.
    """

    model: ModelSpec
    kind: str
    private_init: tuple
    private_update: tuple
    common_init: object
    common_update: Callable
    time_invariant: bool
    horizon: int | None = None
    params: dict = field(default_factory=dict)

    @property
    def num_agents(self) -> int:
        return self.model.num_agents


def builtin_generator(kind: str, model: ModelSpec, T: int | None = None) -> GeneratorBundle:
    """identity | constant | window:k | belief generators.

    identity keeps full histories; constant maps everything to one token;
    window keeps the last k update inputs; belief maps the common history to
    the exact conditional law of (state, private values) and keeps private
    histories intact.  All satisfy the recursive-update property by
    construction.
    """
    N = model.num_agents
    if kind == "identity":
        return GeneratorBundle(
            model=model,
            kind="identity",
            private_init=tuple(() for _ in range(N)),
            private_update=tuple(_append_private for _ in range(N)),
            common_init=(),
            common_update=_append_common,
            time_invariant=True,
            horizon=T,
        )
    if kind == "constant":
        return GeneratorBundle(
            model=model,
            kind="constant",
            private_init=tuple("-" for _ in range(N)),
            private_update=tuple(_const for _ in range(N)),
            common_init="-",
            common_update=_const3,
            time_invariant=True,
            horizon=T,
        )
    if kind.startswith("window"):
        k = int(kind.split(":", 1)[1]) if ":" in kind else int(kind[len("window("):-1])
        if k < 1:
            raise ValueError("window size must be >= 1")
        return GeneratorBundle(
            model=model,
            kind=f"window:{k}",
            private_init=tuple(() for _ in range(N)),
            private_update=tuple(_window_private(k) for _ in range(N)),
            common_init=(),
            common_update=_window_common(k),
            time_invariant=True,
            horizon=T,
            params={"k": k},
        )
    if kind == "belief":
        identity = builtin_generator("identity", model, T)
        return GeneratorBundle(
            model=model,
            kind="belief",
            private_init=identity.private_init,
            private_update=identity.private_update,
            common_init=_initial_belief(model),
            common_update=_belief_update(model, identity),
            time_invariant=True,
            horizon=T,
        )
    raise ValueError(f"unknown generator kind {kind!r}")


def parse_generator(spec: str, model: ModelSpec, T: int | None = None) -> GeneratorBundle:
    """CLI syntax: identity | constant | window:k | belief."""
    return builtin_generator(spec, model, T)


def _append_private(z, o0, opriv, aprev):
    return z + ((o0, opriv, aprev),)


def _append_common(z, lam_key, o0):
    return z + ((lam_key, o0),)


def _const(z, o0, opriv, aprev):
    return "-"


def _const3(z, lam_key, o0):
    return "-"


def _window_private(k):
    def update(z, o0, opriv, aprev):
        return (z + ((o0, opriv, aprev),))[-k:]

    return update


def _window_common(k):
    def update(z, lam_key, o0):
        return (z + ((lam_key, o0),))[-k:]

    return update


_BELIEF_DECIMALS = 12


def _canonical_belief(entries: dict) -> tuple:
    total = sum(entries.values())
    return tuple(
        sorted(((k, round(v / total, _BELIEF_DECIMALS)) for k, v in entries.items() if v > 0.0),
               key=lambda kv: sort_key(kv[0]))
    )


def _initial_belief(model: ModelSpec):
    # placeholder; the first common_update call builds the real belief
    return ("__pre__",)


def _belief_update(model: ModelSpec, identity: GeneratorBundle):
    def update(z, lam_key, o0):
        if lam_key is None:
            entries: dict = {}
            for (s, o), p in model.initial:
                if p <= 0.0:
                    continue
                oc, priv = model.split_obs(o)
                if oc != o0:
                    continue
                zp = tuple(
                    identity.private_update[n](identity.private_init[n], oc, priv[n], None)
                    for n in range(model.num_agents)
                )
                entries[(s, zp)] = entries.get((s, zp), 0.0) + p
            return _canonical_belief(entries)
        actions = [dict(rows) for rows in lam_key]
        entries = {}
        for (s, zp), p in z:
            a = tuple(actions[n][zp[n]] for n in range(model.num_agents))
            for (s2, o2), q in model.transition[(s, a)]:
                if q <= 0.0:
                    continue
                oc, priv2 = model.split_obs(o2)
                if oc != o0:
                    continue
                zp2 = tuple(
                    identity.private_update[n](zp[n], oc, priv2[n], a[n])
                    for n in range(model.num_agents)
                )
                entries[(s2, zp2)] = entries.get((s2, zp2), 0.0) + p * q
        return _canonical_belief(entries)

    return update


@dataclass(frozen=True)
class Certification:
    """Tightest measured attributes: max deviation times the defining constant
    (4 for cost predictions, 8 for total-variation observation predictions)."""

    eps_p1: float
    eps_p2: float
    delta_p: float
    eps_c1: float
    eps_c2: float
    delta_c: float
    horizon: int | None
    infinite: bool = False
    per_t: dict = field(default_factory=dict)
    stabilized: bool | None = None

    def as_dict(self) -> dict:
        out = {
            "eps_p1": self.eps_p1, "eps_p2": self.eps_p2, "delta_p": self.delta_p,
            "eps_c1": self.eps_c1, "eps_c2": self.eps_c2, "delta_c": self.delta_c,
            "horizon": self.horizon, "infinite": self.infinite,
        }
        if self.stabilized is not None:
            out["stabilized"] = self.stabilized
        return out


def _next_obs_table(model: ModelSpec) -> dict:
    """(s, a) -> dict joint observation -> prob, and common-marginal variant."""
    full: dict = {}
    common: dict = {}
    for key, row in model.transition.items():
        f: dict = {}
        c: dict = {}
        for (s2, o2), q in row:
            f[o2] = f.get(o2, 0.0) + q
            c[o2[0]] = c.get(o2[0], 0.0) + q
        full[key] = f
        common[key] = c
    return {"full": full, "common": common}


def _tv(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def certify(
    model: ModelSpec,
    bundle: GeneratorBundle,
    T: int,
    traversal: str = "forward",
    tree: planner.CoordinatorTree | None = None,
    guard: int = planner.DEFAULT_TREE_GUARD,
    pool_layers: bool = False,
) -> Certification:
    """Exhaustively measure the bundle's prediction deviations up to horizon T.

    Private attributes quantify over reachable (common history, private
    histories, joint action) with the action treated as an intervention;
    common attributes quantify over reachable reduced histories and every
    deterministic reduced prescription of the history's AIS group.  With
    pool_layers (the time-invariant reading), common-side groups pool equal
    AIS values across time layers, matching the stationary fixed-point
    conditionals.
    """
    per_t: dict = {}
    obs_tables = _next_obs_table(model)
    if tree is None or tree.T < T:
        tree = planner.build_coordinator_tree(model, T, guard=guard, with_edges=False)
    rtree = compression.reduced_tree(model, bundle, T, guard=guard)
    maxima = {k: 0.0 for k in ("p1", "p2", "dp", "c1", "c2", "dc")}
    for t in range(1, T + 1):
        layer_max = {k: 0.0 for k in maxima}
        _certify_private_layer(model, bundle, tree.layers[t - 1], obs_tables, layer_max, traversal)
        if not pool_layers:
            _certify_common_groups(
                model, _group_reduced(bundle, [rtree[t - 1]]), obs_tables, layer_max, traversal
            )
        per_t[t] = dict(layer_max)
        for k in maxima:
            maxima[k] = max(maxima[k], layer_max[k])
    if pool_layers:
        pooled_max = {k: 0.0 for k in maxima}
        _certify_common_groups(
            model, _group_reduced(bundle, rtree), obs_tables, pooled_max, traversal
        )
        for k in ("c1", "c2", "dc"):
            maxima[k] = pooled_max[k]
        per_t["pooled"] = pooled_max
    return Certification(
        eps_p1=4.0 * maxima["p1"],
        eps_p2=4.0 * maxima["p2"],
        delta_p=8.0 * maxima["dp"],
        eps_c1=4.0 * maxima["c1"],
        eps_c2=4.0 * maxima["c2"],
        delta_c=8.0 * maxima["dc"],
        horizon=T,
        per_t=per_t,
    )


def _group_reduced(bundle, rlayers) -> dict:
    groups: dict = {}
    for rlayer in rlayers:
        for items, node in rlayer.items():
            z0 = compression.fold_common(bundle, items)
            groups.setdefault(z0, []).append(node)
    return groups


def _truncate_by_cert_work(bundle, rlayers, work_guard: int) -> list:
    """Drop the deepest reduced layers whose grouped certification sweep would
    exceed the work guard (group size times prescription count times support)."""
    kept = list(rlayers)
    while len(kept) > 2:
        work = 0
        for _z0, members in _group_reduced(bundle, kept).items():
            sets = [
                {zp[n] for m in members for _s, zp in m.cond}
                for n in range(bundle.num_agents)
            ]
            n_lam = 1
            for n in range(bundle.num_agents):
                n_lam *= len(bundle.model.actions[n]) ** len(sets[n])
            work += n_lam * sum(len(m.cond) for m in members)
        if work <= work_guard * 10:
            return kept
        kept.pop()
    return kept


def _certify_private_layer(model, bundle, layer, obs_tables, layer_max, traversal):
    nodes = sorted(layer.items(), key=lambda kv: sort_key(kv[0]))
    if traversal == "reversed":
        nodes = list(reversed(nodes))
    joint_actions = model.joint_actions()
    K = model.num_constraints
    for items, node in nodes:
        common_seq = items[::2]
        # conditional over states per full private profile and per AIS group
        by_hp: dict = {}
        by_zp: dict = {}
        zp_of: dict = {}
        for (s, hp), p in node.cond.items():
            zp = tuple(
                compression.fold_private(bundle, n, common_seq, hp[n])
                for n in range(model.num_agents)
            )
            zp_of[hp] = zp
            row = by_hp.setdefault(hp, {})
            row[s] = row.get(s, 0.0) + p
            row = by_zp.setdefault(zp, {})
            row[s] = row.get(s, 0.0) + p
        for group in (by_hp, by_zp):
            for key, dist in group.items():
                tot = sum(dist.values())
                group[key] = {s: v / tot for s, v in dist.items()}
        for hp, qf in by_hp.items():
            qg = by_zp[zp_of[hp]]
            if qf == qg:
                continue
            for a in joint_actions:
                ec_f = sum(p * model.cost_c[(s, a)] for s, p in qf.items())
                ec_g = sum(p * model.cost_c[(s, a)] for s, p in qg.items())
                layer_max["p1"] = max(layer_max["p1"], abs(ec_f - ec_g))
                for k in range(K):
                    ed_f = sum(p * model.cost_d[(s, a)][k] for s, p in qf.items())
                    ed_g = sum(p * model.cost_d[(s, a)][k] for s, p in qg.items())
                    layer_max["p2"] = max(layer_max["p2"], abs(ed_f - ed_g))
                po_f: dict = {}
                po_g: dict = {}
                for s, p in qf.items():
                    for o2, q in obs_tables["full"][(s, a)].items():
                        po_f[o2] = po_f.get(o2, 0.0) + p * q
                for s, p in qg.items():
                    for o2, q in obs_tables["full"][(s, a)].items():
                        po_g[o2] = po_g.get(o2, 0.0) + p * q
                layer_max["dp"] = max(layer_max["dp"], _tv(po_f, po_g))


def _certify_common_groups(model, groups, obs_tables, layer_max, traversal):
    K = model.num_constraints
    group_items = sorted(groups.items(), key=lambda kv: sort_key(kv[0]))
    if traversal == "reversed":
        group_items = list(reversed(group_items))
    for _z0, members in group_items:
        if len(members) == 1:
            continue
        total_w = sum(m.weight for m in members)
        pooled: dict = {}
        for m in members:
            for k, v in m.cond.items():
                pooled[k] = pooled.get(k, 0.0) + m.weight * v / total_w
        value_sets = [
            sorted({zp[n] for _s, zp in pooled}, key=sort_key)
            for n in range(model.num_agents)
        ]
        lamhats = compression.group_prescriptions(model, value_sets)
        for lh in lamhats:
            actions = [dict(lh.rows[n]) for n in range(model.num_agents)]
            ec_g, ed_g, po_g = _common_predictions(model, pooled, actions, obs_tables, K)
            for m in members:
                ec_m, ed_m, po_m = _common_predictions(model, m.cond, actions, obs_tables, K)
                layer_max["c1"] = max(layer_max["c1"], abs(ec_m - ec_g))
                for k in range(K):
                    layer_max["c2"] = max(layer_max["c2"], abs(ed_m[k] - ed_g[k]))
                layer_max["dc"] = max(layer_max["dc"], _tv(po_m, po_g))


def _common_predictions(model, cond, actions, obs_tables, K):
    ec = 0.0
    ed = [0.0] * K
    po: dict = {}
    for (s, zp), p in cond.items():
        a = tuple(actions[n][zp[n]] for n in range(model.num_agents))
        key = (s, a)
        ec += p * model.cost_c[key]
        dvec = model.cost_d[key]
        for k in range(K):
            ed[k] += p * dvec[k]
        for o0, q in obs_tables["common"][key].items():
            po[o0] = po.get(o0, 0.0) + p * q
    return ec, ed, po


def certify_infinite(
    model: ModelSpec,
    bundle: GeneratorBundle,
    T_cert: int = 6,
    traversal: str = "forward",
    stabilization_tol: float = 1e-9,
    work_guard: int = 200_000,
) -> Certification:
    """Certification for time-invariant bundles, pooled across time layers.

    Private and common attributes are measured to the deepest layer fitting
    the work guard, at most T_cert; common-side groups pool equal AIS values
    across time, matching the stationary fixed point's conditionals.
    `stabilized` reports whether the per-layer private maxima stopped
    changing over the last two measured layers, the empirical stand-in for
    quantification over all t.
    """
    if not bundle.time_invariant:
        raise ValueError("infinite-horizon certification needs a time-invariant bundle")
    obs_tables = _next_obs_table(model)
    tree = planner.build_coordinator_tree(
        model, T_cert, guard=work_guard, with_edges=False, best_effort=True
    )
    depth_p = min(tree.T, T_cert)
    per_t: dict = {}
    maxima = {k: 0.0 for k in ("p1", "p2", "dp", "c1", "c2", "dc")}
    for t in range(1, depth_p + 1):
        layer_max = {k: 0.0 for k in maxima}
        _certify_private_layer(model, bundle, tree.layers[t - 1], obs_tables, layer_max, traversal)
        per_t[t] = dict(layer_max)
        for k in ("p1", "p2", "dp"):
            maxima[k] = max(maxima[k], layer_max[k])
    rtree = compression.reduced_tree(
        model, bundle, T_cert, guard=min(work_guard, 20_000), best_effort=True
    )
    rtree = _truncate_by_cert_work(bundle, rtree, work_guard)
    pooled_max = {k: 0.0 for k in maxima}
    _certify_common_groups(model, _group_reduced(bundle, rtree), obs_tables, pooled_max, traversal)
    for k in ("c1", "c2", "dc"):
        maxima[k] = pooled_max[k]
    per_t["pooled"] = {"depth_common": len(rtree), **pooled_max}
    lastk = [per_t[t] for t in (depth_p - 1, depth_p)]
    stabilized = all(
        abs(lastk[0][k] - lastk[1][k]) <= stabilization_tol for k in ("p1", "p2", "dp")
    )
    return Certification(
        eps_p1=4.0 * maxima["p1"],
        eps_p2=4.0 * maxima["p2"],
        delta_p=8.0 * maxima["dp"],
        eps_c1=4.0 * maxima["c1"],
        eps_c2=4.0 * maxima["c2"],
        delta_c=8.0 * maxima["dc"],
        horizon=depth_p,
        infinite=True,
        per_t=per_t,
        stabilized=stabilized,
    )


@dataclass(frozen=True)
class GapBounds:
    """Closed-form optimality-gap terms for the compressed dynamic program."""

    M_c: float
    M_p: float
    N_term: float
    t: int | None
    T: int | None  # None means the infinite-horizon limits
    alpha: float
    lam: tuple

    @property
    def total(self) -> float:
        return self.M_c + self.M_p


def gap_bounds(
    cert: Certification,
    t: int | None,
    T: int | None,
    alpha: float,
    lam: Sequence[float],
    model: ModelSpec,
) -> GapBounds:
    """M_c and M_p for the given stage/horizon, or their T -> infinity limits
    (T=None), via geometric sums."""
    lam1 = float(np.sum(np.abs(lam)))
    b = model.cost_bounds()
    spread = 0.5 * (max(model.kappa) - min(model.kappa))
    per_step_n = b["c_abs"] + lam1 * (b["d_abs"] + spread)
    if T is None:
        if not (0.0 < alpha < 1.0):
            raise ValueError("infinite-horizon limits need discount in (0,1)")
        N = per_step_n / (1.0 - alpha)
        s_inner = 1.0 / (1.0 - alpha)
        s_outer = 1.0 / (1.0 - alpha)
        double = 1.0 / (1.0 - alpha) ** 2
    else:
        if t is None or t > T:
            raise ValueError("need 1 <= t <= T for finite-horizon bounds")
        N = sum(alpha ** (tau - 1) for tau in range(1, T + 1)) * per_step_n
        s_inner = sum(alpha ** (T - tau) for tau in range(t + 1, T + 1))
        s_outer = sum(alpha ** (T - tau) for tau in range(t, T + 1))
        double = sum(
            alpha ** (i + j)
            for i in range(0, T - t)
            for j in range(0, T - t - i)
        )
    M_c = (cert.eps_c1 + lam1 * cert.eps_c2) + alpha * s_inner * (
        cert.eps_c1 + cert.eps_c2 * lam1 + N * cert.delta_c
    )
    M_p = (cert.eps_p1 + lam1 * cert.eps_p2) * s_outer + alpha * double * (
        cert.eps_p1 + lam1 * cert.eps_p2 + N * cert.delta_p
    )
    return GapBounds(M_c=M_c, M_p=M_p, N_term=N, t=t, T=T, alpha=alpha, lam=tuple(lam))


def check_finite_gap(
    model: ModelSpec,
    bundle: GeneratorBundle,
    lam: Sequence[float],
    T: int,
    tolerance: float = 1e-9,
    tree: planner.CoordinatorTree | None = None,
    cert: Certification | None = None,
) -> dict:
    """Measure max over initial histories of (compressed value - exact value)
    and compare against M_c + M_p."""
    exact = planner.exact_dp(model, lam, T, tree=tree)
    comp = planner.compressed_dp(model, bundle, lam, T)
    gaps = {}
    for items in exact.tree.layers[0]:
        z0 = compression.initial_common_value(bundle, items[0])
        gaps[items[0]] = comp.V[0][z0] - exact.V[0][items]
    measured = max(gaps.values())
    if cert is None:
        cert = certify(model, bundle, T, tree=exact.tree)
    bounds = gap_bounds(cert, 1, T, model.discount, lam, model)
    holds = (-tolerance <= measured <= bounds.total + tolerance)
    return {
        "measured_gap": measured,
        "per_initial_obs": gaps,
        "bound": bounds.total,
        "M_c": bounds.M_c,
        "M_p": bounds.M_p,
        "certification": cert.as_dict(),
        "holds": bool(holds),
    }


def check_infinite_gap(
    model: ModelSpec,
    bundle: GeneratorBundle,
    lam: Sequence[float],
    tol: float = 1e-3,
    value_proxy: Callable | None = None,
    T_cert: int = 6,
    build_horizon: int = 10,
    guard: int = planner.DEFAULT_TREE_GUARD,
) -> dict:
    """Check the infinite-horizon sandwich: the compressed fixed point upper
    bounds the true value and undershoots it by at most M_c + M_p.

    The true value is bracketed by a long-horizon proxy plus the
    finite-to-infinite envelope.  The proxy is the exact program when it fits
    the guard, else `value_proxy(lam, T)` (an independent exact-value oracle,
    e.g. the stage-decoupled solver for the frozen-state fixtures).
    """
    alpha = model.discount
    lo_c, hi_c = planner.lambda_cost_bounds(model, lam)
    scale = max(abs(lo_c), abs(hi_c), 1e-12)
    T_proxy = max(2, int(math.ceil(math.log(tol / (10.0 * scale) * (1.0 - alpha)) / math.log(alpha))))

    fp = planner.value_iteration(model, bundle, lam, tol=tol / 10.0, build_horizon=build_horizon)
    cert = certify_infinite(model, bundle, T_cert=T_cert)
    bounds = gap_bounds(cert, None, None, alpha, lam, model)

    proxy_values = None
    proxy_source = None
    if value_proxy is not None:
        proxy_values = value_proxy(lam, T_proxy)
        proxy_source = "oracle"
    else:
        try:
            tables = planner.exact_dp(model, lam, T_proxy, guard=guard)
            proxy_values = {items[0]: tables.V[0][items] for items in tables.tree.layers[0]}
            proxy_source = "exact"
        except EnumerationLimitError:
            pass
    if proxy_values is None:
        feasible = _largest_feasible_horizon(model, guard)
        return {
            "holds": False,
            "reason": "proxy horizon infeasible",
            "largest_feasible_T": feasible,
            "T_proxy": T_proxy,
        }

    report = {
        "T_proxy": T_proxy,
        "proxy_source": proxy_source,
        "M_c": bounds.M_c,
        "M_p": bounds.M_p,
        "fixed_point_iterations": fp.iterations,
        "certification": cert.as_dict(),
        "per_initial_obs": {},
    }
    holds = True
    for o0, v_proxy in proxy_values.items():
        lo, hi = planner.finite_horizon_envelope(v_proxy, 1, T_proxy, alpha, lam, model)
        z0 = compression.initial_common_value(bundle, o0)
        v_hat = fp.V[z0]
        upper_ok = v_hat >= lo - tol
        lower_ok = v_hat - bounds.total <= hi + tol
        holds = holds and upper_ok and lower_ok
        report["per_initial_obs"][o0] = {
            "fixed_point": v_hat,
            "value_interval": (lo, hi),
            "upper_ok": bool(upper_ok),
            "lower_ok": bool(lower_ok),
        }
    report["holds"] = bool(holds)
    return report


def _largest_feasible_horizon(model: ModelSpec, guard: int) -> int:
    t = 1
    while t < 64:
        try:
            planner.build_coordinator_tree(model, t + 1, guard=guard)
        except EnumerationLimitError:
            return t
        t += 1
    return t
