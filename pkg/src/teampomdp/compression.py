"""Forward enumeration of compressed coordinated systems.

Two views of the same process are provided.  `reduced_tree` enumerates the
coordinator's reduced-prescription-observation histories explicitly, node by
node.  `pooled_layers` propagates the joint law of
(state, private AIS profile, common AIS value) directly, which merges tree
nodes that share a common AIS value and therefore stays small for long
horizons whenever the AIS ranges are small.

Both use the same reference measure: at each step, every common-AIS group
branches uniformly over its set of deterministic reduced prescriptions.
Grouping the reduced tree by common AIS value reproduces the pooled law
exactly (the joint process is Markov in (state, AIS profile) given the
prescription), which is asserted by tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .coordinator import (
    DeterministicPrescription,
    enumerate_deterministic_prescriptions,
    sort_key,
)
from .model import EnumerationLimitError, ModelSpec

__all__ = [
    "PooledNode",
    "ReducedNode",
    "fold_private",
    "fold_common",
    "group_prescriptions",
    "pooled_layers",
    "reduced_tree",
    "initial_common_value",
]

DEFAULT_SUPPORT_GUARD = 10**6


@dataclass
class PooledNode:
    """One common-AIS value in a pooled layer."""

    z0: object
    weight: float = 0.0
    cond: dict = field(default_factory=dict)  # (state, zp profile) -> prob (normalized)

    def private_value_sets(self, num_agents: int) -> list[list]:
        return [
            sorted({zp[n] for _s, zp in self.cond}, key=sort_key)
            for n in range(num_agents)
        ]


@dataclass
class ReducedNode:
    """One reduced-prescription-observation history."""

    items: tuple  # (o1, lamhat_key, o2, ..., ot)
    weight: float = 0.0
    cond: dict = field(default_factory=dict)  # (state, zp profile) -> prob


def fold_private(bundle, n: int, common_seq, private_seq) -> object:
    """Private AIS value by iterating the recursive update along a history.

    `private_seq` is the agent's private history (o_1, a_1, o_2, ..., o_t);
    `common_seq` the common observations (o^0_1, ..., o^0_t).
    """
    z = bundle.private_init[n]
    prev_action = None
    for i, o0 in enumerate(common_seq):
        opriv = private_seq[2 * i]
        z = bundle.private_update[n](z, o0, opriv, prev_action)
        if 2 * i + 1 < len(private_seq):
            prev_action = private_seq[2 * i + 1]
    return z


def fold_common(bundle, reduced_items: tuple) -> object:
    """Common AIS value by iterating the recursive update along a reduced history."""
    z = bundle.common_init
    prev_lam = None
    for i in range(0, len(reduced_items), 2):
        z = bundle.common_update(z, prev_lam, reduced_items[i])
        if i + 1 < len(reduced_items):
            prev_lam = reduced_items[i + 1]
    return z


def initial_common_value(bundle, common_obs) -> object:
    return bundle.common_update(bundle.common_init, None, common_obs)


def group_prescriptions(
    model: ModelSpec,
    value_sets: list[list],
    guard: int = 10**5,
) -> list[DeterministicPrescription]:
    """Deterministic reduced prescriptions over realized per-agent AIS values."""
    return enumerate_deterministic_prescriptions(model, value_sets, guard=guard)


def _initial_pooled(model: ModelSpec, bundle) -> dict:
    layer: dict = {}
    for (s, o), p in model.initial:
        if p <= 0.0:
            continue
        o0, priv = model.split_obs(o)
        z0 = initial_common_value(bundle, o0)
        zp = tuple(bundle.private_update[n](bundle.private_init[n], o0, priv[n], None)
                   for n in range(model.num_agents))
        node = layer.setdefault(z0, PooledNode(z0))
        node.weight += p
        node.cond[(s, zp)] = node.cond.get((s, zp), 0.0) + p
    for node in layer.values():
        _normalize(node)
    return layer


def _normalize(node):
    w = node.weight
    node.cond = {k: v / w for k, v in node.cond.items()}


def transition_prep(model: ModelSpec) -> dict:
    """(s, a) -> ((common obs, private parts, next state, prob), ...)."""
    return {
        key: tuple((o2[0], o2[1:], s2, q) for (s2, o2), q in row if q > 0.0)
        for key, row in model.transition.items()
    }


def pooled_layers(
    model: ModelSpec,
    bundle,
    T: int,
    guard: int = DEFAULT_SUPPORT_GUARD,
    prescription_guard: int = 10**5,
) -> list[dict]:
    """Per t: dict common-AIS value -> PooledNode, under uniform branching."""
    layers = [_initial_pooled(model, bundle)]
    total = sum(len(n.cond) for n in layers[0].values())
    N = model.num_agents
    trans = transition_prep(model)
    for t in range(2, T + 1):
        cur = layers[-1]
        nxt: dict = {}
        priv_cache: dict = {}
        for z0, node in cur.items():
            value_sets = node.private_value_sets(N)
            lamhats = group_prescriptions(model, value_sets, guard=prescription_guard)
            share = node.weight / len(lamhats)
            zps = sorted({zp for _s, zp in node.cond}, key=sort_key)
            for lam in lamhats:
                actions = [dict(lam.rows[n]) for n in range(N)]
                a_of = {zp: tuple(actions[n][zp[n]] for n in range(N)) for zp in zps}
                z0n_of: dict = {}
                for (s, zp), p in node.cond.items():
                    a = a_of[zp]
                    for o0, priv2, s2, q in trans[(s, a)]:
                        z0n = z0n_of.get(o0)
                        if z0n is None:
                            z0n = bundle.common_update(z0, lam.key, o0)
                            z0n_of[o0] = z0n
                        pkey = (zp, o0, priv2, a)
                        zpn = priv_cache.get(pkey)
                        if zpn is None:
                            zpn = tuple(
                                bundle.private_update[n](zp[n], o0, priv2[n], a[n])
                                for n in range(N)
                            )
                            priv_cache[pkey] = zpn
                        child = nxt.get(z0n)
                        if child is None:
                            child = nxt[z0n] = PooledNode(z0n)
                        mass = share * p * q
                        child.weight += mass
                        ck = (s2, zpn)
                        child.cond[ck] = child.cond.get(ck, 0.0) + mass
        for node in nxt.values():
            _normalize(node)
        layers.append(nxt)
        total += sum(len(n.cond) for n in nxt.values())
        if total > guard:
            raise EnumerationLimitError(
                f"pooled AIS support exceeds guard ({total} > {guard}) at t={t}"
            )
    return layers


def reduced_tree(
    model: ModelSpec,
    bundle,
    T: int,
    guard: int = DEFAULT_SUPPORT_GUARD,
    prescription_guard: int = 10**5,
    best_effort: bool = False,
) -> list[dict]:
    """Per t: dict reduced-history items -> ReducedNode.

    Branching uses each node's common-AIS group prescription set, so the tree
    is the unmerged counterpart of `pooled_layers`.  `best_effort` truncates
    at the deepest layer fitting the guard instead of raising.
    """
    first: dict = {}
    for (s, o), p in model.initial:
        if p <= 0.0:
            continue
        o0, priv = model.split_obs(o)
        items = (o0,)
        zp = tuple(bundle.private_update[n](bundle.private_init[n], o0, priv[n], None)
                   for n in range(model.num_agents))
        node = first.setdefault(items, ReducedNode(items))
        node.weight += p
        node.cond[(s, zp)] = node.cond.get((s, zp), 0.0) + p
    for node in first.values():
        _normalize(node)
    layers = [first]
    total = len(first)
    model_obs = len(model.common_obs)
    for t in range(2, T + 1):
        cur = layers[-1]
        groups = _group_by_common_value(bundle, cur)
        projected = total + sum(
            len(members) * len(lamhats) * model_obs
            for members, lamhats in groups.values()
        )
        if projected > guard:
            if best_effort and t > 2:
                return layers
            raise EnumerationLimitError(
                f"reduced tree exceeds guard ({projected} > {guard}) at t={t}"
            )
        nxt: dict = {}
        for _z0, (members, lamhats) in groups.items():
            share = 1.0 / len(lamhats)
            for items in members:
                node = cur[items]
                for lam in lamhats:
                    actions = [dict(lam.rows[n]) for n in range(model.num_agents)]
                    for (s, zp), p in node.cond.items():
                        a = tuple(actions[n][zp[n]] for n in range(model.num_agents))
                        for (s2, o2), q in model.transition[(s, a)]:
                            if q <= 0.0:
                                continue
                            o0, priv2 = model.split_obs(o2)
                            child_items = items + (lam.key, o0)
                            zpn = tuple(
                                bundle.private_update[n](zp[n], o0, priv2[n], a[n])
                                for n in range(model.num_agents)
                            )
                            child = nxt.setdefault(child_items, ReducedNode(child_items))
                            mass = node.weight * share * p * q
                            child.weight += mass
                            child.cond[(s2, zpn)] = child.cond.get((s2, zpn), 0.0) + mass
        for node in nxt.values():
            _normalize(node)
        layers.append(nxt)
        total += len(nxt)
        if total > guard:
            raise EnumerationLimitError(
                f"reduced tree exceeds guard ({total} > {guard}) at t={t}"
            )
    return layers


def _group_by_common_value(bundle, layer: dict) -> dict:
    """z0 -> (member item tuples, shared reduced-prescription list)."""
    groups: dict = {}
    for items, node in layer.items():
        z0 = fold_common(bundle, items)
        groups.setdefault(z0, []).append(items)
    out = {}
    for z0, members in sorted(groups.items(), key=lambda kv: sort_key(kv[0])):
        value_sets = [
            sorted(
                {zp[n] for m in members for _s, zp in layer[m].cond},
                key=sort_key,
            )
            for n in range(bundle.num_agents)
        ]
        model = bundle.model
        lamhats = group_prescriptions(model, value_sets)
        out[z0] = (sorted(members, key=sort_key), lamhats)
    return out
