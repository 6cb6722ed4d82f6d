"""Common-information coordinator: prescriptions, prescription-observation
histories, and the equivalence map back to decentralized behavioral policies.

A prescription assigns each agent a rule from private histories (or their
compressed values) to action distributions.  A coordination policy picks a
deterministic prescription from the coordinator's prescription-observation
history; running it is equivalent to a decentralized behavioral profile.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import (
    BehavioralPolicy,
    Distribution,
    EnumerationLimitError,
    ModelSpec,
)

__all__ = [
    "Prescription",
    "DeterministicPrescription",
    "PrescriptionHistory",
    "CoordinationPolicy",
    "IncompleteCoordinationPolicyError",
    "PrescriptionDomainError",
    "sort_key",
    "enumerate_deterministic_prescriptions",
    "reachable_private_sets",
    "coordination_to_behavioral",
    "apply_prescription",
]

DEFAULT_PRESCRIPTION_GUARD = 10**5


class IncompleteCoordinationPolicyError(KeyError):
    """A reachable prescription history has no assigned prescription."""


class PrescriptionDomainError(KeyError):
    """A private history lies outside a prescription's domain."""


def sort_key(value):
    """Deterministic total order over heterogeneous hashable AIS/history values."""
    return repr(value)


@dataclass(frozen=True)
class Prescription:
    """Per-agent map from private histories (or AIS values) to action distributions."""

    rows: tuple  # tuple over agents of tuples ((key, Distribution), ...)

    @staticmethod
    def from_maps(maps: Sequence[Mapping]) -> "Prescription":
        rows = tuple(
            tuple(sorted(m.items(), key=lambda kv: sort_key(kv[0]))) for m in maps
        )
        return Prescription(rows)

    def row(self, n: int, key) -> Distribution:
        for k, dist in self.rows[n]:
            if k == key:
                return dist
        raise PrescriptionDomainError(f"agent {n} prescription has no row for {key!r}")

    def domain(self, n: int) -> tuple:
        return tuple(k for k, _ in self.rows[n])


@dataclass(frozen=True)
class DeterministicPrescription:
    """Prescription whose rows are single actions (point-mass special case)."""

    rows: tuple  # tuple over agents of tuples ((key, action_id), ...)

    @staticmethod
    def from_maps(maps: Sequence[Mapping]) -> "DeterministicPrescription":
        rows = tuple(
            tuple(sorted(m.items(), key=lambda kv: sort_key(kv[0]))) for m in maps
        )
        return DeterministicPrescription(rows)

    def action(self, n: int, key) -> str:
        for k, a in self.rows[n]:
            if k == key:
                return a
        raise PrescriptionDomainError(f"agent {n} prescription has no row for {key!r}")

    def joint_action(self, keys: Sequence) -> tuple:
        return tuple(self.action(n, k) for n, k in enumerate(keys))

    def as_prescription(self, model: ModelSpec) -> Prescription:
        maps = [
            {k: Distribution.point(model.actions[n], a) for k, a in self.rows[n]}
            for n in range(len(self.rows))
        ]
        return Prescription.from_maps(maps)

    @property
    def key(self) -> tuple:
        return self.rows


@dataclass(frozen=True)
class PrescriptionHistory:
    """Alternating (o^0_1, gamma_1, o^0_2, ..., o^0_t) sequence.

    Stored as a flat tuple where prescriptions appear via their canonical keys,
    so instances are hashable and usable as dynamic-programming node ids.
    """

    items: tuple

    @property
    def t(self) -> int:
        return (len(self.items) + 1) // 2

    def common_history(self) -> tuple:
        return self.items[::2]

    def prescriptions(self) -> tuple:
        return self.items[1::2]

    def extend(self, gamma_key, common_obs) -> "PrescriptionHistory":
        return PrescriptionHistory(self.items + (gamma_key, common_obs))

    @staticmethod
    def initial(common_obs) -> "PrescriptionHistory":
        return PrescriptionHistory((common_obs,))


class CoordinationPolicy:
    """Deterministic map from prescription histories to prescriptions, per t."""

    def __init__(self, assignments: Sequence[Mapping], name: str = ""):
        # assignments[t-1]: dict PrescriptionHistory.items -> DeterministicPrescription
        self.assignments = tuple(dict(a) for a in assignments)
        self.name = name

    @property
    def horizon(self) -> int:
        return len(self.assignments)

    def prescription(self, t: int, history: PrescriptionHistory) -> DeterministicPrescription:
        if t < 1 or t > self.horizon:
            raise IncompleteCoordinationPolicyError(f"no assignment layer for t={t}")
        try:
            return self.assignments[t - 1][history.items]
        except KeyError:
            raise IncompleteCoordinationPolicyError(
                f"no prescription for reachable history {history.items!r} at t={t}"
            ) from None

    @staticmethod
    def constant(model: ModelSpec, actions_per_agent: Sequence[str], T: int,
                 private_sets_per_t: Sequence[Sequence[Sequence]]) -> "CoordinationPolicy":
        """Always issue the same action to every private history (helper for tests)."""
        assignments = []
        for t in range(1, T + 1):
            gamma = DeterministicPrescription.from_maps(
                [{k: actions_per_agent[n] for k in private_sets_per_t[t - 1][n]}
                 for n in range(model.num_agents)]
            )
            assignments.append(_ConstantLayer(gamma))
        return CoordinationPolicy(assignments, name="constant")


class _ConstantLayer(dict):
    """Layer returning one fixed prescription for every history."""

    def __init__(self, gamma):
        super().__init__()
        self._gamma = gamma

    def __missing__(self, key):
        return self._gamma


def enumerate_deterministic_prescriptions(
    model: ModelSpec,
    private_sets: Sequence[Sequence],
    guard: int = DEFAULT_PRESCRIPTION_GUARD,
) -> list[DeterministicPrescription]:
    """All deterministic prescriptions over the given per-agent private sets.

    The list is complete, duplicate-free and lexicographically ordered by
    (agent index, private-history encoding, action index); downstream argmin
    ties resolve to the first element, which makes this order part of the
    contract.
    """
    count = 1
    for n in range(model.num_agents):
        count *= len(model.actions[n]) ** len(private_sets[n])
    if count > guard:
        raise EnumerationLimitError(
            f"deterministic prescription count {count} exceeds guard {guard}"
        )
    per_agent_domains = [sorted(set(ps), key=sort_key) for ps in private_sets]
    digit_spaces = []
    for n in range(model.num_agents):
        for _ in per_agent_domains[n]:
            digit_spaces.append(model.actions[n])
    out = []
    for combo in itertools.product(*digit_spaces):
        maps = []
        i = 0
        for n in range(model.num_agents):
            dom = per_agent_domains[n]
            maps.append({k: combo[i + j] for j, k in enumerate(dom)})
            i += len(dom)
        out.append(DeterministicPrescription.from_maps(maps))
    return out


def reachable_private_sets(model: ModelSpec, T: int) -> list[list[tuple]]:
    """Per t, per agent: private histories with positive probability under
    at least one policy (all action branches explored)."""
    layer = set()
    for (s, o), p in model.initial:
        if p > 0.0:
            _, priv = model.split_obs(o)
            layer.add((s, tuple((po,) for po in priv)))
    out = []
    joint_actions = model.joint_actions()
    for t in range(1, T + 1):
        per_agent = [sorted({hp[n] for _, hp in layer}, key=sort_key) for n in range(model.num_agents)]
        out.append(per_agent)
        if t == T:
            break
        nxt = set()
        for s, hp in layer:
            for a in joint_actions:
                for (s2, o2), q in model.transition[(s, a)]:
                    if q > 0.0:
                        _, priv2 = model.split_obs(o2)
                        nxt.add((s2, tuple(hp[n] + (a[n], priv2[n]) for n in range(model.num_agents))))
        layer = nxt
    return out


def apply_prescription(gamma, n: int, private_history, seed) -> str:
    """Draw agent n's action from its prescription row; deterministic rows
    ignore the seed."""
    if isinstance(gamma, DeterministicPrescription):
        return gamma.action(n, private_history)
    dist = gamma.row(n, private_history)
    return dist.sample(np.random.default_rng(seed))


def coordination_to_behavioral(v: CoordinationPolicy, model: ModelSpec, T: int) -> BehavioralPolicy:
    """Equivalent decentralized profile: u_t^n(h^0, h^n) is the row of the
    prescription that v issues at the prescription history generated by h^0."""

    cache: dict = {}

    def prescription_at(common: tuple) -> DeterministicPrescription:
        if common in cache:
            return cache[common]
        h = PrescriptionHistory.initial(common[0])
        for tau in range(1, len(common)):
            g = v.prescription(tau, h)
            h = h.extend(g.key, common[tau])
        g = v.prescription(len(common), h)
        cache[common] = g
        return g

    def make(n):
        acts = model.actions[n]

        def rule(common, private):
            g = prescription_at(common)
            return Distribution.point(acts, g.action(n, private))

        return rule

    return BehavioralPolicy(model, [make(n) for n in range(model.num_agents)], name=f"coord:{v.name}")
