"""Finite cooperative multi-agent constrained POMDP: model data, exact evaluation, sampling.

A model is a finite tuple (N agents, states, factored observations, per-agent
actions, transition law, scalar cost c, vector cost d, initial distribution,
discount, constraint thresholds kappa).  Everything here is exact: policies are
evaluated by enumerating the joint law of (state, joint history), and a
Monte-Carlo sampler is provided for the learning side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Distribution",
    "ModelSpec",
    "JointHistory",
    "BehavioralPolicy",
    "RawTrajectory",
    "ValidationReport",
    "EnumerationLimitError",
    "ModelValidationError",
    "validate",
    "enumerate_joint_law",
    "enumerate_histories",
    "exact_evaluate",
    "evaluate_memoryless",
    "sample_trajectory",
]

PROB_TOL = 1e-12
DEFAULT_HISTORY_GUARD = 10**6


class ModelValidationError(ValueError):
    """Raised when an operation requires a valid model and validation fails."""


class EnumerationLimitError(RuntimeError):
    """Raised when an exact enumeration would exceed its configured guard."""


@dataclass(frozen=True)
class Distribution:
    """Probability distribution over a finite set of ids."""

    ids: tuple
    probs: tuple

    def __post_init__(self):
        if len(self.ids) != len(self.probs):
            raise ValueError("ids and probs length mismatch")
        if any(p < -PROB_TOL for p in self.probs):
            raise ValueError("negative probability")
        if abs(sum(self.probs) - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {sum(self.probs)}, not 1")

    def prob(self, x) -> float:
        for i, p in zip(self.ids, self.probs):
            if i == x:
                return p
        return 0.0

    def sample(self, rng: np.random.Generator):
        u = rng.random()
        acc = 0.0
        for i, p in zip(self.ids, self.probs):
            acc += p
            if u < acc:
                return i
        return self.ids[-1]

    @staticmethod
    def point(ids: Sequence, x) -> "Distribution":
        return Distribution(tuple(ids), tuple(1.0 if i == x else 0.0 for i in ids))

    @staticmethod
    def uniform(ids: Sequence) -> "Distribution":
        n = len(ids)
        return Distribution(tuple(ids), tuple(1.0 / n for _ in ids))


@dataclass(frozen=True)
class JointHistory:
    """Joint history at time t: common observation sequence plus per-agent
    private sequences (private observations interleaved with own actions)."""

    common: tuple
    private: tuple  # tuple of per-agent tuples
    t: int

    def agent_view(self, n: int) -> tuple:
        return (self.common, self.private[n])


@dataclass(frozen=True)
class RawTrajectory:
    """One sampled episode.  Hidden states are retained for debugging only."""

    observations: tuple  # joint observation per step, length T (+ optional extra)
    actions: tuple  # joint action per step, length T
    costs_c: tuple
    costs_d: tuple  # tuple of K-vectors
    states: tuple  # hidden; length matches observations

    @property
    def horizon(self) -> int:
        return len(self.actions)


class ModelSpec:
    """Finite MA-C-POMDP specification.

    Ids are strings.  A joint observation is a tuple
    ``(common, private_1, ..., private_N)`` and a joint action a tuple
    ``(a_1, ..., a_N)``.  ``transition`` maps ``(state, joint_action)`` to a
    list of ``((next_state, joint_obs), prob)`` entries; ``initial`` is a list
    of ``((state, joint_obs), prob)`` entries.
    """

    def __init__(
        self,
        num_agents: int,
        states: Sequence[str],
        common_obs: Sequence[str],
        private_obs: Sequence[Sequence[str]],
        actions: Sequence[Sequence[str]],
        transition: Mapping,
        cost_c: Mapping,
        cost_d: Mapping,
        initial: Sequence,
        discount: float,
        kappa: Sequence[float],
        name: str = "",
        slater: dict | None = None,
    ):
        self.num_agents = int(num_agents)
        self.states = tuple(states)
        self.common_obs = tuple(common_obs)
        self.private_obs = tuple(tuple(o) for o in private_obs)
        self.actions = tuple(tuple(a) for a in actions)
        self.transition = {k: tuple((tuple(so), float(p)) for so, p in v) for k, v in transition.items()}
        self.cost_c = dict(cost_c)
        self.cost_d = {k: tuple(float(x) for x in v) for k, v in cost_d.items()}
        self.initial = tuple((tuple(so), float(p)) for so, p in initial)
        self.discount = float(discount)
        self.kappa = tuple(float(k) for k in kappa)
        self.name = name
        self.slater = dict(slater) if slater else None

    # -- derived quantities -------------------------------------------------

    @property
    def num_constraints(self) -> int:
        return len(self.kappa)

    def joint_actions(self) -> list[tuple]:
        out = [()]
        for acts in self.actions:
            out = [ja + (a,) for ja in out for a in acts]
        return out

    def cost_bounds(self) -> dict:
        """Bounds c_low, c_up, d_low, d_up (elementwise) over the cost tables."""
        cs = [self.cost_c[k] for k in self.cost_c]
        ds = np.array([self.cost_d[k] for k in self.cost_d], dtype=float)
        return {
            "c_low": min(cs),
            "c_up": max(cs),
            "d_low": ds.min(axis=0),
            "d_up": ds.max(axis=0),
            "c_abs": max(abs(min(cs)), abs(max(cs))),
            "d_abs": float(np.abs(ds).max()) if ds.size else 0.0,
        }

    def split_obs(self, joint_obs: tuple) -> tuple:
        """(common, (private_1, ..., private_N)) components of a joint observation."""
        return joint_obs[0], tuple(joint_obs[1:])

    def lambda_step_cost(self, s, a: tuple, lam: Sequence[float]) -> float:
        """Multiplier-parametrized one-step cost c + <lam, d - kappa>."""
        lam = tuple(lam)
        if len(lam) != self.num_constraints:
            raise ValueError(f"multiplier length {len(lam)} != K={self.num_constraints}")
        d = self.cost_d[(s, a)]
        return self.cost_c[(s, a)] + sum(l * (dk - kk) for l, dk, kk in zip(lam, d, self.kappa))


@dataclass
class ValidationReport:
    """Outcome of validate(): never raises, carries every violation found."""

    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(sev == "error" for sev, _ in self.violations)

    def add(self, message: str, severity: str = "error"):
        self.violations.append((severity, message))

    def messages(self) -> list[str]:
        return [m for _, m in self.violations]


def validate(model: ModelSpec) -> ValidationReport:
    """Check probability rows, table completeness, discount range and K consistency."""
    rep = ValidationReport()
    K = model.num_constraints
    if model.num_agents < 1:
        rep.add("num_agents must be >= 1")
    if not (0.0 < model.discount < 1.0):
        rep.add("discount not in (0,1)")

    for entry, p in model.initial:
        if p < 0:
            rep.add(f"initial entry {entry} has negative probability {p}")
    total = sum(p for _, p in model.initial)
    if abs(total - 1.0) > PROB_TOL:
        rep.add(f"initial distribution sums to {total}")
    for (s, o), _ in model.initial:
        if s not in model.states:
            rep.add(f"initial references unknown state {s}")
        _check_obs(model, o, rep, "initial")

    joint_actions = model.joint_actions()
    for s in model.states:
        for a in joint_actions:
            key = (s, a)
            if key not in model.transition:
                rep.add(f"transition row missing for ({s},{a})")
                continue
            row = model.transition[key]
            rowsum = sum(p for _, p in row)
            if abs(rowsum - 1.0) > PROB_TOL:
                rep.add(f"row ({s},{a}) sums to {rowsum:g}")
            for (s2, o), p in row:
                if p < 0:
                    rep.add(f"row ({s},{a}) has negative probability {p}")
                if s2 not in model.states:
                    rep.add(f"row ({s},{a}) references unknown state {s2}")
                _check_obs(model, o, rep, f"row ({s},{a})")
            if key not in model.cost_c:
                rep.add(f"cost_c missing entry ({s},{a})")
            if key not in model.cost_d:
                rep.add(f"cost_d missing entry ({s},{a})")
            elif len(model.cost_d[key]) != K:
                rep.add(f"cost_d entry ({s},{a}) has length {len(model.cost_d[key])}, kappa has {K}")

    for key, c in model.cost_c.items():
        if not np.isfinite(c):
            rep.add(f"cost_c entry {key} not finite")
    for key, d in model.cost_d.items():
        if not all(np.isfinite(x) for x in d):
            rep.add(f"cost_d entry {key} not finite")
    return rep


def _check_obs(model: ModelSpec, o: tuple, rep: ValidationReport, where: str):
    if len(o) != model.num_agents + 1:
        rep.add(f"{where}: joint observation {o} does not factor into 1+N components")
        return
    if o[0] not in model.common_obs:
        rep.add(f"{where}: unknown common observation {o[0]}")
    for n in range(model.num_agents):
        if o[n + 1] not in model.private_obs[n]:
            rep.add(f"{where}: unknown private observation {o[n + 1]} for agent {n}")


def _require_valid(model: ModelSpec):
    rep = validate(model)
    if not rep.ok:
        raise ModelValidationError("; ".join(rep.messages()[:5]))


class BehavioralPolicy:
    """Decentralized behavioral policy profile.

    Each agent n owns a rule mapping (common history, private history) to a
    Distribution over its own actions; the joint-action probability factorizes
    across agents.
    """

    def __init__(self, model: ModelSpec, rules: Sequence[Callable], name: str = ""):
        if len(rules) != model.num_agents:
            raise ValueError("one rule per agent required")
        self.model = model
        self.rules = tuple(rules)
        self.name = name

    def action_dist(self, n: int, common: tuple, private: tuple) -> Distribution:
        return self.rules[n](common, private)

    def joint_action_prob(self, history: JointHistory, action: tuple) -> float:
        p = 1.0
        for n in range(self.model.num_agents):
            p *= self.action_dist(n, history.common, history.private[n]).prob(action[n])
        return p

    def joint_action_dists(self, history: JointHistory) -> list[Distribution]:
        return [self.action_dist(n, history.common, history.private[n]) for n in range(self.model.num_agents)]

    # -- constructors ---------------------------------------------------------

    @staticmethod
    def uniform(model: ModelSpec) -> "BehavioralPolicy":
        rules = [
            (lambda acts: (lambda c, h: Distribution.uniform(acts)))(model.actions[n])
            for n in range(model.num_agents)
        ]
        return BehavioralPolicy(model, rules, name="uniform")

    @staticmethod
    def always(model: ModelSpec, actions_per_agent: Sequence[str]) -> "BehavioralPolicy":
        rules = [
            (lambda acts, a: (lambda c, h: Distribution.point(acts, a)))(model.actions[n], actions_per_agent[n])
            for n in range(model.num_agents)
        ]
        return BehavioralPolicy(model, rules, name="always:" + ",".join(actions_per_agent))

    @staticmethod
    def stationary(model: ModelSpec, dists: Sequence[Distribution]) -> "BehavioralPolicy":
        rules = [(lambda d: (lambda c, h: d))(dists[n]) for n in range(model.num_agents)]
        return BehavioralPolicy(model, rules, name="stationary")

    @staticmethod
    def from_tables(model: ModelSpec, tables: Sequence[Mapping], default: str = "error") -> "BehavioralPolicy":
        """tables[n] maps (common, private) -> Distribution; default='uniform' fills gaps."""

        def make(n):
            table = tables[n]
            acts = model.actions[n]

            def rule(common, private):
                key = (common, private)
                if key in table:
                    return table[key]
                if default == "uniform":
                    return Distribution.uniform(acts)
                raise KeyError(f"policy for agent {n} undefined at {key}")

            return rule

        return BehavioralPolicy(model, [make(n) for n in range(model.num_agents)])


def _initial_joint_law(model: ModelSpec) -> dict:
    """dict (state, JointHistory) -> prob at t=1."""
    law: dict = {}
    for (s, o), p in model.initial:
        if p <= 0.0:
            continue
        common, priv = model.split_obs(o)
        h = JointHistory(common=(common,), private=tuple((po,) for po in priv), t=1)
        law[(s, h)] = law.get((s, h), 0.0) + p
    return law


def _advance_joint_law(model: ModelSpec, law: dict, policy: BehavioralPolicy) -> dict:
    """One exact forward step of the joint (state, history) law under a policy."""
    nxt: dict = {}
    for (s, h), p in law.items():
        dists = policy.joint_action_dists(h)
        for a, pa in _joint_action_iter(dists):
            if pa <= 0.0:
                continue
            for (s2, o2), q in model.transition[(s, a)]:
                if q <= 0.0:
                    continue
                common2, priv2 = model.split_obs(o2)
                h2 = JointHistory(
                    common=h.common + (common2,),
                    private=tuple(h.private[n] + (a[n], priv2[n]) for n in range(model.num_agents)),
                    t=h.t + 1,
                )
                key = (s2, h2)
                nxt[key] = nxt.get(key, 0.0) + p * pa * q
    return nxt


def _joint_action_iter(dists: Sequence[Distribution]) -> Iterable[tuple]:
    """Iterate (joint action, probability) as the product of per-agent rows."""
    combos = [((), 1.0)]
    for d in dists:
        combos = [(ja + (i,), pj * pi) for ja, pj in combos for i, pi in zip(d.ids, d.probs) if pi > 0.0]
    return combos


def enumerate_joint_law(
    model: ModelSpec,
    policy: BehavioralPolicy,
    T: int,
    guard: int = DEFAULT_HISTORY_GUARD,
) -> list[dict]:
    """Exact joint law of (state, joint history) for t = 1..T.

    Returns a list of dicts, one per t, mapping (state, JointHistory) to
    probability.  Unreachable entries are dropped.  Raises
    EnumerationLimitError if the cumulative support would exceed `guard`.
    """
    _require_valid(model)
    if T < 1:
        raise ValueError("T must be >= 1")
    layers = [_initial_joint_law(model)]
    total = len(layers[0])
    num_joint_actions = len(model.joint_actions())
    for t in range(2, T + 1):
        layers.append(_advance_joint_law(model, layers[-1], policy))
        total += len(layers[-1]) * num_joint_actions
        if total > guard:
            raise EnumerationLimitError(
                f"history enumeration exceeds guard ({total} > {guard}) at t={t}"
            )
    return layers


def enumerate_histories(
    model: ModelSpec,
    policy: BehavioralPolicy,
    T: int,
    guard: int = DEFAULT_HISTORY_GUARD,
) -> list[dict]:
    """Occupation measures: for each t, dict (JointHistory, joint action) -> prob."""
    layers = enumerate_joint_law(model, policy, T, guard)
    out = []
    for law in layers:
        hist_p: dict = {}
        for (s, h), p in law.items():
            hist_p[h] = hist_p.get(h, 0.0) + p
        occ: dict = {}
        for h, ph in hist_p.items():
            for a, pa in _joint_action_iter(policy.joint_action_dists(h)):
                if ph * pa > 0.0:
                    occ[(h, a)] = occ.get((h, a), 0.0) + ph * pa
        out.append(occ)
    return out


def exact_evaluate(
    model: ModelSpec,
    policy: BehavioralPolicy,
    T: int,
    guard: int = DEFAULT_HISTORY_GUARD,
) -> tuple[float, np.ndarray]:
    """(C_T, D_T): discounted expected costs over horizon T, by exact summation."""
    layers = enumerate_joint_law(model, policy, T, guard)
    alpha = model.discount
    C = 0.0
    D = np.zeros(model.num_constraints)
    for t, law in enumerate(layers, start=1):
        disc = alpha ** (t - 1)
        for (s, h), p in law.items():
            for a, pa in _joint_action_iter(policy.joint_action_dists(h)):
                w = p * pa
                if w <= 0.0:
                    continue
                C += disc * w * model.cost_c[(s, a)]
                D += disc * w * np.asarray(model.cost_d[(s, a)])
    return C, D


def evaluate_memoryless(
    model: ModelSpec,
    dists: Sequence[Distribution],
    T: int,
) -> tuple[float, np.ndarray]:
    """Exact (C_T, D_T) for a history-independent policy, via the state marginal.

    Used for Slater reference policies where the full history enumeration
    would be wasteful; the per-step expected cost only needs the state law.
    """
    _require_valid(model)
    mu = {}
    for (s, _o), p in model.initial:
        mu[s] = mu.get(s, 0.0) + p
    alpha = model.discount
    joint = list(_joint_action_iter(dists))
    C = 0.0
    D = np.zeros(model.num_constraints)
    for t in range(1, T + 1):
        disc = alpha ** (t - 1)
        nxt: dict = {}
        for s, p in mu.items():
            for a, pa in joint:
                w = p * pa
                C += disc * w * model.cost_c[(s, a)]
                D += disc * w * np.asarray(model.cost_d[(s, a)])
                if t < T:
                    for (s2, _o2), q in model.transition[(s, a)]:
                        nxt[s2] = nxt.get(s2, 0.0) + w * q
        if t < T:
            mu = nxt
    return C, D


def sample_trajectory(
    model: ModelSpec,
    policy: BehavioralPolicy,
    T: int,
    seed,
    record_next_obs: bool = False,
) -> RawTrajectory:
    """Simulate one episode of horizon T; reproducible for a given seed.

    Step order: draw (state, observation), each agent acts on its
    (common, private) history, costs are incurred, the transition fires.
    """
    _require_valid(model)
    rng = np.random.default_rng(seed)
    s, o = _draw(model.initial, rng)
    common, priv = model.split_obs(o)
    h = JointHistory(common=(common,), private=tuple((po,) for po in priv), t=1)
    observations, actions, costs_c, costs_d, states = [o], [], [], [], [s]
    for t in range(1, T + 1):
        a = tuple(policy.action_dist(n, h.common, h.private[n]).sample(rng) for n in range(model.num_agents))
        actions.append(a)
        costs_c.append(model.cost_c[(s, a)])
        costs_d.append(model.cost_d[(s, a)])
        s2, o2 = _draw(model.transition[(s, a)], rng)
        if t < T or record_next_obs:
            observations.append(o2)
            states.append(s2)
        if t < T:
            common2, priv2 = model.split_obs(o2)
            h = JointHistory(
                common=h.common + (common2,),
                private=tuple(h.private[n] + (a[n], priv2[n]) for n in range(model.num_agents)),
                t=t + 1,
            )
            s = s2
    return RawTrajectory(
        observations=tuple(observations),
        actions=tuple(actions),
        costs_c=tuple(costs_c),
        costs_d=tuple(costs_d),
        states=tuple(states),
    )


def _draw(entries, rng: np.random.Generator):
    u = rng.random()
    acc = 0.0
    for item, p in entries:
        acc += p
        if u < acc:
            return item
    return entries[-1][0]
