"""Lagrangian machinery: dual function, projected supergradient ascent,
multiplier cap from a strictly feasible policy, saddle diagnostics, mixture
replication, and a brute-force primal oracle for single-agent instances.

The Lagrangian here is C_T(u) + <lam, D_T(u) - kappa> with kappa subtracted
once; the planner's per-step tables subtract <lam, kappa> each discounted
step, and the conversion between the two is a policy-independent constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coordinator import CoordinationPolicy, coordination_to_behavioral
from .model import (
    BehavioralPolicy,
    Distribution,
    EnumerationLimitError,
    ModelSpec,
    enumerate_histories,
    evaluate_memoryless,
    exact_evaluate,
)
from .planner import (
    CoordinatorTree,
    build_coordinator_tree,
    enumerate_coordination_policies,
    exact_dp,
)

__all__ = [
    "SlaterViolationError",
    "DualPoint",
    "DualResult",
    "MixturePolicy",
    "lagrangian",
    "dual_function",
    "lambda_upper_bound",
    "slater_cap",
    "resolve_slater_policy",
    "dual_ascent",
    "primal_oracle",
    "replicate_mixture",
    "mixture_occupation",
    "mixture_evaluate",
    "check_saddle",
]


class SlaterViolationError(ValueError):
    """The declared strictly feasible policy has nonpositive slack."""


def lagrangian(C: float, D: Sequence[float], lam: Sequence[float], kappa: Sequence[float]) -> float:
    """C + <lam, D - kappa>."""
    D = np.asarray(D, dtype=float)
    lam = np.asarray(lam, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if not (D.shape == lam.shape == kappa.shape):
        raise ValueError(f"dimension mismatch: D{D.shape}, lam{lam.shape}, kappa{kappa.shape}")
    return float(C + lam @ (D - kappa))


@dataclass
class DualPoint:
    """Dual function evaluated at one multiplier."""

    lam: tuple
    value: float
    supergradient: np.ndarray  # D_T(minimizer) - kappa
    minimizer: CoordinationPolicy
    C: float
    D: np.ndarray


def dual_function(
    model: ModelSpec,
    lam: Sequence[float],
    T: int,
    tree: CoordinatorTree | None = None,
) -> DualPoint:
    """inf_u L_T(u, lam) via the exact dynamic program at one multiplier.

    The value is recomputed independently of the backward tables: the DP
    minimizer is converted to a behavioral profile and evaluated exactly.
    """
    tables = exact_dp(model, lam, T, tree=tree)
    v_star = tables.policy(name=f"dual@{tuple(lam)}")
    u = coordination_to_behavioral(v_star, model, T)
    C, D = exact_evaluate(model, u, T)
    value = lagrangian(C, D, lam, model.kappa)
    return DualPoint(
        lam=tuple(float(x) for x in lam),
        value=value,
        supergradient=D - np.asarray(model.kappa),
        minimizer=v_star,
        C=C,
        D=D,
    )


def lambda_upper_bound(C_of_feasible: float, c_low: float, alpha: float, zeta: float) -> float:
    """Cap on the optimal multiplier's 1-norm from a strictly feasible policy:
    (C(u_bar) - c_low/(1-alpha)) / zeta."""
    if zeta <= 0.0:
        raise SlaterViolationError(f"Slater slack must be positive, got {zeta}")
    return (C_of_feasible - c_low / (1.0 - alpha)) / zeta


def resolve_slater_policy(model: ModelSpec) -> tuple[list[Distribution], float]:
    """Per-agent action distributions and slack from the model's declared
    strictly feasible (memoryless) policy."""
    if not model.slater:
        raise SlaterViolationError("model declares no strictly feasible policy")
    ref = model.slater["policy"]
    zeta = float(model.slater["zeta"])
    if ref == "uniform":
        dists = [Distribution.uniform(model.actions[n]) for n in range(model.num_agents)]
    elif ref.startswith("always:"):
        acts = ref.split(":", 1)[1].split(",")
        if len(acts) != model.num_agents:
            raise ValueError(f"slater policy {ref!r} does not name one action per agent")
        dists = [Distribution.point(model.actions[n], acts[n]) for n in range(model.num_agents)]
    else:
        raise ValueError(f"unknown slater policy reference {ref!r}")
    return dists, zeta


def slater_cap(model: ModelSpec, tail_tol: float = 1e-12) -> float:
    """Multiplier cap for the model's declared Slater pair.

    The infinite-horizon cost of the reference policy is bracketed from above
    by a finite evaluation plus the discounted worst-case tail, which keeps
    the cap valid.
    """
    dists, zeta = resolve_slater_policy(model)
    alpha = model.discount
    bounds = model.cost_bounds()
    T_eval = max(1, int(np.ceil(np.log(tail_tol) / np.log(alpha))))
    C_T, _D = evaluate_memoryless(model, dists, T_eval)
    C_up = C_T + alpha**T_eval / (1.0 - alpha) * bounds["c_up"]
    return lambda_upper_bound(C_up, bounds["c_low"], alpha, zeta)


@dataclass
class DualResult:
    lam_star: tuple
    dual_value: float
    minimizer: CoordinationPolicy
    supergradient: np.ndarray
    comp_slack_residual: float
    iterations: int
    converged: bool
    lambda_max: float
    C: float
    D: np.ndarray
    mixture: "MixturePolicy | None" = None
    mixture_value: float | None = None
    mixture_label: str = ""
    history: list = field(default_factory=list)


def dual_ascent(
    model: ModelSpec,
    T: int,
    iters: int = 80,
    lambda_max: float | None = None,
    step0: float | None = None,
    polish: bool = True,
    tol: float = 1e-9,
    tree: CoordinatorTree | None = None,
) -> DualResult:
    """Projected supergradient ascent on the concave dual, best-iterate kept.

    Steps delta_i = step0/sqrt(i), projection onto [0, lambda_max]^K.  For a
    single constraint the maximizer is afterwards polished by bisection on the
    supergradient sign, which the piecewise-linear dual makes exact.
    """
    K = model.num_constraints
    if lambda_max is None:
        lambda_max = slater_cap(model)
    if step0 is None:
        step0 = lambda_max / 10.0 if lambda_max > 0 else 0.0
    if tree is None:
        tree = build_coordinator_tree(model, T)

    lam = np.zeros(K)
    best: DualPoint = dual_function(model, lam, T, tree=tree)
    history = [(tuple(lam), best.value)]
    evals = 1
    for i in range(1, iters + 1):
        point = dual_function(model, lam, T, tree=tree)
        evals += 1
        if point.value > best.value + tol:
            best = point
        history.append((tuple(lam), point.value))
        step = step0 / np.sqrt(i)
        lam = np.clip(lam + step * point.supergradient, 0.0, lambda_max)

    converged = True
    if polish and K == 1 and lambda_max > 0:
        best = _bisect_polish(model, T, tree, lambda_max, best)
        evals += 62
    elif K > 1:
        # no exactness guarantee for K>1; report best-so-far convergence status
        recent = [v for _l, v in history[-10:]]
        converged = (max(recent) - min(recent)) <= max(1e-6, 1e-6 * abs(best.value))

    residual = abs(float(np.dot(best.lam, best.supergradient)))
    result = DualResult(
        lam_star=best.lam,
        dual_value=best.value,
        minimizer=best.minimizer,
        supergradient=best.supergradient,
        comp_slack_residual=residual,
        iterations=evals,
        converged=converged,
        lambda_max=lambda_max,
        C=best.C,
        D=best.D,
        history=history,
    )
    if K == 1:
        _restore_feasibility(model, T, tree, result)
    return result


def _bisect_polish(model: ModelSpec, T: int, tree, lambda_max: float, best: DualPoint) -> DualPoint:
    g0 = dual_function(model, np.zeros(1), T, tree=tree)
    if g0.supergradient[0] <= 0.0:
        return g0 if g0.value >= best.value else best
    ghi = dual_function(model, np.array([lambda_max]), T, tree=tree)
    if ghi.supergradient[0] >= 0.0:
        return ghi if ghi.value >= best.value else best
    lo, hi = 0.0, lambda_max
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        gm = dual_function(model, np.array([mid]), T, tree=tree)
        if gm.value > best.value:
            best = gm
        if gm.supergradient[0] > 0.0:
            lo = mid
        else:
            hi = mid
    return best


def _restore_feasibility(model: ModelSpec, T: int, tree, result: DualResult):
    """Mix the two vertex minimizers bracketing D = kappa (K = 1 only)."""
    kappa = model.kappa[0]
    lam = result.lam_star[0]
    eps = max(1e-7, 1e-7 * max(lam, 1.0))
    lo_pt = dual_function(model, [max(lam - eps, 0.0)], T, tree=tree)
    hi_pt = dual_function(model, [lam + eps], T, tree=tree)
    D_lo, D_hi = float(lo_pt.D[0]), float(hi_pt.D[0])
    if abs(result.D[0] - kappa) <= 1e-12:
        return
    if not (D_hi <= kappa <= D_lo) or D_lo <= D_hi:
        return
    w = (kappa - D_hi) / (D_lo - D_hi)
    u_lo = coordination_to_behavioral(lo_pt.minimizer, model, T)
    u_hi = coordination_to_behavioral(hi_pt.minimizer, model, T)
    mixture = MixturePolicy.two_point(model, u_lo, w, u_hi, 1.0 - w)
    C_mix, D_mix = mixture_evaluate(model, mixture, T)
    result.mixture = mixture
    result.mixture_value = float(C_mix)
    result.mixture_label = (
        "primal certificate" if model.num_agents == 1 else "centralized-mixing upper bound"
    )
    del D_mix


@dataclass(frozen=True)
class MixturePolicy:
    """Per-agent mixtures of deterministic policies, no common randomness.

    components[n] is a tuple of (rule, weight) where rule maps
    (common history, private history) to an action id.
    """

    model: ModelSpec
    components: tuple

    def __post_init__(self):
        for n, comps in enumerate(self.components):
            total = sum(w for _r, w in comps)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"agent {n} mixture weights sum to {total}")
            if any(w < 0 for _r, w in comps):
                raise ValueError(f"agent {n} mixture has a negative weight")

    @staticmethod
    def two_point(model: ModelSpec, u_a: BehavioralPolicy, w_a: float,
                  u_b: BehavioralPolicy, w_b: float) -> "MixturePolicy":
        comps = []
        for n in range(model.num_agents):
            ra = _deterministic_rule(u_a, n)
            rb = _deterministic_rule(u_b, n)
            comps.append(((ra, w_a), (rb, w_b)))
        return MixturePolicy(model, tuple(comps))

    def profiles(self):
        """Iterate (joint deterministic profile as BehavioralPolicy, weight)."""
        combos = [((), 1.0)]
        for comps in self.components:
            combos = [(c + (r,), w * wr) for c, w in combos for r, wr in comps]
        for rules, w in combos:
            if w <= 0.0:
                continue
            policy = BehavioralPolicy(
                self.model,
                [_rule_as_distribution(self.model, n, r) for n, r in enumerate(rules)],
            )
            yield policy, w


def _deterministic_rule(policy: BehavioralPolicy, n: int) -> Callable:
    def rule(common, private):
        dist = policy.action_dist(n, common, private)
        i = int(np.argmax(dist.probs))
        if dist.probs[i] < 1.0 - 1e-12:
            raise ValueError("component policy is not deterministic")
        return dist.ids[i]

    return rule


def _rule_as_distribution(model: ModelSpec, n: int, rule: Callable) -> Callable:
    acts = model.actions[n]

    def dist_rule(common, private):
        return Distribution.point(acts, rule(common, private))

    return dist_rule


def mixture_occupation(model: ModelSpec, mixture: MixturePolicy, T: int) -> list[dict]:
    """Mixture-averaged occupation measures: per t, (history, action) -> prob."""
    layers = [dict() for _ in range(T)]
    for policy, w in mixture.profiles():
        occ = enumerate_histories(model, policy, T)
        for t in range(T):
            for key, p in occ[t].items():
                layers[t][key] = layers[t].get(key, 0.0) + w * p
    return layers


def mixture_evaluate(model: ModelSpec, mixture: MixturePolicy, T: int) -> tuple[float, np.ndarray]:
    C = 0.0
    D = np.zeros(model.num_constraints)
    for policy, w in mixture.profiles():
        Cp, Dp = exact_evaluate(model, policy, T)
        C += w * Cp
        D += w * Dp
    return C, D


def replicate_mixture(model: ModelSpec, mixture: MixturePolicy, T: int) -> BehavioralPolicy:
    """Behavioral profile with the same occupation measures as the mixture.

    Agent n's row at (h0, hn) is the mixture's posterior-predictive action
    distribution given that the agent's own past actions match hn; rows with
    zero posterior mass default to the uniform distribution.
    """

    def make(n):
        comps = mixture.components[n]
        acts = model.actions[n]

        def rule(common, private):
            t = len(common)
            weights = []
            for r, w in comps:
                consistent = True
                for tau in range(1, t):
                    prefix_c = common[:tau]
                    prefix_p = private[: 2 * tau - 1]
                    if r(prefix_c, prefix_p) != private[2 * tau - 1]:
                        consistent = False
                        break
                weights.append(w if consistent else 0.0)
            total = sum(weights)
            if total <= 0.0:
                return Distribution.uniform(acts)
            probs = [0.0] * len(acts)
            for (r, _w), wgt in zip(comps, weights):
                if wgt > 0.0:
                    probs[acts.index(r(common, private))] += wgt / total
            return Distribution(tuple(acts), tuple(probs))

        return rule

    return BehavioralPolicy(model, [make(n) for n in range(model.num_agents)], name="replicated-mixture")


def primal_oracle(
    model: ModelSpec,
    T: int,
    policy_guard: int = 10**5,
) -> tuple[float, list[tuple[float, float]]]:
    """Brute-force primal value for N=1, K=1.

    Enumerates every deterministic history-dependent policy, takes the lower
    convex envelope of the resulting (D_T, C_T) points (single-agent mixtures
    realize the hull), and reads off min{C : D <= kappa}; +inf if no point of
    the hull is feasible.
    """
    if model.num_agents != 1:
        raise ValueError("primal oracle supports single-agent models only")
    if model.num_constraints != 1:
        raise ValueError("primal oracle supports a single constraint only")
    tree = build_coordinator_tree(model, T)
    policies = enumerate_coordination_policies(tree)
    if len(policies) > policy_guard:
        raise EnumerationLimitError(
            f"deterministic policy count {len(policies)} exceeds guard {policy_guard}"
        )
    points = []
    for v in policies:
        u = coordination_to_behavioral(v, model, T)
        C, D = exact_evaluate(model, u, T)
        points.append((float(D[0]), float(C)))
    kappa = model.kappa[0]
    hull = _lower_hull(points)
    feasible_c = [c for d, c in hull if d <= kappa + 1e-12]
    if hull and hull[0][0] <= kappa < hull[-1][0]:
        # interpolated envelope point exactly at D = kappa
        for (d1, c1), (d2, c2) in zip(hull, hull[1:]):
            if d1 <= kappa <= d2 and d2 > d1:
                feasible_c.append(c1 + (c2 - c1) * (kappa - d1) / (d2 - d1))
                break
    if not feasible_c:
        return float("inf"), points
    return min(feasible_c), points


def _lower_hull(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    pts = sorted(set(points))
    if len(pts) <= 1:
        return pts
    hull: list[tuple[float, float]] = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (p[0] - x1) * (y2 - y1) <= 0.0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


@dataclass
class SaddleReport:
    max_violation: float
    left_violation: float  # max over lam probes of L(u*, lam) - L(u*, lam*)
    right_violation: float  # max over policy probes of L(u*, lam*) - L(u, lam*)
    comp_slack_residual: float
    value: float


def check_saddle(
    model: ModelSpec,
    u_candidate,
    lam_candidate: Sequence[float],
    T: int,
    lam_probes: Sequence[Sequence[float]],
    policy_probes: Sequence[BehavioralPolicy],
) -> SaddleReport:
    """Probe L(u*, lam) <= L(u*, lam*) <= L(u, lam*); violations are data."""
    lam_star = np.asarray(lam_candidate, dtype=float)
    if isinstance(u_candidate, MixturePolicy):
        C_star, D_star = mixture_evaluate(model, u_candidate, T)
    else:
        C_star, D_star = exact_evaluate(model, u_candidate, T)
    value = lagrangian(C_star, D_star, lam_star, model.kappa)
    left = 0.0
    for lam in lam_probes:
        left = max(left, lagrangian(C_star, D_star, lam, model.kappa) - value)
    right = 0.0
    for u in policy_probes:
        Cu, Du = exact_evaluate(model, u, T)
        right = max(right, value - lagrangian(Cu, Du, lam_star, model.kappa))
    residual = abs(float(lam_star @ (np.asarray(D_star) - np.asarray(model.kappa))))
    return SaddleReport(
        max_violation=max(left, right),
        left_violation=left,
        right_violation=right,
        comp_slack_residual=residual,
        value=value,
    )
