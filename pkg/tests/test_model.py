import numpy as np
import pytest

from teampomdp.model import (
    BehavioralPolicy,
    Distribution,
    EnumerationLimitError,
    ModelSpec,
    enumerate_histories,
    enumerate_joint_law,
    evaluate_memoryless,
    exact_evaluate,
    sample_trajectory,
    validate,
)


def test_validate_fixtures_ok(models):
    for name, m in models.items():
        rep = validate(m)
        assert rep.ok, (name, rep.messages())


def test_validate_reports_bad_row_sum(models):
    m = models["const"]
    broken = ModelSpec(
        num_agents=m.num_agents, states=m.states, common_obs=m.common_obs,
        private_obs=m.private_obs, actions=m.actions,
        transition={k: [(so, 0.9 * p) for so, p in v] for k, v in m.transition.items()},
        cost_c=m.cost_c, cost_d=m.cost_d, initial=m.initial,
        discount=m.discount, kappa=m.kappa,
    )
    rep = validate(broken)
    assert not rep.ok
    assert any("sums to 0.9" in msg for msg in rep.messages())


def test_validate_reports_discount_out_of_range(models):
    m = models["const"]
    bad = ModelSpec(
        num_agents=m.num_agents, states=m.states, common_obs=m.common_obs,
        private_obs=m.private_obs, actions=m.actions, transition=m.transition,
        cost_c=m.cost_c, cost_d=m.cost_d, initial=m.initial,
        discount=1.0, kappa=m.kappa,
    )
    rep = validate(bad)
    assert any("discount not in (0,1)" in msg for msg in rep.messages())


def test_distribution_invariants():
    with pytest.raises(ValueError):
        Distribution(("a",), (0.5,))
    with pytest.raises(ValueError):
        Distribution(("a", "b"), (0.7, 0.4))
    d = Distribution.uniform(("a", "b"))
    assert d.prob("a") == 0.5


def test_enumerate_histories_const_uniform(models):
    occ = enumerate_histories(models["const"], BehavioralPolicy.uniform(models["const"]), 1)
    assert len(occ[0]) == 4
    assert all(abs(p - 0.25) < 1e-12 for p in occ[0].values())


def test_enumerate_histories_deterministic_single_path(models):
    m = models["const"]
    occ = enumerate_histories(m, BehavioralPolicy.always(m, ["a0", "a0"]), 2)
    for layer in occ:
        positive = [p for p in layer.values() if p > 0]
        assert len(positive) == 1
        assert abs(positive[0] - 1.0) < 1e-12


def test_enumerate_histories_bind1_half(models):
    m = models["bind1"]
    policy = BehavioralPolicy.stationary(m, [Distribution(("a0", "a1"), (0.5, 0.5))])
    occ = enumerate_histories(m, policy, 2)
    assert len(occ[1]) == 4
    assert all(abs(p - 0.25) < 1e-12 for p in occ[1].values())


def test_enumerate_histories_layers_sum_to_one(models):
    for name, m in models.items():
        occ = enumerate_histories(m, BehavioralPolicy.uniform(m), 3)
        for layer in occ:
            assert abs(sum(layer.values()) - 1.0) < 1e-10, name


def test_blow_up_guard_names_offending_t(models):
    with pytest.raises(EnumerationLimitError, match="t=3"):
        enumerate_joint_law(models["bind1c"], BehavioralPolicy.uniform(models["bind1c"]), 3, guard=50)


def test_exact_evaluate_const(models):
    C, D = exact_evaluate(models["const"], BehavioralPolicy.uniform(models["const"]), 3)
    assert abs(C - 1.75) < 1e-12
    assert abs(D[0] - 0.875) < 1e-12


def test_exact_evaluate_zero(models):
    for T in (1, 2, 3):
        C, D = exact_evaluate(models["zero"], BehavioralPolicy.uniform(models["zero"]), T)
        assert C == 0.0 and D[0] == 0.0


def test_exact_evaluate_bind1_mixture(models):
    m = models["bind1"]
    q = BehavioralPolicy.stationary(m, [Distribution(("a0", "a1"), (0.5, 0.5))])
    C, D = exact_evaluate(m, q, 3)
    assert abs(C - 0.875) < 1e-12
    assert abs(D[0] - 0.875) < 1e-12


def test_exact_evaluate_within_cost_bounds(models):
    for name, m in models.items():
        b = m.cost_bounds()
        for T in (1, 3):
            C, D = exact_evaluate(m, BehavioralPolicy.uniform(m), T)
            cap = (1 - m.discount**T) / (1 - m.discount)
            assert abs(C) <= b["c_abs"] * cap + 1e-12, name
            assert np.max(np.abs(D)) <= b["d_abs"] * cap + 1e-12, name


def test_exact_evaluate_matches_occupation_sum(models):
    # internal consistency: cost from enumerate_histories output
    for name in ("const", "bind1", "bind1c"):
        m = models[name]
        policy = BehavioralPolicy.uniform(m)
        T = 3 if name != "bind1c" else 2
        layers = enumerate_joint_law(m, policy, T)
        occ = enumerate_histories(m, policy, T)
        C = 0.0
        for t, layer in enumerate(occ, start=1):
            cond_cost = {}
            for (s, h), p in layers[t - 1].items():
                for n_a, pa in _joint(policy, h):
                    cond_cost[(h, n_a)] = cond_cost.get((h, n_a), 0.0) + p * m.cost_c[(s, n_a)]
            for (h, a), p in layer.items():
                C += m.discount ** (t - 1) * cond_cost[(h, a)]
        C_direct, _ = exact_evaluate(m, policy, T)
        assert abs(C - C_direct) < 1e-10, name


def _joint(policy, h):
    dists = policy.joint_action_dists(h)
    combos = [((), 1.0)]
    for d in dists:
        combos = [(ja + (i,), pj * pi) for ja, pj in combos for i, pi in zip(d.ids, d.probs) if pi > 0]
    return combos


def test_exact_evaluate_invariant_under_relabeling(models):
    m = models["bind1c"]
    mapping = {"sA": "sZ", "sB": "sY"}
    relabeled = ModelSpec(
        num_agents=m.num_agents,
        states=[mapping[s] for s in m.states],
        common_obs=m.common_obs,
        private_obs=m.private_obs,
        actions=m.actions,
        transition={(mapping[s], a): [((mapping[s2], o), p) for (s2, o), p in row]
                    for (s, a), row in m.transition.items()},
        cost_c={(mapping[s], a): c for (s, a), c in m.cost_c.items()},
        cost_d={(mapping[s], a): d for (s, a), d in m.cost_d.items()},
        initial=[((mapping[s], o), p) for (s, o), p in m.initial],
        discount=m.discount,
        kappa=m.kappa,
    )
    C1, D1 = exact_evaluate(m, BehavioralPolicy.uniform(m), 2)
    C2, D2 = exact_evaluate(relabeled, BehavioralPolicy.uniform(relabeled), 2)
    assert abs(C1 - C2) < 1e-12
    assert abs(D1[0] - D2[0]) < 1e-12


def test_sample_trajectory_const_costs(models):
    m = models["const"]
    traj = sample_trajectory(m, BehavioralPolicy.uniform(m), 5, seed=7)
    assert traj.costs_c == (1.0,) * 5
    assert all(d == (0.5,) for d in traj.costs_d)


def test_sample_trajectory_deterministic_path_seed_independent(models):
    m = models["const"]
    policy = BehavioralPolicy.always(m, ["a1", "a0"])
    t1 = sample_trajectory(m, policy, 4, seed=1)
    t2 = sample_trajectory(m, policy, 4, seed=999)
    assert t1.actions == t2.actions
    assert t1.observations == t2.observations


def test_sample_trajectory_reproducible(models):
    m = models["bind1c"]
    policy = BehavioralPolicy.uniform(m)
    t1 = sample_trajectory(m, policy, 6, seed=42)
    t2 = sample_trajectory(m, policy, 6, seed=42)
    assert t1 == t2


def test_joint_action_probability_factorizes(models):
    # log-prob of a joint action equals the sum of per-agent log-probs
    m = models["bind1c"]
    policy = BehavioralPolicy.uniform(m)
    law = enumerate_joint_law(m, policy, 2)
    for (s, h), _p in list(law[1].items())[:5]:
        dists = policy.joint_action_dists(h)
        for a, pa in _joint(policy, h):
            per_agent = sum(np.log(dists[n].prob(a[n])) for n in range(m.num_agents))
            assert abs(np.log(pa) - per_agent) < 1e-12


def test_monte_carlo_matches_exact(models):
    m = models["bind1"]
    policy = BehavioralPolicy.stationary(m, [Distribution(("a0", "a1"), (0.5, 0.5))])
    C_exact, D_exact = exact_evaluate(m, policy, 1)
    n = 20_000
    rng_costs = []
    for i in range(n):
        traj = sample_trajectory(m, policy, 1, seed=(123, i))
        rng_costs.append(traj.costs_c[0])
    mean = np.mean(rng_costs)
    sigma = np.std(rng_costs) / np.sqrt(n)
    assert abs(mean - C_exact) <= 3 * sigma + 1e-12


def test_evaluate_memoryless_matches_enumeration(models):
    for name in ("const", "bind1", "bind1c"):
        m = models[name]
        dists = [Distribution.uniform(m.actions[n]) for n in range(m.num_agents)]
        C1, D1 = evaluate_memoryless(m, dists, 3)
        C2, D2 = exact_evaluate(m, BehavioralPolicy.uniform(m), 3)
        assert abs(C1 - C2) < 1e-12, name
        assert np.allclose(D1, D2, atol=1e-12), name
