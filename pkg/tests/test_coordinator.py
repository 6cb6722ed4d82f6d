import numpy as np
import pytest

from teampomdp.coordinator import (
    CoordinationPolicy,
    DeterministicPrescription,
    IncompleteCoordinationPolicyError,
    Prescription,
    PrescriptionDomainError,
    PrescriptionHistory,
    apply_prescription,
    coordination_to_behavioral,
    enumerate_deterministic_prescriptions,
    reachable_private_sets,
)
from teampomdp.model import (
    Distribution,
    EnumerationLimitError,
    exact_evaluate,
)
from teampomdp.planner import enumerate_coordination_policies, exact_dp


def test_enumeration_counts_basic(models):
    m = models["const"]  # 2 agents, 2 actions each
    out = enumerate_deterministic_prescriptions(m, [[("x",)], [("x",)]])
    assert len(out) == 4
    m1 = models["bind1"]
    with3 = enumerate_deterministic_prescriptions(m1, [[("x",), ("x", "a0", "x")]])
    assert len(with3) == 4  # |A|^2 with |A| = 2


def test_enumeration_const_t2_is_16(models):
    m = models["const"]
    sets = reachable_private_sets(m, 2)
    assert [len(s) for s in sets[1]] == [2, 2]
    out = enumerate_deterministic_prescriptions(m, sets[1])
    assert len(out) == 16


def test_enumeration_lexicographic_and_duplicate_free(models):
    m = models["const"]
    sets = reachable_private_sets(m, 2)[1]
    out = enumerate_deterministic_prescriptions(m, sets)
    keys = [g.key for g in out]
    assert len(set(keys)) == len(keys)
    # first element assigns the first action everywhere
    first = out[0]
    for n in range(m.num_agents):
        assert all(a == m.actions[n][0] for _k, a in first.rows[n])
    # size contract
    assert len(out) == np.prod([len(m.actions[n]) ** len(sets[n]) for n in range(2)])


def test_enumeration_guard(models):
    m = models["bind1c"]
    sets = [[(i,) for i in range(20)], [("y",)]]
    with pytest.raises(EnumerationLimitError):
        enumerate_deterministic_prescriptions(m, sets, guard=1000)


def test_apply_prescription_point_mass(models):
    m = models["bind1"]
    gamma = DeterministicPrescription.from_maps([{("x",): "a1"}])
    for seed in (0, 1, 2):
        assert apply_prescription(gamma, 0, ("x",), seed) == "a1"


def test_apply_prescription_uniform_statistics(models):
    m = models["bind1"]
    row = Distribution.uniform(("a0", "a1"))
    gamma = Prescription.from_maps([{("x",): row}])
    draws = [apply_prescription(gamma, 0, ("x",), seed) for seed in range(10_000)]
    frac = np.mean([a == "a1" for a in draws])
    sigma = 0.5 / np.sqrt(len(draws))
    assert abs(frac - 0.5) <= 3 * sigma


def test_apply_prescription_domain_error():
    gamma = DeterministicPrescription.from_maps([{}])
    with pytest.raises(PrescriptionDomainError):
        apply_prescription(gamma, 0, ("unknown",), 0)


def test_coordination_to_behavioral_constant(models):
    m = models["const"]
    sets = reachable_private_sets(m, 2)
    v = CoordinationPolicy.constant(m, ["a0", "a0"], 2, sets)
    u = coordination_to_behavioral(v, m, 2)
    d = u.action_dist(0, ("c0",), ("x",))
    assert d.prob("a0") == 1.0


def test_coordination_to_behavioral_single_stage_identity(models):
    m = models["const"]
    gamma = DeterministicPrescription.from_maps([{("x",): "a1"}, {("x",): "a0"}])
    v = CoordinationPolicy([{("c0",): gamma}])
    u = coordination_to_behavioral(v, m, 1)
    assert u.action_dist(0, ("c0",), ("x",)).prob("a1") == 1.0
    assert u.action_dist(1, ("c0",), ("x",)).prob("a0") == 1.0


def test_coordination_to_behavioral_missing_history(models):
    m = models["const"]
    v = CoordinationPolicy([{}])
    u = coordination_to_behavioral(v, m, 1)
    with pytest.raises(IncompleteCoordinationPolicyError):
        u.action_dist(0, ("c0",), ("x",))


def test_equivalence_of_coordination_and_behavioral_values(models, trees):
    # the DP-optimal coordination policy evaluates identically through the
    # behavioral conversion, for every fixture
    for name in ("const", "bind1", "bind1c"):
        m = models[name]
        T = 2
        tables = exact_dp(m, [0.0], T, tree=trees[name][T])
        u = coordination_to_behavioral(tables.policy(), m, T)
        C, D = exact_evaluate(m, u, T)
        assert abs(C - tables.aggregate) < 1e-10, name


def test_equivalence_exhaustive_small_horizon(models, trees):
    # every coordination policy's coordinator-side value matches the converted
    # behavioral profile's exact evaluation (lambda = 0 so values are costs)
    m = models["bind1"]
    tree = trees["bind1"][2]
    policies = enumerate_coordination_policies(tree)
    tables = exact_dp(m, [0.0], 2, tree=tree)
    for v in policies:
        u = coordination_to_behavioral(v, m, 2)
        C, _D = exact_evaluate(m, u, 2)
        assert C >= tables.aggregate - 1e-10


def test_prescription_history_is_function_of_common_history(models):
    # two episodes with identical common observations under one coordination
    # policy produce identical prescription histories
    m = models["bind1c"]
    sets = reachable_private_sets(m, 3)
    v = CoordinationPolicy.constant(m, ["a0", "a1"], 3, sets)
    u = coordination_to_behavioral(v, m, 3)

    h = PrescriptionHistory.initial("c-")
    g1 = v.prescription(1, h)
    h2 = h.extend(g1.key, "c-")
    g2 = v.prescription(2, h2)
    # reconstruction is deterministic: rebuild and compare
    hb = PrescriptionHistory.initial("c-")
    assert v.prescription(1, hb).key == g1.key
    assert v.prescription(2, hb.extend(g1.key, "c-")).key == g2.key
    del u
