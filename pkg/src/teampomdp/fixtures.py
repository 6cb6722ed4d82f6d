"""Bundled benchmark instances.

zero      single state, two agents, all costs zero (degenerate sanity case).
const     two agents, constant costs c=1, d=0.5, slack constraint kappa=2.
const-1a  single-agent variant of const.
bind1     single agent, one state, c+d = 1 per step, binding constraint
          kappa=1; the optimal multiplier is 1 and the optimal mixed policy
          splits between the two actions.
bind1c    two states, two agents, agent 1 receives noisy state readings,
          agent 2 nothing; costs reward matching the hidden state while the
          constraint prices the second action.  Dynamics are action
          independent, which keeps exact planning small while making lossy
          history compression measurably suboptimal.

Reference numbers asserted in tests are regenerated from the oracles, not
hard-coded here.
"""

from __future__ import annotations

from .ais import GeneratorBundle
from .model import ModelSpec

__all__ = ["FIXTURE_NAMES", "build_fixture", "sufficient_bundle"]

FIXTURE_NAMES = ("zero", "const", "const-1a", "bind1", "bind1c")


def build_fixture(name: str) -> ModelSpec:
    if name == "zero":
        return _two_agent_single_state(name="zero", c=0.0, d=0.0, kappa=0.0, slater=None)
    if name == "const":
        return _two_agent_single_state(
            name="const", c=1.0, d=0.5, kappa=2.0,
            slater={"policy": "uniform", "zeta": 1.0},
        )
    if name == "const-1a":
        acts = ("a0", "a1")
        obs = ("s0", ("c0", "x"))
        transition = {("s0", (a,)): (((obs), 1.0),) for a in acts}
        return ModelSpec(
            num_agents=1,
            states=("s0",),
            common_obs=("c0",),
            private_obs=(("x",),),
            actions=(acts,),
            transition=transition,
            cost_c={("s0", (a,)): 1.0 for a in acts},
            cost_d={("s0", (a,)): (0.5,) for a in acts},
            initial=((obs, 1.0),),
            discount=0.5,
            kappa=(2.0,),
            name="const-1a",
            slater={"policy": "uniform", "zeta": 1.0},
        )
    if name == "bind1":
        obs = ("s0", ("c0", "x"))
        return ModelSpec(
            num_agents=1,
            states=("s0",),
            common_obs=("c0",),
            private_obs=(("x",),),
            actions=(("a0", "a1"),),
            transition={("s0", (a,)): ((obs, 1.0),) for a in ("a0", "a1")},
            cost_c={("s0", ("a0",)): 0.0, ("s0", ("a1",)): 1.0},
            cost_d={("s0", ("a0",)): (1.0,), ("s0", ("a1",)): (0.0,)},
            initial=((obs, 1.0),),
            discount=0.5,
            kappa=(1.0,),
            name="bind1",
            slater={"policy": "always:a1", "zeta": 1.0},
        )
    if name == "bind1c":
        return _build_bind1c()
    raise KeyError(f"unknown fixture {name!r}")


def _two_agent_single_state(name, c, d, kappa, slater):
    acts = ("a0", "a1")
    obs = ("s0", ("c0", "x", "x"))
    joint = [(a1, a2) for a1 in acts for a2 in acts]
    return ModelSpec(
        num_agents=2,
        states=("s0",),
        common_obs=("c0",),
        private_obs=(("x",), ("x",)),
        actions=(acts, acts),
        transition={("s0", a): ((obs, 1.0),) for a in joint},
        cost_c={("s0", a): c for a in joint},
        cost_d={("s0", a): (d,) for a in joint},
        initial=((obs, 1.0),),
        discount=0.5,
        kappa=(kappa,),
        name=name,
        slater=slater,
    )


_READ_CORRECT = 0.8


def _build_bind1c() -> ModelSpec:
    states = ("sA", "sB")
    acts = ("a0", "a1")
    joint = [(a1, a2) for a1 in acts for a2 in acts]
    match = {"sA": "a0", "sB": "a1"}

    def readings(s):
        good = "xA" if s == "sA" else "xB"
        bad = "xB" if s == "sA" else "xA"
        return ((good, _READ_CORRECT), (bad, 1.0 - _READ_CORRECT))

    transition = {}
    cost_c = {}
    cost_d = {}
    for s in states:
        for a in joint:
            rows = []
            for r, p in readings(s):  # state persists; agent 1 reads it noisily
                rows.append(((s, ("c-", r, "y-")), p))
            transition[(s, a)] = tuple(rows)
            cost_c[(s, a)] = 0.5 * (a[0] != match[s]) + 0.5 * (a[1] != match[s])
            cost_d[(s, a)] = (0.5 * (a[0] == "a1") + 0.5 * (a[1] == "a1"),)
    initial = []
    for s, ps in (("sA", 0.6), ("sB", 0.4)):
        for r, p in readings(s):
            initial.append(((s, ("c-", r, "y-")), ps * p))
    return ModelSpec(
        num_agents=2,
        states=states,
        common_obs=("c-",),
        private_obs=(("xA", "xB"), ("y-",)),
        actions=(acts, acts),
        transition=transition,
        cost_c=cost_c,
        cost_d=cost_d,
        initial=tuple(initial),
        discount=0.5,
        kappa=(0.75,),
        name="bind1c",
        slater={"policy": "always:a0,a0", "zeta": 0.75},
    )


def stepwise_value_oracle(model: ModelSpec, lam, T: int) -> dict:
    """Optimal coordination value per initial common observation, computed
    stage by stage.

    Valid only for models whose dynamics ignore actions and freeze the state
    (both checked): the law of (state, private readings) is then policy
    independent, so the optimal discounted value is the discounted sum of
    per-stage minima, each taken over one informative agent's
    reading-count-to-action rules and the other agents' constant actions.
    Serves as an independent long-horizon value oracle for the exact program.
    """
    joint_actions = model.joint_actions()
    for s in model.states:
        rows = {a: sorted(model.transition[(s, a)]) for a in joint_actions}
        first = rows[joint_actions[0]]
        if any(rows[a] != first for a in joint_actions):
            raise ValueError("oracle needs action-independent dynamics")
        for (s2, _o), p in first:
            if p > 0.0 and s2 != s:
                raise ValueError("oracle needs frozen states")
    informative = [n for n in range(model.num_agents) if len(model.private_obs[n]) > 1]
    if len(informative) > 1:
        raise ValueError("oracle supports at most one informative agent")
    n_inf = informative[0] if informative else 0
    lam = tuple(float(x) for x in lam)
    alpha = model.discount

    def reading_dist(s):
        dist: dict = {}
        for (_s2, o), p in model.transition[(s, joint_actions[0])]:
            if p > 0.0:
                dist[o[1 + n_inf]] = dist.get(o[1 + n_inf], 0.0) + p
        return dist

    out = {}
    for o0 in sorted({o[0] for (_s, o), p in model.initial if p > 0.0}):
        # joint law of (state, reading multiset): readings are exchangeable
        # given the frozen state, so the multiset is a sufficient statistic
        law: dict = {}
        norm = 0.0
        for (s, o), p in model.initial:
            if p <= 0.0 or o[0] != o0:
                continue
            key = (s, (o[1 + n_inf],))
            law[key] = law.get(key, 0.0) + p
            norm += p
        law = {k: v / norm for k, v in law.items()}
        total = 0.0
        for t in range(1, T + 1):
            by_info: dict = {}
            for (s, counts), p in law.items():
                row = by_info.setdefault(counts, {})
                row[s] = row.get(s, 0.0) + p
            best_stage = None
            for combo in _constant_action_combos(model, n_inf):
                stage = 0.0
                for _info, srow in by_info.items():
                    best_inner = min(
                        sum(
                            p * model.lambda_step_cost(
                                s,
                                tuple(a_inf if n == n_inf else combo[n]
                                      for n in range(model.num_agents)),
                                lam,
                            )
                            for s, p in srow.items()
                        )
                        for a_inf in model.actions[n_inf]
                    )
                    stage += best_inner
                if best_stage is None or stage < best_stage:
                    best_stage = stage
            total += alpha ** (t - 1) * best_stage
            if t < T:
                nxt: dict = {}
                for (s, counts), p in law.items():
                    for r, q in reading_dist(s).items():
                        key = (s, tuple(sorted(counts + (r,))))
                        nxt[key] = nxt.get(key, 0.0) + p * q
                law = nxt
        out[o0] = total
    return out


def _constant_action_combos(model: ModelSpec, n_inf: int):
    combos = [{}]
    for n in range(model.num_agents):
        if n == n_inf:
            combos = [{**c, n: None} for c in combos]
        else:
            combos = [{**c, n: a} for c in combos for a in model.actions[n]]
    return combos


def sufficient_bundle(model: ModelSpec) -> GeneratorBundle:
    """A certified-lossless time-invariant bundle for long-horizon value proxies.

    For the single-state fixtures the constant compressor is already lossless.
    For bind1c, the pair of reading counts (#xA, #xB) is a sufficient private
    statistic for agent 1 (readings are exchangeable given the frozen state
    and the dynamics ignore actions), and the common side carries nothing.
    Tests assert the zero certification rather than trusting this reasoning.
    """
    if model.name != "bind1c":
        from .ais import builtin_generator

        return builtin_generator("constant", model)

    def count_update(z, o0, opriv, aprev):
        if z == "-":
            z = (0, 0)
        if opriv == "xA":
            return (z[0] + 1, z[1])
        if opriv == "xB":
            return (z[0], z[1] + 1)
        return z

    def const_update(z, o0, opriv, aprev):
        return "-"

    def common_update(z, lam_key, o0):
        return "-"

    return GeneratorBundle(
        model=model,
        kind="bind1c-counts",
        private_init=("-", "-"),
        private_update=(count_update, const_update),
        common_init="-",
        common_update=common_update,
        time_invariant=True,
    )
