"""Primal-dual trainer with learned history compressors.

Per iteration: collect a batch of rollouts under the current recurrent
state-compressors and prescription networks, take one fast-timescale step on
the two prediction risks, one medium-timescale policy-gradient step on the
prescription networks, and one slow-timescale projected ascent step on the
multipliers.  Training is centralized (the supervisor sees everything);
execution uses only each agent's own networks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ModelSpec
from .nn import (
    DenseLayer,
    ParamStore,
    RecurrentCell,
    SoftmaxHead,
    Tensor,
    concat,
    loss_nll,
    loss_smooth_l1,
)

__all__ = [
    "LearnerConfig",
    "NetworkBundle",
    "Batch",
    "TrainState",
    "collect_batch",
    "risk_coordinator",
    "risk_supervisor",
    "cost_to_go",
    "policy_gradient_estimate",
    "lambda_gradient_estimate",
    "train",
]


@dataclass
class LearnerConfig:
    """Hyperparameters; validate() enforces the three-timescale conditions."""

    batch_size: int = 64
    horizon: int | None = None  # default: 4 * ceil(1/(1-alpha))
    exponents: tuple = (0.6, 0.8, 1.0)
    scales: tuple = (0.5, 0.5, 1.0)
    beta: tuple | None = None  # len K+2, positive, sums to 1
    beta_prime: tuple | None = None
    eta: float = 1e-8
    lambda_max: float | None = None
    seed: int = 0
    maxiters: int = 2000
    state_width: int = 16
    pred_hidden: int = 32
    code_width: int = 16
    literal_clipped_lambda: bool = False  # use max(violation, 0) instead of the signed form
    convergence_window: int = 0  # 0 disables early stopping
    convergence_tol: float = 0.0

    def resolved_horizon(self, model: ModelSpec) -> int:
        if self.horizon is not None:
            return self.horizon
        return 4 * int(np.ceil(1.0 / (1.0 - model.discount)))

    def resolved_beta(self, K: int, prime: bool = False) -> tuple:
        b = self.beta_prime if prime else self.beta
        if b is None:
            return tuple(1.0 / (K + 2) for _ in range(K + 2))
        return tuple(b)

    def step_sizes(self, i: int) -> tuple:
        return tuple(s * i ** (-p) for s, p in zip(self.scales, self.exponents))

    def validate(self, model: ModelSpec):
        p1, p2, p3 = self.exponents
        for p in (p1, p2, p3):
            if not (0.5 < p <= 1.0):
                raise ValueError(
                    f"step-size exponent {p} outside (0.5, 1]: sums must diverge "
                    "while squares stay summable"
                )
        if not (p1 < p2 < p3):
            raise ValueError(
                f"exponents {self.exponents} must be strictly increasing so the "
                "timescale ratios vanish"
            )
        if any(s <= 0 for s in self.scales):
            raise ValueError("step-size scales must be positive")
        K = model.num_constraints
        for prime in (False, True):
            b = self.resolved_beta(K, prime)
            if len(b) != K + 2:
                raise ValueError(f"loss weights need length K+2={K + 2}, got {len(b)}")
            if any(x <= 0 for x in b) or abs(sum(b) - 1.0) > 1e-9:
                raise ValueError("loss weights must be positive and sum to 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 1 or self.maxiters < 1:
            raise ValueError("batch size and maxiters must be positive")


class _Indexer:
    """Integer encodings of the model's ids for vectorized rollouts."""

    def __init__(self, model: ModelSpec):
        self.model = model
        self.state_idx = {s: i for i, s in enumerate(model.states)}
        self.o0_idx = {o: i for i, o in enumerate(model.common_obs)}
        self.on_idx = [{o: i for i, o in enumerate(obs)} for obs in model.private_obs]
        self.a_idx = [{a: i for i, a in enumerate(acts)} for acts in model.actions]
        self.joint_obs = []
        self.joint_obs_idx = {}

        def expand(prefix, n):
            if n > model.num_agents:
                self.joint_obs_idx[tuple(prefix)] = len(self.joint_obs)
                self.joint_obs.append(tuple(prefix))
                return
            space = model.common_obs if n == 0 else model.private_obs[n - 1]
            for o in space:
                expand(prefix + [o], n + 1)

        expand([], 0)
        # per (state idx, action idx tuple): cdf over transition entries
        self.trans = {}
        for (s, a), row in model.transition.items():
            key = (self.state_idx[s], tuple(self.a_idx[n][a[n]] for n in range(model.num_agents)))
            probs = np.array([p for _e, p in row])
            entries = []
            for (s2, o2), _p in row:
                entries.append((
                    self.state_idx[s2],
                    self.o0_idx[o2[0]],
                    tuple(self.on_idx[n][o2[1 + n]] for n in range(model.num_agents)),
                    self.joint_obs_idx[tuple(o2)],
                ))
            self.trans[key] = (np.cumsum(probs), entries)
        probs = np.array([p for _e, p in model.initial])
        entries = []
        for (s, o), _p in model.initial:
            entries.append((
                self.state_idx[s],
                self.o0_idx[o[0]],
                tuple(self.on_idx[n][o[1 + n]] for n in range(model.num_agents)),
                self.joint_obs_idx[tuple(o)],
            ))
        self.init = (np.cumsum(probs), entries)
        self.costs_c = np.zeros((len(model.states),) + tuple(len(a) for a in model.actions))
        self.costs_d = np.zeros(self.costs_c.shape + (model.num_constraints,))
        for (s, a), c in model.cost_c.items():
            idx = (self.state_idx[s],) + tuple(self.a_idx[n][a[n]] for n in range(model.num_agents))
            self.costs_c[idx] = c
            self.costs_d[idx] = model.cost_d[(s, a)]


class NetworkBundle:
    """The six function-approximator roles.

    rho0 compresses the coordinator's stream (common observation and previous
    pseudo-prescription) into the common state; rho[n] compresses agent n's
    stream into its private state; phi0 emits the pseudo-prescription code;
    phi[n] turns (private state, own code slice) into an action distribution;
    psi0 and psiS predict costs and next observations for the coordinator and
    the all-seeing supervisor.
    """

    def __init__(self, model: ModelSpec, config: LearnerConfig, seed=0):
        self.model = model
        self.config = config
        rng = np.random.default_rng([int(seed), 0xC0DE])
        N = model.num_agents
        K = model.num_constraints
        H = config.state_width
        W = config.code_width
        P = config.pred_hidden
        self.H, self.W = H, W
        o0 = len(model.common_obs)
        self.store = ParamStore()
        self.rho0 = RecurrentCell(self.store, "rho0", o0 + N * W, H, rng)
        self.rho = [
            RecurrentCell(
                self.store, f"rho{n + 1}",
                o0 + len(model.private_obs[n]) + len(model.actions[n]), H, rng,
            )
            for n in range(N)
        ]
        self.phi0_hidden = DenseLayer(self.store, "phi0.h", H, P, rng)
        self.phi0_out = DenseLayer(self.store, "phi0.o", P, N * W, rng)
        self.phi = []
        for n in range(N):
            hidden = DenseLayer(self.store, f"phi{n + 1}.h", H + W, P, rng)
            head = SoftmaxHead(self.store, f"phi{n + 1}.o", P, len(model.actions[n]), rng)
            self.phi.append((hidden, head))
        self.psi0_trunk = DenseLayer(self.store, "psi0.h", H + N * W, P, rng)
        self.psi0_c = DenseLayer(self.store, "psi0.c", P, 1, rng)
        self.psi0_d = DenseLayer(self.store, "psi0.d", P, K, rng)
        self.psi0_o = SoftmaxHead(self.store, "psi0.po", P, o0, rng)
        s_in = (N + 1) * H + sum(len(a) for a in model.actions)
        joint_obs_count = len(model.common_obs)
        for obs in model.private_obs:
            joint_obs_count *= len(obs)
        self.psiS_trunk = DenseLayer(self.store, "psiS.h", s_in, P, rng)
        self.psiS_c = DenseLayer(self.store, "psiS.c", P, 1, rng)
        self.psiS_d = DenseLayer(self.store, "psiS.d", P, K, rng)
        self.psiS_o = SoftmaxHead(self.store, "psiS.po", P, joint_obs_count, rng)
        self.version = 0

        def names(*layers):
            out = []
            for layer in layers:
                out.extend(layer.param_names)
            return tuple(out)

        self.rho0_names = names(self.rho0)
        self.rho_n_names = names(*self.rho)
        self.phi_names = names(self.phi0_hidden, self.phi0_out,
                               *[l for pair in self.phi for l in pair])
        self.psi0_names = names(self.psi0_trunk, self.psi0_c, self.psi0_d, self.psi0_o)
        self.psiS_names = names(self.psiS_trunk, self.psiS_c, self.psiS_d, self.psiS_o)

    def check_dimensions(self):
        N = self.model.num_agents
        if self.rho0.Wx.data.shape[0] != len(self.model.common_obs) + N * self.W:
            raise ValueError("rho0 input width inconsistent with model/code width")

    # -- numpy (no-graph) forward passes used during collection --------------

    def np_dense(self, layer: DenseLayer, x):
        return x @ layer.W.data + layer.b.data

    def np_rnn(self, cell: RecurrentCell, x, h):
        return np.tanh(x @ cell.Wx.data + h @ cell.Wh.data + cell.b.data)

    def np_softmax(self, head: SoftmaxHead, x):
        z = self.np_dense(head.dense, x)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def np_phi0(self, z0):
        return self.np_dense(self.phi0_out, np.tanh(self.np_dense(self.phi0_hidden, z0)))

    def np_phi_n(self, n, zn, code):
        x = np.concatenate([zn, code], axis=1)
        return self.np_softmax(self.phi[n][1], np.tanh(self.np_dense(self.phi[n][0], x)))

    def np_psi0(self, z0, lamhat):
        x = np.concatenate([z0, lamhat], axis=1)
        h = np.tanh(self.np_dense(self.psi0_trunk, x))
        return (
            self.np_dense(self.psi0_c, h)[:, 0],
            self.np_dense(self.psi0_d, h),
            self.np_softmax(self.psi0_o, h),
        )

    def np_psiS(self, zs, action_onehots):
        x = np.concatenate(list(zs) + list(action_onehots), axis=1)
        h = np.tanh(self.np_dense(self.psiS_trunk, x))
        return (
            self.np_dense(self.psiS_c, h)[:, 0],
            self.np_dense(self.psiS_d, h),
            self.np_softmax(self.psiS_o, h),
        )


@dataclass
class Batch:
    """Vectorized trajectory record (the per-step tuple of Eq.-style logs plus
    the extra next observation used as the prediction target)."""

    B: int
    T: int
    obs0: np.ndarray  # (B, T+1) common observation indices
    obsn: list  # per agent, (B, T+1) private observation indices
    acts: list  # per agent, (B, T) action indices
    act_prob: np.ndarray  # (B, T, N) probability of the sampled action
    joint_obs: np.ndarray  # (B, T+1)
    c: np.ndarray  # (B, T)
    d: np.ndarray  # (B, T, K)
    z0: np.ndarray  # (B, T, H)
    zn: list  # per agent, (B, T, H)
    lamhat: np.ndarray  # (B, T, N*W)
    c0_hat: np.ndarray
    d0_hat: np.ndarray
    p0_hat: np.ndarray
    cS_hat: np.ndarray
    dS_hat: np.ndarray
    pS_hat: np.ndarray
    bundle_version: int = 0
    seed: object = None


def collect_batch(model: ModelSpec, bundle: NetworkBundle, config: LearnerConfig,
                  seed) -> Batch:
    """Roll out B independent horizon-T episodes under the current networks.

    Trajectory j draws from its own generator stream (seed, j); the batch is
    bit-reproducible for fixed weights and seed.
    """
    bundle.check_dimensions()
    idx = _indexer(model)
    B = config.batch_size
    T = config.resolved_horizon(model)
    N = model.num_agents
    K = model.num_constraints
    H, W = bundle.H, bundle.W
    o0_dim = len(model.common_obs)
    on_dim = [len(o) for o in model.private_obs]
    a_dim = [len(a) for a in model.actions]

    rngs = [np.random.default_rng([_seed_entropy(seed), j]) for j in range(B)]
    u_init = np.array([r.random() for r in rngs])
    u_steps = np.stack([r.random(size=(T, N + 1)) for r in rngs])  # actions then transition

    batch = Batch(
        B=B, T=T,
        obs0=np.zeros((B, T + 1), dtype=int),
        obsn=[np.zeros((B, T + 1), dtype=int) for _ in range(N)],
        acts=[np.zeros((B, T), dtype=int) for _ in range(N)],
        act_prob=np.zeros((B, T, N)),
        joint_obs=np.zeros((B, T + 1), dtype=int),
        c=np.zeros((B, T)),
        d=np.zeros((B, T, K)),
        z0=np.zeros((B, T, H)),
        zn=[np.zeros((B, T, H)) for _ in range(N)],
        lamhat=np.zeros((B, T, N * W)),
        c0_hat=np.zeros((B, T)),
        d0_hat=np.zeros((B, T, K)),
        p0_hat=np.zeros((B, T, o0_dim)),
        cS_hat=np.zeros((B, T)),
        dS_hat=np.zeros((B, T, K)),
        pS_hat=np.zeros((B, T, len(idx.joint_obs))),
        bundle_version=bundle.version,
        seed=seed,
    )

    states = np.zeros(B, dtype=int)
    for j in range(B):
        cdf, entries = idx.init
        e = entries[int(np.searchsorted(cdf, u_init[j], side="right"))]
        states[j] = e[0]
        batch.obs0[j, 0] = e[1]
        for n in range(N):
            batch.obsn[n][j, 0] = e[2][n]
        batch.joint_obs[j, 0] = e[3]

    h0 = np.zeros((B, H))
    hn = [np.zeros((B, H)) for _ in range(N)]
    lam_prev = np.zeros((B, N * W))
    eye0 = np.eye(o0_dim)
    eyen = [np.eye(d) for d in on_dim]
    eyea = [np.eye(d) for d in a_dim]
    prev_act = [np.zeros((B, a_dim[n])) for n in range(N)]

    for t in range(T):
        o0_onehot = eye0[batch.obs0[:, t]]
        h0 = bundle.np_rnn(bundle.rho0, np.concatenate([o0_onehot, lam_prev], axis=1), h0)
        for n in range(N):
            xn = np.concatenate([o0_onehot, eyen[n][batch.obsn[n][:, t]], prev_act[n]], axis=1)
            hn[n] = bundle.np_rnn(bundle.rho[n], xn, hn[n])
        lamhat = bundle.np_phi0(h0)
        batch.z0[:, t] = h0
        batch.lamhat[:, t] = lamhat
        a_onehots = []
        for n in range(N):
            batch.zn[n][:, t] = hn[n]
            probs = bundle.np_phi_n(n, hn[n], lamhat[:, n * W:(n + 1) * W])
            u = u_steps[:, t, n]
            a = (probs.cumsum(axis=1) > u[:, None]).argmax(axis=1)
            batch.acts[n][:, t] = a
            batch.act_prob[:, t, n] = probs[np.arange(B), a]
            a_onehots.append(eyea[n][a])
            prev_act[n] = a_onehots[n]
        c0, d0, p0 = bundle.np_psi0(h0, lamhat)
        batch.c0_hat[:, t] = c0
        batch.d0_hat[:, t] = d0
        batch.p0_hat[:, t] = p0
        cS, dS, pS = bundle.np_psiS([h0] + hn, a_onehots)
        batch.cS_hat[:, t] = cS
        batch.dS_hat[:, t] = dS
        batch.pS_hat[:, t] = pS
        # costs and transition
        for j in range(B):
            akey = tuple(batch.acts[n][j, t] for n in range(N))
            sidx = (states[j],) + akey
            batch.c[j, t] = idx.costs_c[sidx]
            batch.d[j, t] = idx.costs_d[sidx]
            cdf, entries = idx.trans[(states[j], akey)]
            e = entries[int(np.searchsorted(cdf, u_steps[j, t, N], side="right"))]
            states[j] = e[0]
            batch.obs0[j, t + 1] = e[1]
            for n in range(N):
                batch.obsn[n][j, t + 1] = e[2][n]
            batch.joint_obs[j, t + 1] = e[3]
        lam_prev = lamhat
    return batch


_INDEXERS: dict = {}


def _indexer(model: ModelSpec) -> _Indexer:
    key = id(model)
    if key not in _INDEXERS:
        _INDEXERS[key] = _Indexer(model)
    return _INDEXERS[key]


def _seed_entropy(seed) -> int:
    if isinstance(seed, tuple):
        out = 0
        for part in seed:
            out = (out * 1_000_003 + int(part)) % (2**63)
        return out
    return int(seed)


def risk_coordinator(model: ModelSpec, bundle: NetworkBundle, batch: Batch,
                     config: LearnerConfig) -> Tensor:
    """Empirical coordinator risk, differentiable in (rho0, psi0).

    The common state is re-unrolled through the graph on the logged common
    observations and logged (stop-gradient) pseudo-prescriptions, so the
    prescription networks receive exactly zero gradient.
    """
    N = model.num_agents
    K = model.num_constraints
    beta = config.resolved_beta(K)
    B, T = batch.B, batch.T
    eye0 = np.eye(len(model.common_obs))
    h = Tensor(np.zeros((B, bundle.H)))
    total = None
    for t in range(T):
        x = Tensor(np.concatenate([
            eye0[batch.obs0[:, t]],
            batch.lamhat[:, t - 1] if t > 0 else np.zeros((B, N * bundle.W)),
        ], axis=1))
        h = bundle.rho0(x, h)
        inp = concat([h, Tensor(batch.lamhat[:, t])])
        trunk = bundle.psi0_trunk(inp).tanh()
        c_hat = bundle.psi0_c(trunk)
        d_hat = bundle.psi0_d(trunk)
        p_hat = bundle.psi0_o(trunk)
        step = loss_smooth_l1(c_hat, batch.c[:, t][:, None]).sum() * beta[0]
        for k in range(K):
            step = step + loss_smooth_l1(d_hat.narrow(k, 1), batch.d[:, t, k][:, None]).sum() * beta[1 + k]
        step = step + loss_nll(batch.obs0[:, t + 1], p_hat, config.eta).sum() * beta[K + 1]
        total = step if total is None else total + step
    return total * (1.0 / (B * T))


def risk_supervisor(model: ModelSpec, bundle: NetworkBundle, batch: Batch,
                    config: LearnerConfig) -> Tensor:
    """Empirical supervisor risk, differentiable in (rho0, rho_{1..N}, psiS)."""
    N = model.num_agents
    K = model.num_constraints
    beta = config.resolved_beta(K, prime=True)
    B, T = batch.B, batch.T
    eye0 = np.eye(len(model.common_obs))
    eyen = [np.eye(len(o)) for o in model.private_obs]
    eyea = [np.eye(len(a)) for a in model.actions]
    h0 = Tensor(np.zeros((B, bundle.H)))
    hn = [Tensor(np.zeros((B, bundle.H))) for _ in range(N)]
    total = None
    for t in range(T):
        o0_onehot = eye0[batch.obs0[:, t]]
        x0 = Tensor(np.concatenate([
            o0_onehot,
            batch.lamhat[:, t - 1] if t > 0 else np.zeros((B, N * bundle.W)),
        ], axis=1))
        h0 = bundle.rho0(x0, h0)
        a_onehots = []
        for n in range(N):
            prev = eyea[n][batch.acts[n][:, t - 1]] if t > 0 else np.zeros((B, len(model.actions[n])))
            xn = Tensor(np.concatenate([o0_onehot, eyen[n][batch.obsn[n][:, t]], prev], axis=1))
            hn[n] = bundle.rho[n](xn, hn[n])
            a_onehots.append(Tensor(eyea[n][batch.acts[n][:, t]]))
        inp = concat([h0] + hn + a_onehots)
        trunk = bundle.psiS_trunk(inp).tanh()
        c_hat = bundle.psiS_c(trunk)
        d_hat = bundle.psiS_d(trunk)
        p_hat = bundle.psiS_o(trunk)
        step = loss_smooth_l1(c_hat, batch.c[:, t][:, None]).sum() * beta[0]
        for k in range(K):
            step = step + loss_smooth_l1(d_hat.narrow(k, 1), batch.d[:, t, k][:, None]).sum() * beta[1 + k]
        step = step + loss_nll(batch.joint_obs[:, t + 1], p_hat, config.eta).sum() * beta[K + 1]
        total = step if total is None else total + step
    return total * (1.0 / (B * T))


def cost_to_go(batch: Batch, lam: Sequence[float], kappa: Sequence[float],
               alpha: float) -> np.ndarray:
    """(B, T) discounted tails of c + <lam, d - kappa>, by backward recursion."""
    lam = np.asarray(lam, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    step = batch.c + (batch.d - kappa) @ lam
    g = np.zeros_like(step)
    g[:, -1] = step[:, -1]
    for t in range(batch.T - 2, -1, -1):
        g[:, t] = step[:, t] + alpha * g[:, t + 1]
    return g


def policy_gradient_estimate(model: ModelSpec, bundle: NetworkBundle, batch: Batch,
                             g: np.ndarray) -> Tensor:
    """Score-function surrogate whose gradient is the policy-gradient estimate.

    Gradients flow through the prescription networks only; the logged state
    values enter as constants.  Raises on an off-policy batch.
    """
    if batch.bundle_version != bundle.version:
        raise ValueError("batch was collected under different prescription weights")
    N = model.num_agents
    B, T = batch.B, batch.T
    W = bundle.W
    total = None
    for t in range(T):
        z0 = Tensor(batch.z0[:, t])
        code = bundle.phi0_out(bundle.phi0_hidden(z0).tanh())
        logp = None
        for n in range(N):
            zn = Tensor(batch.zn[n][:, t])
            x = concat([zn, code.narrow(n * W, W)])
            hidden, head = bundle.phi[n]
            probs = head(hidden(x).tanh())
            lp = (probs.gather(batch.acts[n][:, t]) + 1e-12).log()
            logp = lp if logp is None else logp + lp
        weighted = logp * g[:, t]
        total = weighted.sum() if total is None else total + weighted.sum()
    return total * (1.0 / B)


def lambda_gradient_estimate(batch: Batch, kappa: Sequence[float],
                             alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """(signed, clipped) estimates of the dual gradient: the batch-mean
    discounted constraint cost minus the threshold, and its positive part."""
    kappa = np.asarray(kappa, dtype=float)
    disc = alpha ** np.arange(batch.T)
    v = (batch.d * disc[None, :, None]).sum(axis=1).mean(axis=0) - kappa
    return v, np.maximum(v, 0.0)


@dataclass
class TrainState:
    iteration: int
    lam: np.ndarray
    metrics: list = field(default_factory=list)
    aborted: str = ""

    COLUMNS = ("iter", "risk_coord", "risk_sup", "lagrangian_mean", "violation", "lam", "wallclock_ms")

    def log(self, **row):
        self.metrics.append(row)

    def to_csv(self, path: str, K: int):
        cols = ["iter", "risk_coord", "risk_sup", "lagrangian_mean"]
        cols += [f"violation_{k}" for k in range(K)]
        cols += [f"lambda_{k}" for k in range(K)]
        cols += ["wallclock_ms"]
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for row in self.metrics:
                out = [str(row["iter"]), repr(row["risk_coord"]), repr(row["risk_sup"]),
                       repr(row["lagrangian_mean"])]
                out += [repr(x) for x in row["violation"]]
                out += [repr(x) for x in row["lam"]]
                out += [repr(row["wallclock_ms"])]
                f.write(",".join(out) + "\n")

    def running_average(self, key: str, fraction: float = 0.25):
        rows = self.metrics[int(len(self.metrics) * (1 - fraction)):]
        vals = np.array([np.asarray(r[key], dtype=float) for r in rows])
        return vals.mean(axis=0)


def train(model: ModelSpec, config: LearnerConfig,
          bundle: NetworkBundle | None = None,
          checkpoint_path: str | None = None) -> tuple[TrainState, NetworkBundle]:
    """Run the three-timescale loop until maxiters or convergence.

    Per iteration: batch collection; coordinator risk step (fast scale);
    supervisor risk step using the already-updated common compressor (fast
    scale); policy-gradient step (medium); projected multiplier step (slow).
    """
    config.validate(model)
    if bundle is None:
        bundle = NetworkBundle(model, config, seed=config.seed)
    K = model.num_constraints
    alpha = model.discount
    lam_max = config.lambda_max
    if lam_max is None:
        from .duality import slater_cap

        try:
            lam_max = slater_cap(model)
        except Exception:
            raise ValueError("no Slater pair declared: set config.lambda_max explicitly")
    lam = np.zeros(K)
    state = TrainState(iteration=0, lam=lam)
    disc = alpha ** np.arange(config.resolved_horizon(model))
    for i in range(1, config.maxiters + 1):
        t0 = time.perf_counter()
        d1, d2, d3 = config.step_sizes(i)
        batch = collect_batch(model, bundle, config, seed=(config.seed, i))

        bundle.store.zero_grad()
        r0 = risk_coordinator(model, bundle, batch, config)
        r0.backward()
        bundle.store.sgd_step(d1, bundle.rho0_names + bundle.psi0_names)

        bundle.store.zero_grad()
        rs = risk_supervisor(model, bundle, batch, config)
        rs.backward()
        bundle.store.sgd_step(d1, bundle.rho0_names + bundle.rho_n_names + bundle.psiS_names)

        g = cost_to_go(batch, lam, model.kappa, alpha)
        bundle.store.zero_grad()
        surrogate = policy_gradient_estimate(model, bundle, batch, g)
        surrogate.backward()
        bundle.store.sgd_step(d2, bundle.phi_names)
        bundle.version += 1

        try:
            bundle.store.check_finite()
        except FloatingPointError as err:
            if checkpoint_path:
                bundle.store.save(checkpoint_path + ".diagnostic.json")
            state.aborted = str(err)
            break

        signed, clipped = lambda_gradient_estimate(batch, model.kappa, alpha)
        C_batch = float((batch.c * disc[None, :]).sum(axis=1).mean())
        D_batch = (batch.d * disc[None, :, None]).sum(axis=1).mean(axis=0)
        lag = C_batch + float(lam @ (D_batch - np.asarray(model.kappa)))
        state.iteration = i
        state.log(
            iter=i,
            risk_coord=float(r0.data),
            risk_sup=float(rs.data),
            lagrangian_mean=lag,
            violation=signed.tolist(),
            lam=lam.tolist(),
            wallclock_ms=(time.perf_counter() - t0) * 1e3,
        )
        grad = clipped if config.literal_clipped_lambda else signed
        lam = np.clip(lam + d3 * grad, 0.0, lam_max)
        state.lam = lam
        if config.convergence_window and i > 2 * config.convergence_window:
            w = config.convergence_window
            recent = state.metrics[-w:]
            older = state.metrics[-2 * w:-w]
            keys = ("risk_coord", "risk_sup", "lagrangian_mean")
            deltas = [abs(np.mean([r[k] for r in recent]) - np.mean([r[k] for r in older]))
                      for k in keys]
            lam_delta = np.abs(
                np.mean([r["lam"] for r in recent], axis=0)
                - np.mean([r["lam"] for r in older], axis=0)
            ).max()
            if max(deltas) < config.convergence_tol and lam_delta < config.convergence_tol:
                break
    if checkpoint_path:
        bundle.store.save(checkpoint_path)
    return state, bundle
