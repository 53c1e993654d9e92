"""Policy-gradient training with a self-competing baseline.

One epoch: draw B instances, roll each out N times with the stochastic
policy, score every rollout with the penalized reward
L = -(primary cost) - sum_i lambda_i * C_i, take the per-instance
alpha-quantile of the N rewards as baseline, accumulate
(1/(B*N)) * sum (L - b) * grad log pi as the ascent direction, clip the
global gradient norm, and apply one Adam step.

Rollouts run in lockstep batches so each decision is one tensor pass;
chunks bound tape memory and gradients accumulate exactly across them.
Everything is deterministic for a fixed seed and config.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import jsp_env, policy, tensor_nn as tn, vrap_env
from .instances import (JspInstance, VrapGenConfig, VrapInstance, gen_jsp, gen_vrap)
from .jsp_env import JspBatch, Schedule
from .policy import (JspPolicyConfig, JspPolicyNet, VrapPolicyConfig,
                     VrapPolicyNet, VrapScales, bernoulli_log_prob,
                     categorical_log_prob, masked_softmax_probs)
from .rng import make_rng
from .tensor_nn import ParamStore, Tape, Tensor, backward
from .vrap_env import Placement, VrapBatch


# ---------------------------------------------------------------------------
# Penalized reward and baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeOutcome:
    """Reward (negative primary cost) plus per-constraint excesses."""

    reward: float
    constraints: dict[str, float]


def penalized_reward(outcome: EpisodeOutcome, lambdas: dict[str, float]) -> float:
    """L = R - sum_i lambda_i * C_i."""
    total = outcome.reward
    for name, c in outcome.constraints.items():
        total -= lambdas.get(name, 0.0) * c
    return float(total)


def self_competing_baseline(values, alpha: float) -> float:
    """The alpha-quantile of the sampled rewards: the k-th smallest value
    with k = ceil(alpha * N), i.e. the lowest value covering an alpha
    share of the distribution."""
    vals = np.sort(np.asarray(values, dtype=np.float64))
    n = vals.size
    if n == 0:
        raise ValueError("baseline needs at least one value")
    k = max(int(math.ceil(alpha * n - 1e-9)), 1)
    return float(vals[min(k, n) - 1])


def moving_average_baseline(prev_m: float | None, value: float, beta: float) -> float:
    """M <- beta*M + (1-beta)*value; the first call returns the value."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"decay must be in [0, 1), got {beta}")
    if prev_m is None:
        return float(value)
    return float(beta * prev_m + (1.0 - beta) * value)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def clip_gradients_(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm.
    Returns the pre-clip norm."""
    norm = params.grad_global_norm()
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= scale
    return norm


def adam_update(theta: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8):
    """One bias-corrected Adam step; returns (theta', m', v')."""
    if theta.shape != g.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class AdamState:
    """First/second moment accumulators for every named parameter."""

    def __init__(self, params: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: ParamStore, lr: float) -> None:
        self.t += 1
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[name], self.v[name] = adam_update(
                p.data, g, self.m[name], self.v[name], self.t, lr,
                self.beta1, self.beta2, self.eps)


def reinforce_backward(logprob: Tensor, advantages: np.ndarray, denom: int,
                       tape: Tape) -> None:
    """Accumulate (1/denom) * sum adv_e * grad logprob_e as ascent, i.e.
    run backward on the negated weighted sum (Adam then descends it)."""
    weights = -(np.asarray(advantages, dtype=np.float64) / float(denom))
    loss = tn.tsum(tn.mul(logprob, weights, tape), axis=None, tape=tape)
    backward(loss, tape)


# ---------------------------------------------------------------------------
# Rollout engines
# ---------------------------------------------------------------------------

class RngBank:
    """Uniform draws for lockstep rollouts.

    Shared mode consumes one stream for the whole batch (fast, used in
    training). Per-env mode gives every environment its own child stream,
    so each rollout's trajectory does not depend on how many others run
    beside it - that is what makes best-of-N monotone in N on a shared
    seed."""

    def __init__(self, rng: np.random.Generator, n_envs: int, per_env: bool):
        self.per_env = per_env
        if per_env:
            self.rngs = rng.spawn(n_envs)
        else:
            self.rng = rng
        self.n_envs = n_envs

    def rows(self, cols: int, alive: np.ndarray) -> np.ndarray:
        if not self.per_env:
            return self.rng.random((self.n_envs, cols))
        out = np.zeros((self.n_envs, cols))
        for e in np.nonzero(alive)[0]:
            out[e] = self.rngs[e].random(cols)
        return out


@dataclass
class JspRollouts:
    schedules: list[Schedule]
    makespans: np.ndarray
    idle: np.ndarray          # constraint excess per episode
    objectives: np.ndarray    # makespan + lam * idle
    logprob: Tensor | None    # (E,) differentiable episode log-probs
    trace: list[dict] | None = None  # per-decision states/masks/actions


def rollout_jsp(net: JspPolicyNet, insts: list[JspInstance], copies: int,
                rng: np.random.Generator, *, tape: Tape | None = None,
                training: bool = False, greedy: bool = False,
                per_env_streams: bool = False, lam: float = 0.0,
                t_th: float = 0.0, idle_mode: str = "machine_gap",
                collect_trace: bool = False) -> JspRollouts:
    """Run len(insts)*copies episodes in lockstep.

    Greedy mode thresholds each Bernoulli at 0.5; if that selects nothing
    while nothing is in flight (the state could never change), the single
    highest-probability feasible job is forced so decoding terminates.
    Sampling mode simply resamples such states and falls back to the same
    forcing after a generous iteration budget.
    """
    batch = JspBatch(insts, copies)
    enc = net.encode_instances(insts, tape, training, rng)
    bank = RngBank(rng, batch.n_envs, per_env_streams)
    n, m = batch.n_jobs, batch.n_machines
    logprob_terms: list[Tensor] = []
    trace: list[dict] | None = [] if collect_trace else None
    soft_cap = 8 * n * m + 64
    hard_cap = 200 * n * m + 10_000
    iters = 0
    while True:
        done = batch.done()
        if done.all():
            break
        mask = batch.mask() & ~done[:, None]
        z = net.logits(enc, batch.inst_idx, batch.release.astype(np.float64),
                       batch.remaining.astype(np.float64), batch.next_op, tape)
        probs = policy._expit_np(z.data) * mask
        if greedy:
            act = probs > 0.5
        else:
            act = (bank.rows(n, ~done) < probs) & mask
        idle_state = (batch.release == 0).all(axis=1) & (batch.remaining == 0).all(axis=1)
        stalled = ~done & ~act.any(axis=1) & idle_state
        if stalled.any() and (greedy or iters >= soft_cap):
            rows = np.nonzero(stalled)[0]
            act[rows, np.argmax(probs[rows], axis=1)] = True
        if tape is not None:
            logprob_terms.append(bernoulli_log_prob(z, act, mask, tape))
        if trace is not None:
            trace.append({"states": [batch.state_of(e) for e in range(batch.n_envs)],
                          "mask": mask.copy(), "action": act.copy()})
        batch.apply(act)
        iters += 1
        if iters > hard_cap:
            raise RuntimeError("rollout failed to terminate")

    schedules = [batch.schedule_of(e) for e in range(batch.n_envs)]
    makespans = np.array([s.makespan for s in schedules], dtype=np.float64)
    idle = np.array(
        [jsp_env.idle_excess(s, batch.insts[batch.inst_idx[e]], t_th, idle_mode)
         for e, s in enumerate(schedules)])
    objectives = makespans + lam * idle
    logprob = None
    if tape is not None:
        total = logprob_terms[0]
        for term in logprob_terms[1:]:
            total = tn.add(total, term, tape)
        logprob = total
    return JspRollouts(schedules, makespans, idle, objectives, logprob, trace)


@dataclass
class VrapRollouts:
    placements: list[Placement]
    energies: np.ndarray
    latency_excess: np.ndarray
    objectives: np.ndarray
    logprob: Tensor | None


def rollout_vrap(net: VrapPolicyNet, insts: list[VrapInstance], copies: int,
                 rng: np.random.Generator, *, tape: Tape | None = None,
                 training: bool = False, greedy: bool = False,
                 per_env_streams: bool = False, lam: float = 0.0) -> VrapRollouts:
    """Place the chain host by host; environments whose mask empties out
    abort with the infeasibility sentinel."""
    batch = VrapBatch(insts, copies)
    enc = net.encode_instances(insts, tape, training, rng)
    bank = RngBank(rng, batch.n_envs, per_env_streams)
    logprob_terms: list[Tensor] = []
    for pos in range(batch.chain_len):
        mask = batch.mask()
        newly_dead = ~batch.dead & ~mask.any(axis=1)
        if newly_dead.any():
            batch.mark_dead(np.nonzero(newly_dead)[0])
            mask = batch.mask()
        live = ~batch.dead
        if not live.any():
            break
        feats = net.host_features(batch.insts, batch.inst_idx, batch.cpu_free,
                                  batch.bw_free, batch.placement, pos)
        z = net.logits(enc, batch.inst_idx, feats, pos, tape)
        probs = masked_softmax_probs(z.data, mask)
        if greedy:
            choice = np.argmax(probs, axis=1)
        else:
            u = bank.rows(1, live)[:, 0]
            cum = probs.cumsum(axis=1)
            norm = np.maximum(cum[:, -1], 1e-300)
            choice = ((u * norm)[:, None] >= cum).sum(axis=1)
            choice = np.minimum(choice, batch.n_hosts - 1)
        if tape is not None:
            # dead rows get a fully-open mask and choice 0, then are zeroed
            safe_mask = mask.copy()
            safe_mask[~live] = True
            safe_choice = np.where(live, choice, 0)
            lp = categorical_log_prob(z, safe_choice, safe_mask, tape)
            logprob_terms.append(tn.mul(lp, live.astype(np.float64), tape))
        batch.apply(choice)
    placements = [batch.result_of(e) for e in range(batch.n_envs)]
    energies = np.array([p.energy if p.feasible else
                         vrap_env.infeasible_objective(batch.insts[batch.inst_idx[e]])
                         for e, p in enumerate(placements)])
    excess = np.array([vrap_env.latency_excess(p, batch.insts[batch.inst_idx[e]])
                       if p.feasible else 0.0
                       for e, p in enumerate(placements)])
    objectives = energies + lam * excess
    logprob = None
    if tape is not None:
        total = logprob_terms[0]
        for term in logprob_terms[1:]:
            total = tn.add(total, term, tape)
        logprob = total
    return VrapRollouts(placements, energies, excess, objectives, logprob)


# ---------------------------------------------------------------------------
# Training configuration and state
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    problem: str = "jsp"
    # jsp instance distribution
    n_jobs: int = 6
    n_machines: int = 6
    dur_lo: int = 1
    dur_hi: int = 99
    # vrap instance distribution
    n_hosts: int = 4
    catalog_size: int = 6
    chain_len: int = 4
    vrap_gen: VrapGenConfig = field(default_factory=VrapGenConfig)
    # algorithm
    batch_instances: int = 20       # B
    samples_per_instance: int = 40  # N
    alpha: float = 0.1
    lam: float = 0.0
    t_th: float = 0.0
    idle_mode: str = "machine_gap"
    lr: float = 5e-4
    grad_clip_norm: float = 1.0
    dropout: float = 0.1
    epochs: int = 300
    seed: int = 0
    baseline_mode: str = "quantile"  # or "moving_average"
    beta: float = 0.9
    dataset_mode: str = "fixed"      # or "fresh"
    dataset_size: int = 100
    chunk_instances: int = 4         # instances per gradient chunk
    # model
    embed: int = 64
    lstm_hidden: int = 0             # 0 -> problem default (64 jsp / 16 vrap)
    decoder: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        if self.batch_instances < 1 or self.samples_per_instance < 1:
            raise ValueError("B and N must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must be in [0, 1)")
        if self.baseline_mode not in ("quantile", "moving_average"):
            raise ValueError(f"unknown baseline mode {self.baseline_mode!r}")
        if self.dataset_mode not in ("fixed", "fresh"):
            raise ValueError(f"unknown dataset mode {self.dataset_mode!r}")
        if self.problem not in ("jsp", "vrap"):
            raise ValueError(f"unknown problem {self.problem!r}")

    def lambdas(self) -> dict[str, float]:
        name = "idle_excess" if self.problem == "jsp" else "latency_excess"
        return {name: self.lam}


@dataclass
class EpochStats:
    epoch: int
    mean_l: float
    std_l: float
    mean_reward: float
    mean_penalty: float
    grad_norm: float
    seconds: float

    CSV_HEADER = "epoch,mean_L,std_L,mean_reward,mean_penalty,grad_norm,seconds"

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.mean_l!r},{self.std_l!r},{self.mean_reward!r},"
                f"{self.mean_penalty!r},{self.grad_norm!r},{self.seconds!r}")


def build_net(cfg: TrainConfig):
    if cfg.problem == "jsp":
        hidden = cfg.lstm_hidden or 64
        return JspPolicyNet(JspPolicyConfig(
            cfg.n_jobs, cfg.n_machines, cfg.dur_hi, cfg.embed, hidden,
            cfg.decoder, cfg.dropout), seed=cfg.seed)
    hidden = cfg.lstm_hidden or 16
    return VrapPolicyNet(VrapPolicyConfig(
        VrapScales.from_gen_config(cfg.vrap_gen), cfg.embed, hidden,
        cfg.decoder, cfg.dropout), seed=cfg.seed)


def build_dataset(cfg: TrainConfig) -> list:
    if cfg.dataset_mode == "fresh":
        return []
    return [_gen_instance(cfg, make_dataset_seed(cfg.seed, i))
            for i in range(cfg.dataset_size)]


def make_dataset_seed(seed: int, i: int) -> int:
    return (seed * 1_000_003 + 7919 * i + 17) % (2 ** 31)


def _gen_instance(cfg: TrainConfig, seed: int):
    if cfg.problem == "jsp":
        return gen_jsp(cfg.n_jobs, cfg.n_machines, cfg.dur_lo, cfg.dur_hi, seed)
    return gen_vrap(cfg.n_hosts, cfg.catalog_size, cfg.chain_len, seed, cfg.vrap_gen)


class TrainerState:
    """Everything one run owns: net, optimizer, dataset, counters."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.net = build_net(cfg)
        self.adam = AdamState(self.net.params)
        self.dataset = build_dataset(cfg)
        self.epoch = 0
        self.moving_m: float | None = None

    # -- persistence ---------------------------------------------------------

    def checkpoint_store(self) -> ParamStore:
        store = ParamStore()
        for name, p in self.net.params.items():
            store.add(name, tn.param(p.data.copy()))
        for name in self.net.params.names():
            store.add(f"adam.m.{name}", tn.param(self.adam.m[name].copy()))
            store.add(f"adam.v.{name}", tn.param(self.adam.v[name].copy()))
        store.add("train.t", tn.param(np.array(float(self.adam.t))))
        store.add("train.epoch", tn.param(np.array(float(self.epoch))))
        store.add("train.moving_m", tn.param(np.array(
            np.nan if self.moving_m is None else self.moving_m)))
        return store

    def save(self, path) -> None:
        self.checkpoint_store().save(path)

    def restore(self, values: dict[str, np.ndarray]) -> None:
        self.net.params.load_values(
            {k: v for k, v in values.items() if k in self.net.params})
        for name in self.net.params.names():
            self.adam.m[name] = values[f"adam.m.{name}"].copy()
            self.adam.v[name] = values[f"adam.v.{name}"].copy()
        self.adam.t = int(values["train.t"])
        self.epoch = int(values["train.epoch"])
        m = float(values["train.moving_m"])
        self.moving_m = None if math.isnan(m) else m


def _epoch_instances(state: TrainerState) -> list:
    cfg = state.cfg
    rng = make_rng(cfg.seed, 0xE90C, state.epoch)
    if cfg.dataset_mode == "fixed":
        idx = rng.integers(0, len(state.dataset), size=cfg.batch_instances)
        return [state.dataset[i] for i in idx]
    seeds = rng.integers(0, 2 ** 31, size=cfg.batch_instances)
    return [_gen_instance(cfg, int(s)) for s in seeds]


def train_epoch(state: TrainerState) -> EpochStats:
    """One full pass of the learning algorithm; see the module docstring."""
    cfg = state.cfg
    t0 = time.perf_counter()
    insts = _epoch_instances(state)
    B, N = cfg.batch_instances, cfg.samples_per_instance
    state.net.params.zero_grads()

    all_l: list[np.ndarray] = []
    all_reward: list[np.ndarray] = []
    all_penalty: list[np.ndarray] = []
    chunk = max(cfg.chunk_instances, 1)
    for ci, lo in enumerate(range(0, B, chunk)):
        part = insts[lo:lo + chunk]
        tape = Tape()
        rng = make_rng(cfg.seed, 0xC409, state.epoch, ci)
        if cfg.problem == "jsp":
            res = rollout_jsp(state.net, part, N, rng, tape=tape, training=True,
                              lam=cfg.lam, t_th=cfg.t_th, idle_mode=cfg.idle_mode)
            reward = -res.makespans
            penalty = res.idle
        else:
            res = rollout_vrap(state.net, part, N, rng, tape=tape, training=True,
                               lam=cfg.lam)
            reward = -res.energies
            penalty = res.latency_excess
        l_vals = -res.objectives
        if cfg.baseline_mode == "quantile":
            base = np.empty_like(l_vals)
            for j in range(len(part)):
                sl = slice(j * N, (j + 1) * N)
                base[sl] = self_competing_baseline(l_vals[sl], cfg.alpha)
        else:
            if state.moving_m is None:
                base = l_vals.copy()  # first iteration: M equals each episode's L
            else:
                base = np.full_like(l_vals, state.moving_m)
        reinforce_backward(res.logprob, l_vals - base, B * N, tape)
        all_l.append(l_vals)
        all_reward.append(reward)
        all_penalty.append(penalty)

    grad_norm = clip_gradients_(state.net.params, cfg.grad_clip_norm)
    state.adam.step(state.net.params, cfg.lr)
    l_cat = np.concatenate(all_l)
    if cfg.baseline_mode == "moving_average":
        state.moving_m = moving_average_baseline(state.moving_m, float(l_cat.mean()),
                                                 cfg.beta)
    stats = EpochStats(
        epoch=state.epoch,
        mean_l=float(l_cat.mean()),
        std_l=float(l_cat.std()),
        mean_reward=float(np.concatenate(all_reward).mean()),
        mean_penalty=float(np.concatenate(all_penalty).mean()),
        grad_norm=float(grad_norm),
        seconds=time.perf_counter() - t0,
    )
    state.epoch += 1
    return stats


def train(state: TrainerState, epochs: int | None = None,
          on_epoch=None) -> list[EpochStats]:
    out = []
    for _ in range(epochs if epochs is not None else state.cfg.epochs):
        stats = train_epoch(state)
        out.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return out


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def greedy_decode(net, inst, *, lam: float = 0.0, t_th: float = 0.0,
                  idle_mode: str = "machine_gap"):
    """Deterministic decode; returns (solution, objective)."""
    rng = make_rng(0)  # greedy draws nothing, but the API wants a stream
    if isinstance(net, JspPolicyNet):
        res = rollout_jsp(net, [inst], 1, rng, greedy=True, lam=lam, t_th=t_th,
                          idle_mode=idle_mode)
        return res.schedules[0], float(res.objectives[0])
    res = rollout_vrap(net, [inst], 1, rng, greedy=True, lam=lam)
    return res.placements[0], float(res.objectives[0])


def sample_decode(net, inst, n_samples: int, rng: np.random.Generator, *,
                  lam: float = 0.0, t_th: float = 0.0,
                  idle_mode: str = "machine_gap"):
    """Best of n_samples stochastic rollouts; per-rollout streams make the
    best-of-first-k objective nonincreasing in k for a shared seed.
    Returns (solution, objective); infeasible VRAP rollouts lose to any
    feasible one and the sentinel is returned only if all abort."""
    if isinstance(net, JspPolicyNet):
        res = rollout_jsp(net, [inst], n_samples, rng, per_env_streams=True,
                          lam=lam, t_th=t_th, idle_mode=idle_mode)
        best = int(np.argmin(res.objectives))
        return res.schedules[best], float(res.objectives[best])
    res = rollout_vrap(net, [inst], n_samples, rng, per_env_streams=True, lam=lam)
    feas = [e for e, p in enumerate(res.placements) if p.feasible]
    if not feas:
        return res.placements[0], float(res.objectives[0])
    best = min(feas, key=lambda e: res.objectives[e])
    return res.placements[best], float(res.objectives[best])
