"""Stochastic policies for both problems.

Shared structure: the instance is embedded and encoded once per episode
(backward LSTM, so each position summarizes what is still ahead), the
dynamic environment state is embedded at every decision, and the decoder
scores each candidate (job / host) from the concatenation of the
embedded state, a glimpse into the encoding at the current progress
pointer, and the raw time-left glimpse. Infeasible candidates get
probability exactly zero.

The JSP head is an independent Bernoulli per job ("schedule its next
operation now?"); the VRAP head is a categorical over hosts. Both
forward paths are batched over environments; the single-state functions
are thin batch-of-one wrappers, so there is exactly one code path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor_nn as tn
from .instances import JspInstance, VrapInstance, VrapGenConfig
from .jsp_env import JspState
from .rng import make_rng
from .tensor_nn import ParamStore, Tape, Tensor
from .vrap_env import VrapState

MASK_FILL = -1e30  # large negative logit fill; exp() underflows to exactly 0


# ---------------------------------------------------------------------------
# JSP policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JspPolicyConfig:
    n_jobs: int
    n_machines: int
    dur_hi: int = 99
    embed: int = 64
    lstm_hidden: int = 64
    decoder: tuple[int, ...] = (128, 64)
    dropout: float = 0.1
    # smooth bound on the Bernoulli logits (logit_cap * tanh(z / logit_cap)).
    # Keeps per-job probabilities strictly inside (0, 1) so the trained
    # policy stays stochastic: sampling decode needs rollout diversity,
    # and constraint shaping needs exploration to survive convergence.
    logit_cap: float = 3.0


@dataclass(frozen=True)
class EncodedJsp:
    """Per-operation suffix encodings for a batch of instances.

    Row layout of ``enc``: position-major, ``pos * (I*n) + inst * n + job``.
    """

    enc: Tensor
    n_insts: int


class JspPolicyNet:
    def __init__(self, cfg: JspPolicyConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamStore()
        rng = make_rng(seed, 0x504A)  # stream tag 'PJ'
        p, H = self.params, cfg.embed
        p.add("embed_s.w", tn.xavier_init((2, H), rng))
        p.add("embed_s.b", tn.zeros_init(H))
        lstm = tn.lstm_params(H, cfg.lstm_hidden, rng)
        p.add("enc.wx", lstm["wx"])
        p.add("enc.wh", lstm["wh"])
        p.add("enc.b", lstm["b"])
        dyn_in = cfg.n_machines + cfg.n_jobs
        p.add("embed_d.w", tn.xavier_init((dyn_in, H), rng))
        p.add("embed_d.b", tn.zeros_init(H))
        width = H + cfg.lstm_hidden + 1
        for li, w in enumerate(cfg.decoder):
            p.add(f"dec{li}.w", tn.xavier_init((width, w), rng))
            p.add(f"dec{li}.b", tn.zeros_init(w))
            width = w
        p.add("head.w", tn.xavier_init((width, 1), rng))
        p.add("head.b", tn.zeros_init(1))

    def _check(self, inst: JspInstance) -> None:
        if inst.n_jobs != self.cfg.n_jobs or inst.n_machines != self.cfg.n_machines:
            raise ValueError(
                f"model was built for {self.cfg.n_jobs}x{self.cfg.n_machines}, "
                f"instance is {inst.n_jobs}x{inst.n_machines}"
            )

    def encode_instances(self, insts: list[JspInstance], tape: Tape | None = None,
                         training: bool = False,
                         rng: np.random.Generator | None = None) -> EncodedJsp:
        """Backward-LSTM encodings, computed once and reused all episode."""
        for it in insts:
            self._check(it)
        cfg = self.cfg
        n, m, I = cfg.n_jobs, cfg.n_machines, len(insts)
        mach = np.stack([it.machine for it in insts]).astype(np.float64)
        dur = np.stack([it.duration for it in insts]).astype(np.float64)
        mach /= max(m - 1, 1)
        dur /= cfg.dur_hi
        feats = np.stack([mach, dur], axis=-1)  # (I, n, m, 2)
        seq = []
        for j in range(m):
            x = tn.tensor(feats[:, :, j, :].reshape(I * n, 2))
            seq.append(tn.linear(x, self.params["embed_s.w"], self.params["embed_s.b"], tape))
        hs = tn.lstm_encode_backward(
            seq, {"wx": self.params["enc.wx"], "wh": self.params["enc.wh"],
                  "b": self.params["enc.b"]}, tape)
        enc = tn.concat(hs, axis=0, tape=tape)  # (m*I*n, hidden), position-major
        enc = tn.dropout(enc, cfg.dropout, training, rng, tape)
        return EncodedJsp(enc, I)

    def logits(self, enc: EncodedJsp, inst_local: np.ndarray, release: np.ndarray,
               remaining: np.ndarray, next_op: np.ndarray,
               tape: Tape | None = None) -> Tensor:
        """(E, n_jobs) logits for a lockstep batch of environment states."""
        cfg = self.cfg
        n, m = cfg.n_jobs, cfg.n_machines
        E, I = inst_local.shape[0], enc.n_insts
        i_t = np.minimum(next_op, m - 1)
        flat = i_t * (I * n) + inst_local[:, None] * n + np.arange(n)[None, :]
        ctx = tn.gather_rows(enc.enc, flat.reshape(-1), tape)  # (E*n, hidden)
        unfinished = (next_op < m).astype(np.float64).reshape(E * n, 1)
        ctx = tn.mul(ctx, unfinished, tape)  # finished jobs glimpse nothing
        dyn = np.concatenate([release / cfg.dur_hi, remaining / cfg.dur_hi], axis=1)
        xd = tn.linear(tn.tensor(dyn), self.params["embed_d.w"], self.params["embed_d.b"], tape)
        xd = tn.repeat_rows(xd, n, tape)  # (E*n, embed)
        dhat = tn.tensor((remaining / cfg.dur_hi).reshape(E * n, 1))
        h = tn.concat([xd, ctx, dhat], axis=1, tape=tape)
        for li in range(len(cfg.decoder)):
            h = tn.relu(tn.linear(h, self.params[f"dec{li}.w"], self.params[f"dec{li}.b"], tape), tape)
        z = tn.linear(h, self.params["head.w"], self.params["head.b"], tape)
        if cfg.logit_cap > 0:
            z = tn.mul(tn.tanh(tn.mul(z, 1.0 / cfg.logit_cap, tape), tape),
                       cfg.logit_cap, tape)
        return tn.reshape(z, (E, n), tape)


def bernoulli_log_prob(logits: Tensor, action: np.ndarray, mask: np.ndarray,
                       tape: Tape | None = None) -> Tensor:
    """(E,) sum over unmasked jobs of log Bernoulli(action | sigmoid(logit))."""
    a = action.astype(np.float64)
    keep = mask.astype(np.float64)
    lp = tn.log_sigmoid(logits, tape)
    ln = tn.log_sigmoid(tn.neg(logits, tape), tape)
    terms = tn.add(tn.mul(lp, a, tape), tn.mul(ln, 1.0 - a, tape), tape)
    return tn.tsum(tn.mul(terms, keep, tape), axis=1, tape=tape)


# ---------------------------------------------------------------------------
# VRAP policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VrapScales:
    """Fixed normalization constants recorded in the model manifest."""

    host_cpu: float
    host_bw: float
    host_lat: float
    vm_cpu: float
    vm_bw: float
    vm_lat: float

    @classmethod
    def from_gen_config(cls, cfg: VrapGenConfig) -> "VrapScales":
        return cls(cfg.host_cpu[1], cfg.host_bw[1], cfg.host_lat[1],
                   cfg.vm_cpu[1], cfg.vm_bw[1], cfg.vm_lat[1])


@dataclass(frozen=True)
class VrapPolicyConfig:
    scales: VrapScales
    embed: int = 64
    lstm_hidden: int = 16
    decoder: tuple[int, ...] = (128, 64)
    dropout: float = 0.1


N_HOST_FEATS = 7  # cpu_free, bw_free, lat, cpu_cap, bw_cap, active, prev_here


@dataclass(frozen=True)
class EncodedVrap:
    """Chain encodings; row layout ``pos * I + inst``."""

    enc: Tensor
    n_insts: int
    chain_len: int


class VrapPolicyNet:
    def __init__(self, cfg: VrapPolicyConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamStore()
        rng = make_rng(seed, 0x5056)  # stream tag 'PV'
        p = self.params
        p.add("embed_v.w", tn.xavier_init((3, cfg.lstm_hidden), rng))
        p.add("embed_v.b", tn.zeros_init(cfg.lstm_hidden))
        lstm = tn.lstm_params(cfg.lstm_hidden, cfg.lstm_hidden, rng)
        p.add("enc.wx", lstm["wx"])
        p.add("enc.wh", lstm["wh"])
        p.add("enc.b", lstm["b"])
        p.add("embed_h.w", tn.xavier_init((N_HOST_FEATS, cfg.embed), rng))
        p.add("embed_h.b", tn.zeros_init(cfg.embed))
        width = cfg.embed + cfg.lstm_hidden + 1
        for li, w in enumerate(cfg.decoder):
            p.add(f"dec{li}.w", tn.xavier_init((width, w), rng))
            p.add(f"dec{li}.b", tn.zeros_init(w))
            width = w
        p.add("head.w", tn.xavier_init((width, 1), rng))
        p.add("head.b", tn.zeros_init(1))

    def encode_instances(self, insts: list[VrapInstance], tape: Tape | None = None,
                         training: bool = False,
                         rng: np.random.Generator | None = None) -> EncodedVrap:
        L = insts[0].chain_len
        for it in insts:
            if it.chain_len != L:
                raise ValueError("all instances in a batch must share chain length")
        s = self.cfg.scales
        I = len(insts)
        feats = np.zeros((I, L, 3))
        for ii, it in enumerate(insts):
            for pos, vm in enumerate(it.chain_vms()):
                feats[ii, pos] = (vm.cpu / s.vm_cpu, vm.bw / s.vm_bw,
                                  vm.compute_latency / s.vm_lat)
        seq = [tn.linear(tn.tensor(feats[:, j, :]), self.params["embed_v.w"],
                         self.params["embed_v.b"], tape) for j in range(L)]
        hs = tn.lstm_encode_backward(
            seq, {"wx": self.params["enc.wx"], "wh": self.params["enc.wh"],
                  "b": self.params["enc.b"]}, tape)
        enc = tn.concat(hs, axis=0, tape=tape)  # (L*I, hidden)
        enc = tn.dropout(enc, self.cfg.dropout, training, rng, tape)
        return EncodedVrap(enc, I, L)

    def host_features(self, insts: list[VrapInstance], inst_local: np.ndarray,
                      cpu_free: np.ndarray, bw_free: np.ndarray,
                      placement: np.ndarray, position: int) -> np.ndarray:
        """(E, H, F) observation of the host pool."""
        s = self.cfg.scales
        E, H = cpu_free.shape
        feats = np.zeros((E, H, N_HOST_FEATS))
        caps_cpu = np.stack([it.host_cpu() for it in insts])[inst_local]
        caps_bw = np.stack([it.host_bw() for it in insts])[inst_local]
        lats = np.stack([it.host_lat() for it in insts])[inst_local]
        feats[:, :, 0] = cpu_free / s.host_cpu
        feats[:, :, 1] = bw_free / s.host_bw
        feats[:, :, 2] = lats / s.host_lat
        feats[:, :, 3] = caps_cpu / s.host_cpu
        feats[:, :, 4] = caps_bw / s.host_bw
        if position > 0:
            placed = placement[:, :position]
            for e in range(E):
                feats[e, placed[e][placed[e] >= 0], 5] = 1.0
            prev = placement[:, position - 1]
            ok = prev >= 0
            feats[np.arange(E)[ok], prev[ok], 6] = 1.0
        return feats

    def logits(self, enc: EncodedVrap, inst_local: np.ndarray, feats: np.ndarray,
               position: int, tape: Tape | None = None) -> Tensor:
        """(E, n_hosts) logits for placing chain[position]."""
        E, H, F = feats.shape
        x = tn.linear(tn.tensor(feats.reshape(E * H, F)),
                      self.params["embed_h.w"], self.params["embed_h.b"], tape)
        ctx = tn.gather_rows(enc.enc, position * enc.n_insts + inst_local, tape)
        ctx = tn.repeat_rows(ctx, H, tape)  # (E*H, hidden)
        frac = np.full((E * H, 1), position / max(enc.chain_len, 1))
        h = tn.concat([x, ctx, tn.tensor(frac)], axis=1, tape=tape)
        for li in range(len(self.cfg.decoder)):
            h = tn.relu(tn.linear(h, self.params[f"dec{li}.w"], self.params[f"dec{li}.b"], tape), tape)
        z = tn.linear(h, self.params["head.w"], self.params["head.b"], tape)
        return tn.reshape(z, (E, H), tape)


def masked_log_softmax(logits: Tensor, mask: np.ndarray,
                       tape: Tape | None = None) -> Tensor:
    """log softmax with masked entries pushed to probability exactly 0."""
    keep = mask.astype(np.float64)
    filled = tn.add(tn.mul(logits, keep, tape), tn.tensor(MASK_FILL * (1.0 - keep)), tape)
    return tn.log_softmax(filled, axis=-1, tape=tape)


def categorical_log_prob(logits: Tensor, choice: np.ndarray, mask: np.ndarray,
                         tape: Tape | None = None) -> Tensor:
    """(E,) log probability of the chosen host under the masked softmax."""
    logp = masked_log_softmax(logits, mask, tape)
    onehot = np.zeros(mask.shape)
    onehot[np.arange(mask.shape[0]), choice] = 1.0
    return tn.tsum(tn.mul(logp, onehot, tape), axis=1, tape=tape)


def masked_softmax_probs(logits_data: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Plain numpy masked softmax (sampling side, no gradients)."""
    filled = np.where(mask, logits_data, MASK_FILL)
    shifted = filled - filled.max(axis=-1, keepdims=True)
    e = np.exp(shifted) * mask
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


# ---------------------------------------------------------------------------
# Single-state distributions (batch-of-one wrappers over the same path)
# ---------------------------------------------------------------------------

@dataclass
class ActionDist:
    """Masked action distribution at one decision point.

    ``probs`` is the per-job Bernoulli vector (JSP) or the per-host
    categorical vector (VRAP); masked entries are exactly 0.
    """

    kind: str
    logits: Tensor
    probs: np.ndarray
    mask: np.ndarray
    tape: Tape | None


def encode_static(net: JspPolicyNet | VrapPolicyNet, inst, tape: Tape | None = None,
                  training: bool = False, rng: np.random.Generator | None = None):
    """Encode one instance; callers hold the result for the whole episode."""
    return net.encode_instances([inst], tape, training, rng)


def action_distribution(net, enc, state, mask: np.ndarray, inst=None,
                        tape: Tape | None = None) -> ActionDist:
    mask = np.asarray(mask, dtype=bool)
    if isinstance(net, JspPolicyNet):
        assert isinstance(state, JspState)
        z = net.logits(enc, np.zeros(1, dtype=np.int64),
                       state.machine_release[None, :].astype(np.float64),
                       state.job_remaining[None, :].astype(np.float64),
                       state.next_op[None, :], tape)
        probs = _expit_np(z.data[0]) * mask
        return ActionDist("bernoulli", z, probs, mask, tape)
    assert isinstance(state, VrapState)
    feats = net.host_features([inst], np.zeros(1, dtype=np.int64),
                              state.cpu_free[None, :], state.bw_free[None, :],
                              state.placement[None, :], state.position)
    z = net.logits(enc, np.zeros(1, dtype=np.int64), feats, state.position, tape)
    probs = masked_softmax_probs(z.data, mask[None, :])[0]
    return ActionDist("categorical", z, probs, mask, tape)


def _expit_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sample_action(dist: ActionDist, rng: np.random.Generator):
    if dist.kind == "bernoulli":
        return (rng.random(dist.probs.shape) < dist.probs) & dist.mask
    return sample_categorical(dist.probs[None, :], rng)[0]


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise draw from (E, H) probability rows (rows may sum to 0 for
    dead envs; those return 0 and must be ignored by the caller)."""
    cum = probs.cumsum(axis=1)
    u = rng.random(probs.shape[0]) * np.maximum(cum[:, -1], 1e-300)
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def greedy_action(dist: ActionDist):
    if dist.kind == "bernoulli":
        return dist.probs > 0.5
    return int(np.argmax(dist.probs))


def log_prob(dist: ActionDist, action) -> Tensor:
    """Differentiable log-probability of ``action`` under the distribution."""
    if dist.kind == "bernoulli":
        action = np.asarray(action, dtype=bool)
        if (action & ~dist.mask).any():
            raise ValueError("action selects masked jobs")
        return bernoulli_log_prob(dist.logits, action[None, :], dist.mask[None, :], dist.tape)
    choice = int(action)
    if not dist.mask[choice]:
        raise ValueError("action selects a masked host")
    return categorical_log_prob(dist.logits, np.array([choice]), dist.mask[None, :], dist.tape)


# ---------------------------------------------------------------------------
# Model manifest (problem type + sizes + normalization, next to checkpoints)
# ---------------------------------------------------------------------------

@dataclass
class ModelManifest:
    problem: str
    jsp: dict | None = None
    vrap: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelManifest":
        d = json.loads(text)
        return cls(problem=d["problem"], jsp=d.get("jsp"), vrap=d.get("vrap"),
                   extra=d.get("extra", {}))

    @classmethod
    def for_net(cls, net, extra: dict | None = None) -> "ModelManifest":
        if isinstance(net, JspPolicyNet):
            c = net.cfg
            return cls("jsp", jsp={"n_jobs": c.n_jobs, "n_machines": c.n_machines,
                                   "dur_hi": c.dur_hi, "embed": c.embed,
                                   "lstm_hidden": c.lstm_hidden,
                                   "decoder": list(c.decoder), "dropout": c.dropout,
                                   "logit_cap": c.logit_cap},
                       extra=extra or {})
        c = net.cfg
        return cls("vrap", vrap={"scales": asdict(c.scales), "embed": c.embed,
                                 "lstm_hidden": c.lstm_hidden,
                                 "decoder": list(c.decoder), "dropout": c.dropout},
                   extra=extra or {})


def net_from_manifest(man: ModelManifest) -> JspPolicyNet | VrapPolicyNet:
    if man.problem == "jsp":
        d = dict(man.jsp)
        d["decoder"] = tuple(d["decoder"])
        return JspPolicyNet(JspPolicyConfig(**d))
    d = dict(man.vrap)
    d["scales"] = VrapScales(**d["scales"])
    d["decoder"] = tuple(d["decoder"])
    return VrapPolicyNet(VrapPolicyConfig(**d))
