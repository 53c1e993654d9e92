"""Service-chain placement environment (energy objective, latency penalty).

The agent places the chain's VMs one by one onto hosts. CPU and
bandwidth capacity are hard constraints enforced through the mask; the
end-to-end latency agreement can only be judged on the finished
placement and enters the objective as a penalty.

Bandwidth accounting: every VM processes a flow of its own rate, so it
needs ingress plus egress bandwidth on its host, except that a flow
between chain neighbours placed on the same host is internal and free.
The mask charges a VM's own external flows conservatively (the egress
is provisional until the next VM lands); the step refunds the previous
VM's provisional egress when the current VM lands on the same host.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instances import VrapInstance


class ContractViolation(RuntimeError):
    """A step chose a host the feasibility mask had excluded."""


class IncompletePlacement(ValueError):
    """A placement-level operation was asked for before the chain ended."""


UNSET = -1

# numerical slack for capacity comparisons (capacities are small floats)
_EPS = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class VrapState:
    """Partially placed chain: free capacities and chosen hosts so far."""

    position: int            # next chain index to place
    cpu_free: np.ndarray     # (H,)
    bw_free: np.ndarray      # (H,)
    placement: np.ndarray    # (L,), UNSET where not yet placed

    def __post_init__(self):
        object.__setattr__(self, "cpu_free", _frozen(np.asarray(self.cpu_free, dtype=np.float64)))
        object.__setattr__(self, "bw_free", _frozen(np.asarray(self.bw_free, dtype=np.float64)))
        object.__setattr__(self, "placement", _frozen(np.asarray(self.placement, dtype=np.int64)))

    def hosts_active(self) -> np.ndarray:
        """y_i: a host is active iff this service placed a VM on it."""
        n_hosts = self.cpu_free.shape[0]
        active = np.zeros(n_hosts, dtype=bool)
        placed = self.placement[self.placement != UNSET]
        active[placed] = True
        return active


@dataclass(frozen=True)
class Placement:
    """A finished (or aborted) assignment of the chain to hosts."""

    hosts: np.ndarray        # (L,), UNSET entries only when infeasible
    energy: float
    latency_total: float
    feasible: bool

    def __post_init__(self):
        object.__setattr__(self, "hosts", _frozen(np.asarray(self.hosts, dtype=np.int64)))


def reset(inst: VrapInstance) -> VrapState:
    cpu_free = inst.host_cpu() * (1.0 - inst.occ_cpu)
    bw_free = inst.host_bw() * (1.0 - inst.occ_bw)
    return VrapState(0, cpu_free, bw_free, np.full(inst.chain_len, UNSET, dtype=np.int64))


def is_done(state: VrapState) -> bool:
    return state.position >= state.placement.shape[0]


def bw_requirement(inst: VrapInstance, position: int, prev_host: int) -> np.ndarray:
    """Per-host bandwidth needed to admit chain[position]: its provisional
    egress plus, unless the previous VM sits on the candidate host, its
    ingress. The first VM's ingress always crosses the host boundary."""
    vm = inst.vm_catalog[inst.chain[position]]
    req = np.full(inst.n_hosts, 2.0 * vm.bw)
    if position > 0 and prev_host != UNSET:
        req[prev_host] = vm.bw  # ingress internal when co-located
    return req


def feasible_mask(state: VrapState, inst: VrapInstance) -> np.ndarray:
    """mask[i]: host i can take the next VM within cpu and bw capacity."""
    if is_done(state):
        return np.zeros(inst.n_hosts, dtype=bool)
    vm = inst.vm_catalog[inst.chain[state.position]]
    prev_host = int(state.placement[state.position - 1]) if state.position > 0 else UNSET
    req = bw_requirement(inst, state.position, prev_host)
    return (state.cpu_free >= vm.cpu - _EPS) & (state.bw_free >= req - _EPS)


def step(state: VrapState, host: int, inst: VrapInstance) -> VrapState:
    """Place the next VM on ``host``: charge cpu, charge its external
    flows, refund the previous VM's provisional egress on co-location."""
    mask = feasible_mask(state, inst)
    if not 0 <= host < inst.n_hosts:
        raise ContractViolation(f"host {host} out of range")
    if not mask[host]:
        raise ContractViolation(f"host {host} is masked at position {state.position}")
    vm = inst.vm_catalog[inst.chain[state.position]]
    cpu_free = state.cpu_free.copy()
    bw_free = state.bw_free.copy()
    placement = state.placement.copy()
    cpu_free[host] -= vm.cpu
    bw_free[host] -= vm.bw  # provisional egress (refunded if the next VM co-locates)
    if state.position == 0:
        bw_free[host] -= vm.bw  # ingress from outside
    else:
        prev_host = int(placement[state.position - 1])
        if prev_host == host:
            prev_vm = inst.vm_catalog[inst.chain[state.position - 1]]
            bw_free[host] += prev_vm.bw  # refund: that egress became internal
        else:
            bw_free[host] -= vm.bw  # ingress from the previous host
    placement[state.position] = host
    return VrapState(state.position + 1, cpu_free, bw_free, placement)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def energy_of(hosts: np.ndarray, inst: VrapInstance) -> float:
    """Energy of a full assignment: active-host cost plus per-core and
    per-bandwidth prices of every VM (no co-location exemption here)."""
    vms = inst.chain_vms()
    w = inst.energy
    active = len(set(int(h) for h in hosts))
    cpu = sum(v.cpu for v in vms)
    bw = sum(v.bw for v in vms)
    return float(w.w_cpu * cpu + w.w_min * active + w.w_net * bw)


def latency_of(hosts: np.ndarray, inst: VrapInstance) -> float:
    """Total service latency: each VM's compute latency plus the link
    latency of the host it runs on."""
    host_lat = inst.host_lat()
    return float(sum(v.compute_latency for v in inst.chain_vms())
                 + sum(host_lat[int(h)] for h in hosts))


def infeasible_objective(inst: VrapInstance, factor: float = 10.0) -> float:
    """Sentinel objective for aborted episodes: ``factor`` times the
    all-hosts-active energy upper bound."""
    vms = inst.chain_vms()
    w = inst.energy
    bound = (w.w_min * inst.n_hosts
             + w.w_cpu * sum(v.cpu for v in vms)
             + w.w_net * sum(v.bw for v in vms))
    return float(factor * max(bound, 1.0))


def finish(state: VrapState, inst: VrapInstance) -> Placement:
    if not is_done(state):
        raise IncompletePlacement(f"chain placed only up to position {state.position}")
    hosts = state.placement
    return Placement(hosts, energy_of(hosts, inst), latency_of(hosts, inst), True)


def aborted(state: VrapState, inst: VrapInstance, factor: float = 10.0) -> Placement:
    """Outcome of an episode that hit an all-false mask."""
    return Placement(state.placement, infeasible_objective(inst, factor),
                     float("inf"), False)


def objective(pl: Placement, inst: VrapInstance, lam: float = 0.0,
              factor: float = 10.0) -> float:
    """energy + lam * (latency - threshold)+, or the sentinel when the
    placement was aborted."""
    if not pl.feasible:
        return infeasible_objective(inst, factor)
    excess = max(pl.latency_total - inst.latency_threshold, 0.0)
    return float(pl.energy + lam * excess)


def latency_excess(pl: Placement, inst: VrapInstance) -> float:
    if not pl.feasible:
        return float("inf")
    return max(pl.latency_total - inst.latency_threshold, 0.0)


def check_placement(pl: Placement, inst: VrapInstance) -> None:
    """Replay a feasible placement and assert capacities were respected."""
    if not pl.feasible:
        return
    state = reset(inst)
    for pos in range(inst.chain_len):
        state = step(state, int(pl.hosts[pos]), inst)
        if (state.cpu_free < -_EPS).any() or (state.bw_free < -_EPS).any():
            raise AssertionError("capacity went negative")


# ---------------------------------------------------------------------------
# Vectorized lockstep simulator
# ---------------------------------------------------------------------------

class VrapBatch:
    """E placement episodes in lockstep (same host count and chain length).

    Aborted environments (all-false mask before being given an action)
    are flagged and ignore further actions.
    """

    def __init__(self, insts: list[VrapInstance], copies: int = 1):
        if not insts:
            raise ValueError("need at least one instance")
        H, L = insts[0].n_hosts, insts[0].chain_len
        for it in insts:
            if it.n_hosts != H or it.chain_len != L:
                raise ValueError("all instances in a batch must share host count and chain length")
        self.insts = insts
        self.copies = copies
        self.n_envs = len(insts) * copies
        self.n_hosts, self.chain_len = H, L
        self.inst_idx = np.repeat(np.arange(len(insts)), copies)
        # per-instance chain requirement tables
        self.vm_cpu = np.stack([[it.vm_catalog[c].cpu for c in it.chain] for it in insts])
        self.vm_bw = np.stack([[it.vm_catalog[c].bw for c in it.chain] for it in insts])
        self.host_cpu0 = np.stack([it.host_cpu() * (1 - it.occ_cpu) for it in insts])
        self.host_bw0 = np.stack([it.host_bw() * (1 - it.occ_bw) for it in insts])
        E = self.n_envs
        self.position = 0
        self.cpu_free = self.host_cpu0[self.inst_idx].copy()
        self.bw_free = self.host_bw0[self.inst_idx].copy()
        self.placement = np.full((E, L), UNSET, dtype=np.int64)
        self.dead = np.zeros(E, dtype=bool)
        self._rows = np.arange(E)

    def done(self) -> bool:
        return self.position >= self.chain_len

    def mask(self) -> np.ndarray:
        """(E, H) feasibility; aborted envs report all-false."""
        if self.done():
            return np.zeros((self.n_envs, self.n_hosts), dtype=bool)
        cpu = self.vm_cpu[self.inst_idx, self.position]
        bw = self.vm_bw[self.inst_idx, self.position]
        req = np.broadcast_to((2.0 * bw)[:, None], (self.n_envs, self.n_hosts)).copy()
        if self.position > 0:
            prev = self.placement[:, self.position - 1]
            ok = prev != UNSET
            req[self._rows[ok], prev[ok]] = bw[ok]
        m = (self.cpu_free >= cpu[:, None] - _EPS) & (self.bw_free >= req - _EPS)
        m[self.dead] = False
        return m

    def mark_dead(self, rows: np.ndarray) -> None:
        self.dead[rows] = True

    def apply(self, hosts: np.ndarray) -> None:
        """Place the current VM of every live env on ``hosts[e]``."""
        if self.done():
            raise IncompletePlacement("chain already fully placed")
        mask = self.mask()
        live = ~self.dead
        rows = self._rows[live]
        h = np.asarray(hosts, dtype=np.int64)[live]
        if not mask[rows, h].all():
            bad = rows[~mask[rows, h]][0]
            raise ContractViolation(f"env {bad}: masked host chosen at position {self.position}")
        cpu = self.vm_cpu[self.inst_idx[rows], self.position]
        bw = self.vm_bw[self.inst_idx[rows], self.position]
        self.cpu_free[rows, h] -= cpu
        self.bw_free[rows, h] -= bw  # provisional egress
        if self.position == 0:
            self.bw_free[rows, h] -= bw  # ingress from outside
        else:
            prev = self.placement[rows, self.position - 1]
            co = prev == h
            self.bw_free[rows[~co], h[~co]] -= bw[~co]
            prev_bw = self.vm_bw[self.inst_idx[rows], self.position - 1]
            self.bw_free[rows[co], h[co]] += prev_bw[co]
        self.placement[rows, self.position] = h
        self.position += 1

    def result_of(self, e: int) -> Placement:
        inst = self.insts[self.inst_idx[e]]
        if self.dead[e]:
            return Placement(self.placement[e], infeasible_objective(inst),
                             float("inf"), False)
        if not self.done():
            raise IncompletePlacement("episode still running")
        hosts = self.placement[e]
        return Placement(hosts, energy_of(hosts, inst), latency_of(hosts, inst), True)


# ---------------------------------------------------------------------------
# Placement file format
# ---------------------------------------------------------------------------

def write_placement(pl: Placement) -> str:
    lines = ["vrap-placement-v1", f"feasible {int(pl.feasible)}"]
    for pos, h in enumerate(pl.hosts):
        lines.append(f"{pos} {h}")
    lines.append(f"energy {pl.energy!r}")
    lines.append(f"latency {pl.latency_total!r}")
    return "\n".join(lines) + "\n"


def parse_placement(text: str) -> Placement:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0] != "vrap-placement-v1":
        raise ValueError("missing 'vrap-placement-v1' header")
    feasible = bool(int(lines[1].split()[1]))
    hosts, energy, latency = [], 0.0, 0.0
    for line in lines[2:]:
        parts = line.split()
        if parts[0] == "energy":
            energy = float(parts[1])
        elif parts[0] == "latency":
            latency = float(parts[1])
        else:
            hosts.append(int(parts[1]))
    return Placement(np.array(hosts, dtype=np.int64), energy, latency, feasible)
