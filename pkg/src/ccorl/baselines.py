"""Classical comparison methods: dispatching rules, a GA, exact oracles.

The dispatching rules run through the environment, so their output is
feasible by construction. The GA uses the operation-sequence encoding
for the JSP (decoded to the semi-active schedule) and a host vector for
the VRAP (capacity violations score the infeasibility sentinel). The
brute-force oracles enumerate every operation sequence / placement and
are only intended for small instances and tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import jsp_env, vrap_env
from .instances import JspInstance, VrapInstance
from .jsp_env import Schedule, UNSET, feasible_mask, is_done, reset, step, to_schedule
from .rng import make_rng
from .vrap_env import Placement

DISPATCH_RULES = ("SPT", "LPT", "FCFS", "LWR")


# ---------------------------------------------------------------------------
# Dispatching rules
# ---------------------------------------------------------------------------

def _rule_key(inst: JspInstance, state, rule: str) -> np.ndarray:
    """Lower key = scheduled first. Ties resolve by ascending job index."""
    n = inst.n_jobs
    j = np.minimum(state.next_op, inst.n_machines - 1)
    cur = inst.duration[np.arange(n), j].astype(np.float64)
    if rule == "SPT":
        return cur
    if rule == "LPT":
        return -cur
    if rule == "FCFS":
        return np.arange(n, dtype=np.float64)
    if rule == "LWR":
        work = np.array([inst.duration[i, state.next_op[i]:].sum() for i in range(n)],
                        dtype=np.float64)
        return work
    raise ValueError(f"unknown dispatching rule {rule!r}")


def dispatch(inst: JspInstance, rule: str) -> Schedule:
    """Event-driven simulation: whenever jobs compete, each machine takes
    the feasible job the rule ranks best, and the clock advances."""
    state = reset(inst)
    n = inst.n_jobs
    while not is_done(state):
        mask = feasible_mask(state, inst)
        key = _rule_key(inst, state, rule)
        action = np.zeros(n, dtype=bool)
        need = inst.machine[np.arange(n), np.minimum(state.next_op, inst.n_machines - 1)]
        for k in np.unique(need[mask]):
            cands = np.nonzero(mask & (need == k))[0]
            action[cands[np.argmin(key[cands])]] = True
        state = step(state, action, inst)
    return to_schedule(state)


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

MAX_JSP_OPS = 9
MAX_VRAP_PLACEMENTS = 10 ** 6


def brute_force_jsp(inst: JspInstance, lam: float = 0.0, t_th: float = 0.0,
                    mode: str = "machine_gap") -> tuple[Schedule, float]:
    """Exact optimum over every operation sequence (semi-active decode),
    branch-and-bound on the partial makespan. Returns (schedule, objective)."""
    n, m = inst.n_jobs, inst.n_machines
    if n * m > MAX_JSP_OPS:
        raise ValueError(f"{n * m} operations exceed the enumeration budget of {MAX_JSP_OPS}")
    next_op = [0] * n
    job_avail = [0] * n
    mach_avail = [0] * m
    seq: list[int] = []
    best = {"obj": float("inf"), "seq": None}

    def rec(done_ops: int, cur_max: int):
        if cur_max >= best["obj"]:
            return
        if done_ops == n * m:
            sched = jsp_env.schedule_from_sequence(inst, seq)
            obj = jsp_env.objective(sched, inst, lam, t_th, mode)
            if obj < best["obj"]:
                best["obj"] = obj
                best["seq"] = list(seq)
            return
        for i in range(n):
            j = next_op[i]
            if j >= m:
                continue
            k = inst.machine[i, j]
            s = max(job_avail[i], mach_avail[k])
            e = s + inst.duration[i, j]
            prev_j, prev_m = job_avail[i], mach_avail[k]
            job_avail[i] = mach_avail[k] = e
            next_op[i] += 1
            seq.append(i)
            rec(done_ops + 1, max(cur_max, e))
            seq.pop()
            next_op[i] -= 1
            job_avail[i], mach_avail[k] = prev_j, prev_m

    rec(0, 0)
    sched = jsp_env.schedule_from_sequence(inst, best["seq"])
    return sched, best["obj"]


def brute_force_vrap(inst: VrapInstance, lam: float = 0.0) -> tuple[Placement, float]:
    """Exact optimum over all placements admitted by the capacity mask.
    Returns the sentinel outcome if nothing feasible exists."""
    H, L = inst.n_hosts, inst.chain_len
    if H ** L > MAX_VRAP_PLACEMENTS:
        raise ValueError(f"{H}^{L} placements exceed the enumeration budget")
    vms = inst.chain_vms()
    cpu_free = (inst.host_cpu() * (1 - inst.occ_cpu)).tolist()
    bw_free = (inst.host_bw() * (1 - inst.occ_bw)).tolist()
    hosts: list[int] = []
    best = {"obj": float("inf"), "hosts": None}
    eps = 1e-9

    def rec(pos: int):
        if pos == L:
            arr = np.array(hosts, dtype=np.int64)
            obj = vrap_env.energy_of(arr, inst) + lam * max(
                vrap_env.latency_of(arr, inst) - inst.latency_threshold, 0.0)
            if obj < best["obj"]:
                best["obj"] = obj
                best["hosts"] = list(hosts)
            return
        vm = vms[pos]
        prev = hosts[pos - 1] if pos > 0 else None
        for h in range(H):
            need_bw = vm.bw if prev == h else 2.0 * vm.bw
            if cpu_free[h] < vm.cpu - eps or bw_free[h] < need_bw - eps:
                continue
            cpu_free[h] -= vm.cpu
            bw_free[h] -= vm.bw
            refund = 0.0
            if pos == 0:
                bw_free[h] -= vm.bw
            elif prev == h:
                refund = vms[pos - 1].bw
                bw_free[h] += refund
            else:
                bw_free[h] -= vm.bw
            hosts.append(h)
            rec(pos + 1)
            hosts.pop()
            cpu_free[h] += vm.cpu
            bw_free[h] += vm.bw
            if pos == 0:
                bw_free[h] += vm.bw
            elif prev == h:
                bw_free[h] -= refund
            else:
                bw_free[h] += vm.bw

    rec(0)
    if best["hosts"] is None:
        return vrap_env.aborted(vrap_env.reset(inst), inst), vrap_env.infeasible_objective(inst)
    arr = np.array(best["hosts"], dtype=np.int64)
    pl = Placement(arr, vrap_env.energy_of(arr, inst), vrap_env.latency_of(arr, inst), True)
    return pl, best["obj"]


def brute_force(inst, lam: float = 0.0, t_th: float = 0.0,
                mode: str = "machine_gap"):
    """Problem-dispatching oracle; see the per-problem functions."""
    if isinstance(inst, JspInstance):
        return brute_force_jsp(inst, lam, t_th, mode)
    return brute_force_vrap(inst, lam)


# ---------------------------------------------------------------------------
# Genetic algorithm
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaConfig:
    population: int = 300
    crossover_rate: float = 0.8
    mutation_rate: float = 0.3
    generations: int = 500
    tournament: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        for r in (self.crossover_rate, self.mutation_rate):
            if not 0.0 <= r <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if self.generations < 0 or self.tournament < 1:
            raise ValueError("invalid generations/tournament size")


@dataclass
class GaResult:
    best: Schedule | Placement
    objective: float
    history: np.ndarray  # best-so-far objective after each generation


def _decode_population_jsp(genes: np.ndarray, inst: JspInstance):
    """Semi-active decode of every sequence at once: (P, n*m) -> times."""
    P, L = genes.shape
    n, m = inst.n_jobs, inst.n_machines
    rows = np.arange(P)
    next_op = np.zeros((P, n), dtype=np.int64)
    job_avail = np.zeros((P, n), dtype=np.int64)
    mach_avail = np.zeros((P, m), dtype=np.int64)
    starts = np.zeros((P, n, m), dtype=np.int64)
    ends = np.zeros((P, n, m), dtype=np.int64)
    for k in range(L):
        j = genes[:, k]
        op = next_op[rows, j]
        mach = inst.machine[j, op]
        s = np.maximum(job_avail[rows, j], mach_avail[rows, mach])
        e = s + inst.duration[j, op]
        starts[rows, j, op] = s
        ends[rows, j, op] = e
        job_avail[rows, j] = e
        mach_avail[rows, mach] = e
        next_op[rows, j] += 1
    return starts, ends


def _population_objective_jsp(starts, ends, inst, lam, t_th, mode) -> np.ndarray:
    obj = ends.reshape(ends.shape[0], -1).max(axis=1).astype(np.float64)
    if lam == 0.0:
        return obj
    P = starts.shape[0]
    excess = np.zeros(P)
    if mode == "machine_gap":
        for k in range(inst.n_machines):
            jj, oo = np.nonzero(inst.machine == k)
            s = np.sort(starts[:, jj, oo], axis=1)
            e_sorted = np.sort(ends[:, jj, oo], axis=1)
            gaps = s[:, 1:] - e_sorted[:, :-1]
            excess += np.maximum(gaps - t_th, 0.0).sum(axis=1)
    else:
        gaps = starts[:, :, 1:] - ends[:, :, :-1]
        excess += np.maximum(gaps - t_th, 0.0).sum(axis=(1, 2))
    return obj + lam * excess


def _jsp_crossover(p1: np.ndarray, p2: np.ndarray, jobs_keep: np.ndarray) -> np.ndarray:
    """Job-preserving order crossover: keep p1's genes for the chosen
    jobs in place, fill the rest with p2's other genes in p2 order."""
    child = np.empty_like(p1)
    keep = jobs_keep[p1]
    child[keep] = p1[keep]
    child[~keep] = p2[~jobs_keep[p2]]
    return child


def ga_jsp(inst: JspInstance, cfg: GaConfig = GaConfig(), lam: float = 0.0,
           t_th: float = 0.0, mode: str = "machine_gap") -> GaResult:
    rng = make_rng(cfg.seed, 0x6A67)  # stream tag 'jg'
    n, m = inst.n_jobs, inst.n_machines
    L = n * m
    P = cfg.population
    base = np.repeat(np.arange(n), m)
    pop = rng.permuted(np.tile(base, (P, 1)), axis=1)

    def fitness(genes):
        starts, ends = _decode_population_jsp(genes, inst)
        return _population_objective_jsp(starts, ends, inst, lam, t_th, mode)

    fit = fitness(pop)
    best_i = int(np.argmin(fit))
    best_genes, best_fit = pop[best_i].copy(), float(fit[best_i])
    history = [best_fit]
    for _ in range(cfg.generations):
        # tournament selection of P parents
        entrants = rng.integers(0, P, size=(P, cfg.tournament))
        parents = pop[entrants[np.arange(P), np.argmin(fit[entrants], axis=1)]]
        children = parents.copy()
        for a in range(0, P - 1, 2):
            if rng.random() < cfg.crossover_rate:
                jobs_keep = rng.random(n) < 0.5
                children[a] = _jsp_crossover(parents[a], parents[a + 1], jobs_keep)
                children[a + 1] = _jsp_crossover(parents[a + 1], parents[a], jobs_keep)
        do_mut = rng.random(P) < cfg.mutation_rate
        for e in np.nonzero(do_mut)[0]:
            i, j = rng.integers(0, L, size=2)
            children[e, i], children[e, j] = children[e, j], children[e, i]
        children[0] = best_genes  # elitism of one
        pop = children
        fit = fitness(pop)
        gen_best = int(np.argmin(fit))
        if fit[gen_best] < best_fit:
            best_fit = float(fit[gen_best])
            best_genes = pop[gen_best].copy()
        history.append(best_fit)
    sched = jsp_env.schedule_from_sequence(inst, best_genes)
    return GaResult(sched, best_fit, np.array(history))


def _decode_population_vrap(genes: np.ndarray, inst: VrapInstance, lam: float):
    """Objective of every host vector; capacity violations get the sentinel."""
    P, L = genes.shape
    H = inst.n_hosts
    rows = np.arange(P)
    vms = inst.chain_vms()
    cpu_free = np.tile(inst.host_cpu() * (1 - inst.occ_cpu), (P, 1))
    bw_free = np.tile(inst.host_bw() * (1 - inst.occ_bw), (P, 1))
    ok = np.ones(P, dtype=bool)
    eps = 1e-9
    for pos in range(L):
        h = genes[:, pos]
        vm = vms[pos]
        need_bw = np.full(P, 2.0 * vm.bw)
        if pos > 0:
            co = genes[:, pos - 1] == h
            need_bw[co] = vm.bw
        ok &= (cpu_free[rows, h] >= vm.cpu - eps) & (bw_free[rows, h] >= need_bw - eps)
        cpu_free[rows, h] -= vm.cpu
        bw_free[rows, h] -= vm.bw
        if pos == 0:
            bw_free[rows, h] -= vm.bw
        else:
            co = genes[:, pos - 1] == h
            bw_free[rows[~co], h[~co]] -= vm.bw
            bw_free[rows[co], h[co]] += vms[pos - 1].bw
    # energy: active host count + fixed per-vm terms
    active = np.zeros(P)
    for hh in range(H):
        active += (genes == hh).any(axis=1)
    w = inst.energy
    cpu_total = sum(v.cpu for v in vms)
    bw_total = sum(v.bw for v in vms)
    energy = w.w_cpu * cpu_total + w.w_min * active + w.w_net * bw_total
    host_lat = inst.host_lat()
    lat = sum(v.compute_latency for v in vms) + host_lat[genes].sum(axis=1)
    obj = energy + lam * np.maximum(lat - inst.latency_threshold, 0.0)
    obj[~ok] = vrap_env.infeasible_objective(inst)
    return obj, ok


def ga_vrap(inst: VrapInstance, cfg: GaConfig = GaConfig(),
            lam: float = 0.0) -> GaResult:
    rng = make_rng(cfg.seed, 0x7667)  # stream tag 'vg'
    H, L = inst.n_hosts, inst.chain_len
    P = cfg.population
    pop = rng.integers(0, H, size=(P, L))

    def fitness(genes):
        return _decode_population_vrap(genes, inst, lam)[0]

    fit = fitness(pop)
    best_i = int(np.argmin(fit))
    best_genes, best_fit = pop[best_i].copy(), float(fit[best_i])
    history = [best_fit]
    for _ in range(cfg.generations):
        entrants = rng.integers(0, P, size=(P, cfg.tournament))
        parents = pop[entrants[np.arange(P), np.argmin(fit[entrants], axis=1)]]
        children = parents.copy()
        for a in range(0, P - 1, 2):
            if rng.random() < cfg.crossover_rate and L > 1:
                cut = int(rng.integers(1, L))
                children[a] = np.concatenate([parents[a, :cut], parents[a + 1, cut:]])
                children[a + 1] = np.concatenate([parents[a + 1, :cut], parents[a, cut:]])
        do_mut = rng.random(P) < cfg.mutation_rate
        for e in np.nonzero(do_mut)[0]:
            i, j = rng.integers(0, L, size=2)
            children[e, i], children[e, j] = children[e, j], children[e, i]
        children[0] = best_genes
        pop = children
        fit = fitness(pop)
        gen_best = int(np.argmin(fit))
        if fit[gen_best] < best_fit:
            best_fit = float(fit[gen_best])
            best_genes = pop[gen_best].copy()
        history.append(best_fit)
    _, ok = _decode_population_vrap(best_genes[None, :], inst, lam)
    if ok[0]:
        pl = Placement(best_genes, vrap_env.energy_of(best_genes, inst),
                       vrap_env.latency_of(best_genes, inst), True)
    else:
        pl = Placement(np.full(L, UNSET, dtype=np.int64),
                       vrap_env.infeasible_objective(inst), float("inf"), False)
    return GaResult(pl, best_fit, np.array(history))
