"""Event-driven job-shop environment with per-job scheduling decisions.

The episode walks the clock over "events" (operation completions). At
each decision point the agent sees a per-job feasibility mask and
answers with a boolean vector: job i's next operation either starts now
(True) or waits at least until the next event (False). After the
selected operations are scheduled the clock jumps to the next event, and
keeps jumping while no operation could start. A declined operation can
therefore be scheduled at any later event, which makes every semi-active
schedule reachable while keeping episodes short.

Precedence and machine no-overlap are enforced through the mask; idle
time between operations is a soft constraint handled by the objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .instances import JspInstance


class ContractViolation(RuntimeError):
    """An action selected a job the feasibility mask had excluded."""


class IncompleteSchedule(ValueError):
    """A schedule-level operation was asked for before all ops finished."""


UNSET = -1


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# State and schedule types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JspState:
    """Immutable snapshot of a partially built schedule.

    ``machine_release[k]`` is the number of time units until machine k is
    free, ``job_remaining[i]`` the time left on job i's in-flight
    operation, ``next_op[i]`` the index of job i's next unscheduled
    operation (== n_machines once the job is finished).
    """

    clock: int
    machine_release: np.ndarray  # (m,)
    job_remaining: np.ndarray    # (n,)
    next_op: np.ndarray          # (n,)
    starts: np.ndarray           # (n, m), UNSET until scheduled
    ends: np.ndarray             # (n, m), UNSET until scheduled

    def __post_init__(self):
        for name in ("machine_release", "job_remaining", "next_op", "starts", "ends"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))

    @property
    def n_jobs(self) -> int:
        return self.job_remaining.shape[0]

    @property
    def n_machines(self) -> int:
        return self.machine_release.shape[0]


@dataclass(frozen=True)
class Schedule:
    """A complete schedule: start/end time per (job, operation index)."""

    starts: np.ndarray  # (n, m)
    ends: np.ndarray    # (n, m)
    makespan: int

    def __post_init__(self):
        object.__setattr__(self, "starts", _frozen(np.asarray(self.starts, dtype=np.int64)))
        object.__setattr__(self, "ends", _frozen(np.asarray(self.ends, dtype=np.int64)))

    @classmethod
    def from_times(cls, starts: np.ndarray, ends: np.ndarray) -> "Schedule":
        if (np.asarray(starts) == UNSET).any():
            raise IncompleteSchedule("schedule has unscheduled operations")
        return cls(starts, ends, int(np.max(ends)))


def machine_gaps(sched: Schedule, inst: JspInstance) -> list[np.ndarray]:
    """Idle intervals between consecutive operations on each machine."""
    gaps = []
    for k in range(inst.n_machines):
        jj, oo = np.nonzero(inst.machine == k)
        s = sched.starts[jj, oo]
        e = sched.ends[jj, oo]
        order = np.argsort(s, kind="stable")
        gaps.append(s[order][1:] - e[order][:-1])
    return gaps


def job_gaps(sched: Schedule, inst: JspInstance) -> list[np.ndarray]:
    """Waiting intervals between consecutive operations within each job."""
    return [sched.starts[i, 1:] - sched.ends[i, :-1] for i in range(inst.n_jobs)]


def idle_excess(sched: Schedule, inst: JspInstance, t_th: float = 0.0,
                mode: str = "machine_gap") -> float:
    """Sum of (gap - t_th)+ over all gaps of the chosen kind."""
    if mode == "machine_gap":
        all_gaps = machine_gaps(sched, inst)
    elif mode == "job_gap":
        all_gaps = job_gaps(sched, inst)
    else:
        raise ValueError(f"unknown idle mode {mode!r}")
    total = 0.0
    for g in all_gaps:
        if g.size:
            total += float(np.maximum(g - t_th, 0.0).sum())
    return total


def objective(sched: Schedule, inst: JspInstance, lam: float = 0.0,
              t_th: float = 0.0, mode: str = "machine_gap") -> float:
    """makespan + lam * sum((gap - t_th)+); lam=0 is the classic makespan."""
    if lam == 0.0:
        return float(sched.makespan)
    return float(sched.makespan) + lam * idle_excess(sched, inst, t_th, mode)


def check_schedule(sched: Schedule, inst: JspInstance) -> None:
    """Assert feasibility: precedence, machine no-overlap, duration match."""
    n, m = inst.n_jobs, inst.n_machines
    if sched.starts.shape != (n, m):
        raise IncompleteSchedule(f"schedule shape {sched.starts.shape} != ({n}, {m})")
    if (sched.starts < 0).any():
        raise IncompleteSchedule("schedule has unscheduled operations")
    if not np.array_equal(sched.ends, sched.starts + inst.duration):
        raise AssertionError("end != start + duration somewhere")
    if (sched.starts[:, 1:] < sched.ends[:, :-1]).any():
        raise AssertionError("precedence violated within a job")
    for k in range(m):
        jj, oo = np.nonzero(inst.machine == k)
        s = sched.starts[jj, oo]
        e = sched.ends[jj, oo]
        order = np.argsort(s, kind="stable")
        if (s[order][1:] < e[order][:-1]).any():
            raise AssertionError(f"operations overlap on machine {k}")
    if sched.makespan != int(sched.ends.max()):
        raise AssertionError("makespan is not the max end time")
    if sched.makespan < inst.lower_bound():
        raise AssertionError("makespan fell below the load lower bound")


# ---------------------------------------------------------------------------
# Environment operations
# ---------------------------------------------------------------------------

def reset(inst: JspInstance) -> JspState:
    n, m = inst.n_jobs, inst.n_machines
    return JspState(
        clock=0,
        machine_release=np.zeros(m, dtype=np.int64),
        job_remaining=np.zeros(n, dtype=np.int64),
        next_op=np.zeros(n, dtype=np.int64),
        starts=np.full((n, m), UNSET, dtype=np.int64),
        ends=np.full((n, m), UNSET, dtype=np.int64),
    )


def is_done(state: JspState) -> bool:
    return bool((state.next_op == state.n_machines).all())


def feasible_mask(state: JspState, inst: JspInstance) -> np.ndarray:
    """mask[i]: job i has an op left, its predecessor finished, and the
    required machine is free right now."""
    active = state.next_op < inst.n_machines
    mach = inst.machine[np.arange(inst.n_jobs), np.minimum(state.next_op, inst.n_machines - 1)]
    return active & (state.job_remaining == 0) & (state.machine_release[mach] == 0)


def _schedule_phase(state: JspState, action: np.ndarray, inst: JspInstance):
    """Apply the selected jobs in ascending index; returns mutable arrays.

    A selected job whose machine was just taken by a lower-indexed job in
    the same decision is skipped (it simply keeps waiting); per-job
    feasibility was already guaranteed by the mask.
    """
    release = state.machine_release.copy()
    remaining = state.job_remaining.copy()
    next_op = state.next_op.copy()
    starts = state.starts.copy()
    ends = state.ends.copy()
    for i in np.nonzero(action)[0]:
        j = next_op[i]
        k = inst.machine[i, j]
        if release[k] > 0:
            continue  # machine claimed earlier in this same decision
        d = inst.duration[i, j]
        starts[i, j] = state.clock
        ends[i, j] = state.clock + d
        release[k] = d
        remaining[i] = d
        next_op[i] += 1
    return release, remaining, next_op, starts, ends


def step(state: JspState, action: np.ndarray, inst: JspInstance) -> JspState:
    """One decision epoch: schedule the selected jobs at the current clock,
    then advance to the next event so declined jobs wait, and keep
    advancing while no operation could start.

    Raises :class:`ContractViolation` if the action selects a masked job.
    An all-false action with nothing in flight is a no-op (there is no
    event to wait for); rollout drivers are responsible for progress.
    """
    action = np.asarray(action, dtype=bool)
    if action.shape != (inst.n_jobs,):
        raise ContractViolation(f"action shape {action.shape} != ({inst.n_jobs},)")
    mask = feasible_mask(state, inst)
    bad = action & ~mask
    if bad.any():
        raise ContractViolation(f"action selects masked jobs {np.nonzero(bad)[0].tolist()}")

    release, remaining, next_op, starts, ends = _schedule_phase(state, action, inst)
    clock = state.clock

    def current_mask():
        active = next_op < inst.n_machines
        mach = inst.machine[np.arange(inst.n_jobs), np.minimum(next_op, inst.n_machines - 1)]
        return active & (remaining == 0) & (release[mach] == 0)

    done = bool((next_op == inst.n_machines).all())
    while not done:
        pending = np.concatenate([release[release > 0], remaining[remaining > 0]])
        if pending.size == 0:
            break  # nothing in flight: no event to advance to
        delta = int(pending.min())
        clock += delta
        np.maximum(release - delta, 0, out=release)
        np.maximum(remaining - delta, 0, out=remaining)
        if current_mask().any():
            break

    return JspState(clock, release, remaining, next_op, starts, ends)


def to_schedule(state: JspState) -> Schedule:
    return Schedule.from_times(state.starts, state.ends)


def schedule_from_sequence(inst: JspInstance, sequence: Iterable[int]) -> Schedule:
    """Decode an operation sequence (job ids, each appearing n_machines
    times) into its semi-active schedule: every operation starts as early
    as its job and machine allow, in sequence order.
    """
    n, m = inst.n_jobs, inst.n_machines
    next_op = np.zeros(n, dtype=np.int64)
    job_avail = np.zeros(n, dtype=np.int64)
    mach_avail = np.zeros(m, dtype=np.int64)
    starts = np.full((n, m), UNSET, dtype=np.int64)
    ends = np.full((n, m), UNSET, dtype=np.int64)
    count = 0
    for i in sequence:
        j = next_op[i]
        if j >= m:
            raise ValueError(f"job {i} appears more than {m} times in the sequence")
        k = inst.machine[i, j]
        s = max(job_avail[i], mach_avail[k])
        e = s + inst.duration[i, j]
        starts[i, j] = s
        ends[i, j] = e
        job_avail[i] = e
        mach_avail[k] = e
        next_op[i] += 1
        count += 1
    if count != n * m:
        raise ValueError(f"sequence has {count} entries, expected {n * m}")
    return Schedule.from_times(starts, ends)


def replay_schedule(inst: JspInstance, target: Schedule) -> Schedule:
    """Drive the environment to reproduce ``target`` by selecting, at each
    decision point, exactly the jobs whose target start equals the clock.
    Returns the schedule the environment produced (equal to ``target``
    for any semi-active target)."""
    state = reset(inst)
    guard = 4 * inst.n_jobs * inst.n_machines + 8
    while not is_done(state):
        mask = feasible_mask(state, inst)
        want = np.zeros(inst.n_jobs, dtype=bool)
        for i in range(inst.n_jobs):
            j = state.next_op[i]
            if j < inst.n_machines and mask[i] and target.starts[i, j] == state.clock:
                want[i] = True
        state = step(state, want, inst)
        guard -= 1
        if guard <= 0:
            raise RuntimeError("replay did not terminate; target is not event-aligned")
    return to_schedule(state)


# ---------------------------------------------------------------------------
# Vectorized lockstep simulator (same semantics, many episodes at once)
# ---------------------------------------------------------------------------

class JspBatch:
    """Runs E independent episodes in lockstep with array state.

    Environments advance with the exact semantics of :func:`step`;
    finished environments ignore further actions. Batch layout: instance
    ``insts[e // copies]`` backs environment ``e``.
    """

    def __init__(self, insts: list[JspInstance], copies: int = 1):
        if not insts:
            raise ValueError("need at least one instance")
        n, m = insts[0].n_jobs, insts[0].n_machines
        for it in insts:
            if it.n_jobs != n or it.n_machines != m:
                raise ValueError("all instances in a batch must share the same size")
        self.insts = insts
        self.copies = copies
        self.n_envs = len(insts) * copies
        self.n_jobs, self.n_machines = n, m
        self.inst_idx = np.repeat(np.arange(len(insts)), copies)
        self.machine = np.stack([it.machine for it in insts])    # (I, n, m)
        self.duration = np.stack([it.duration for it in insts])  # (I, n, m)
        E = self.n_envs
        self.clock = np.zeros(E, dtype=np.int64)
        self.release = np.zeros((E, m), dtype=np.int64)
        self.remaining = np.zeros((E, n), dtype=np.int64)
        self.next_op = np.zeros((E, n), dtype=np.int64)
        self.starts = np.full((E, n, m), UNSET, dtype=np.int64)
        self.ends = np.full((E, n, m), UNSET, dtype=np.int64)
        self._rows = np.arange(E)

    def done(self) -> np.ndarray:
        return (self.next_op == self.n_machines).all(axis=1)

    def mask(self) -> np.ndarray:
        active = self.next_op < self.n_machines
        j = np.minimum(self.next_op, self.n_machines - 1)
        mach = self.machine[self.inst_idx[:, None], np.arange(self.n_jobs)[None, :], j]
        free = np.take_along_axis(self.release, mach, axis=1) == 0
        return active & (self.remaining == 0) & free

    def apply(self, action: np.ndarray) -> None:
        """Vectorized :func:`step` across all environments."""
        mask = self.mask()
        act = np.asarray(action, dtype=bool) & ~self.done()[:, None]
        if (act & ~mask).any():
            e, i = np.argwhere(act & ~mask)[0]
            raise ContractViolation(f"env {e}: action selects masked job {i}")
        # schedule phase, ascending job index; same-machine conflicts skip
        for i in range(self.n_jobs):
            sel = act[:, i]
            if not sel.any():
                continue
            rows = self._rows[sel]
            j = self.next_op[rows, i]
            mach = self.machine[self.inst_idx[rows], i, j]
            ok = self.release[rows, mach] == 0
            rows, j, mach = rows[ok], j[ok], mach[ok]
            if rows.size == 0:
                continue
            d = self.duration[self.inst_idx[rows], i, j]
            self.starts[rows, i, j] = self.clock[rows]
            self.ends[rows, i, j] = self.clock[rows] + d
            self.release[rows, mach] = d
            self.remaining[rows, i] = d
            self.next_op[rows, i] += 1
        # advance phase: one unconditional jump to the next event, then
        # keep jumping while a stuck env has an empty mask
        big = np.iinfo(np.int64).max
        stuck = ~self.done()
        while stuck.any():
            rel_pos = np.where(self.release > 0, self.release, big)
            rem_pos = np.where(self.remaining > 0, self.remaining, big)
            delta = np.minimum(rel_pos.min(axis=1), rem_pos.min(axis=1))
            adv = stuck & (delta < big)
            if not adv.any():
                break
            d = np.where(adv, delta, 0)
            self.clock += d
            np.maximum(self.release - d[:, None], 0, out=self.release)
            np.maximum(self.remaining - d[:, None], 0, out=self.remaining)
            stuck = adv & ~self.mask().any(axis=1)

    def state_of(self, e: int) -> JspState:
        return JspState(
            clock=int(self.clock[e]),
            machine_release=self.release[e].copy(),
            job_remaining=self.remaining[e].copy(),
            next_op=self.next_op[e].copy(),
            starts=self.starts[e].copy(),
            ends=self.ends[e].copy(),
        )

    def schedule_of(self, e: int) -> Schedule:
        return Schedule.from_times(self.starts[e], self.ends[e])


# ---------------------------------------------------------------------------
# Gantt extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GanttBar:
    machine: int
    job: int
    op: int
    start: int
    end: int


@dataclass(frozen=True)
class GanttDoc:
    n_machines: int
    bars: tuple[GanttBar, ...]

    def to_text(self) -> str:
        lines = ["gantt-v1", f"machines {self.n_machines}"]
        for b in self.bars:
            lines.append(f"bar {b.machine} {b.job} {b.op} {b.start} {b.end}")
        return "\n".join(lines) + "\n"

    def to_svg(self, row_h: int = 28, px_per_unit: float = 8.0, pad: int = 44) -> str:
        """Static SVG: one row per machine, one labeled bar per operation."""
        horizon = max((b.end for b in self.bars), default=1)
        width = int(pad + horizon * px_per_unit + 20)
        height = pad + self.n_machines * row_h + 20
        n_jobs = max((b.job for b in self.bars), default=0) + 1
        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'font-family="sans-serif" font-size="10">',
            f'<text x="{pad}" y="14">makespan {horizon}</text>',
        ]
        for k in range(self.n_machines):
            y = pad + k * row_h
            out.append(f'<text x="4" y="{y + row_h * 0.65:.1f}">M{k}</text>')
            out.append(
                f'<line x1="{pad}" y1="{y + row_h - 1}" x2="{width - 10}" '
                f'y2="{y + row_h - 1}" stroke="#999" stroke-width="0.5"/>'
            )
        for b in self.bars:
            hue = int(360 * b.job / max(n_jobs, 1))
            x = pad + b.start * px_per_unit
            w = max((b.end - b.start) * px_per_unit, 1.0)
            y = pad + b.machine * row_h + 3
            out.append(
                f'<rect x="{x:.1f}" y="{y}" width="{w:.1f}" height="{row_h - 8}" '
                f'fill="hsl({hue},60%,60%)" stroke="#333" stroke-width="0.5"/>'
            )
            out.append(f'<text x="{x + 2:.1f}" y="{y + row_h - 13}">J{b.job}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def gantt_from_matrices(starts: np.ndarray, ends: np.ndarray,
                        machine: np.ndarray) -> GanttDoc:
    if (np.asarray(starts) == UNSET).any():
        raise IncompleteSchedule("cannot draw an incomplete schedule")
    n_machines = int(machine.max()) + 1
    bars = []
    for k in range(n_machines):
        jj, oo = np.nonzero(machine == k)
        order = np.argsort(starts[jj, oo], kind="stable")
        for idx in order:
            i, j = int(jj[idx]), int(oo[idx])
            bars.append(GanttBar(k, i, j, int(starts[i, j]), int(ends[i, j])))
    return GanttDoc(n_machines, tuple(bars))


def to_gantt(sched: Schedule, inst: JspInstance) -> GanttDoc:
    return gantt_from_matrices(sched.starts, sched.ends, inst.machine)


# ---------------------------------------------------------------------------
# Schedule file format
# ---------------------------------------------------------------------------

def write_schedule(sched: Schedule, inst: JspInstance) -> str:
    lines = ["jsp-schedule-v1", f"{inst.n_jobs} {inst.n_machines}"]
    for i in range(inst.n_jobs):
        for j in range(inst.n_machines):
            lines.append(
                f"{i} {j} {inst.machine[i, j]} {sched.starts[i, j]} {sched.ends[i, j]}"
            )
    return "\n".join(lines) + "\n"


def parse_schedule(text: str) -> tuple[Schedule, np.ndarray]:
    """Returns (schedule, machine matrix recorded in the file)."""
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0] != "jsp-schedule-v1":
        raise ValueError("missing 'jsp-schedule-v1' header")
    n, m = (int(v) for v in lines[1].split())
    starts = np.full((n, m), UNSET, dtype=np.int64)
    ends = np.full((n, m), UNSET, dtype=np.int64)
    machine = np.zeros((n, m), dtype=np.int64)
    for line in lines[2:]:
        i, j, k, s, e = (int(v) for v in line.split())
        machine[i, j] = k
        starts[i, j] = s
        ends[i, j] = e
    return Schedule.from_times(starts, ends), machine
