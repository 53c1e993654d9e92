"""Problem instances: definition, validation, generation and file formats.

Two problem families are supported:

* Job-shop scheduling (``JspInstance``): every job visits every machine
  exactly once, in a job-specific order, with integer durations. Files
  use the classic OR-Library text layout.
* Virtual resource allocation (``VrapInstance``): a chain of VMs must be
  placed on a pool of hosts. Files use a simple ``vrap-v1`` key/value
  text document (there is no standard format for this problem).

All instance types are immutable after construction and safe to share
between concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng


class InstanceError(ValueError):
    """Raised for malformed instance files or invalid instance data."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# JSP
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class JspInstance:
    """A job-shop instance: per-operation machine ids and durations.

    ``machine[i, j]`` is the 0-based machine of job i's j-th operation and
    ``duration[i, j]`` its integer processing time. Every row of
    ``machine`` must be a permutation of ``0..n_machines-1`` and all
    durations must be >= 1.
    """

    n_jobs: int
    n_machines: int
    machine: np.ndarray
    duration: np.ndarray

    def __eq__(self, other) -> bool:
        return (isinstance(other, JspInstance)
                and self.n_jobs == other.n_jobs
                and self.n_machines == other.n_machines
                and np.array_equal(self.machine, other.machine)
                and np.array_equal(self.duration, other.duration))

    def __post_init__(self):
        object.__setattr__(self, "machine", _frozen(np.asarray(self.machine, dtype=np.int64)))
        object.__setattr__(self, "duration", _frozen(np.asarray(self.duration, dtype=np.int64)))
        self.validate()

    def validate(self) -> None:
        n, m = self.n_jobs, self.n_machines
        if n < 1 or m < 1:
            raise InstanceError(f"need at least one job and one machine, got {n}x{m}")
        if self.machine.shape != (n, m) or self.duration.shape != (n, m):
            raise InstanceError(
                f"matrix shapes {self.machine.shape}/{self.duration.shape} "
                f"do not match {n} jobs x {m} machines"
            )
        ident = np.arange(m)
        for i in range(n):
            if not np.array_equal(np.sort(self.machine[i]), ident):
                raise InstanceError(f"machine row {i} is not a permutation of 0..{m - 1}")
        if (self.duration < 1).any():
            bad = np.argwhere(self.duration < 1)[0]
            raise InstanceError(f"duration[{bad[0]},{bad[1]}] must be >= 1")

    def total_work(self) -> int:
        return int(self.duration.sum())

    def lower_bound(self) -> int:
        """max(max machine load, max job duration) - a valid makespan bound."""
        machine_load = np.zeros(self.n_machines, dtype=np.int64)
        for i in range(self.n_jobs):
            np.add.at(machine_load, self.machine[i], self.duration[i])
        return int(max(machine_load.max(), self.duration.sum(axis=1).max()))


def parse_orlib(text: str) -> JspInstance:
    """Parse OR-Library text: a "n m" heading, then one line per job with
    (machine, duration) pairs. Lines starting with '#' are ignored.
    """
    rows: list[tuple[int, str]] = []  # (1-based line number, content)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rows.append((lineno, line))
    if not rows:
        raise InstanceError("empty instance text")

    head_no, head = rows[0]
    parts = head.split()
    if len(parts) != 2:
        raise InstanceError(f"line {head_no}: malformed header {head!r}, expected 'n m'")
    try:
        n, m = int(parts[0]), int(parts[1])
    except ValueError:
        raise InstanceError(f"line {head_no}: malformed header {head!r}, expected two integers") from None
    if n < 1 or m < 1:
        raise InstanceError(f"line {head_no}: header must declare positive sizes, got {n} {m}")
    if len(rows) - 1 != n:
        raise InstanceError(f"expected {n} job rows, found {len(rows) - 1}")

    machine = np.zeros((n, m), dtype=np.int64)
    duration = np.zeros((n, m), dtype=np.int64)
    for i, (lineno, line) in enumerate(rows[1:]):
        try:
            vals = [int(v) for v in line.split()]
        except ValueError:
            raise InstanceError(f"line {lineno}: non-integer token in job row") from None
        if len(vals) != 2 * m:
            raise InstanceError(
                f"line {lineno}: job row {i} has {len(vals)} values, expected {2 * m} "
                f"(machine, duration pairs)"
            )
        machine[i] = vals[0::2]
        duration[i] = vals[1::2]
        if (duration[i] < 1).any():
            j = int(np.argmax(duration[i] < 1))
            raise InstanceError(f"line {lineno}: duration of operation {j} must be positive")
        if not np.array_equal(np.sort(machine[i]), np.arange(m)):
            raise InstanceError(f"line {lineno}: machine row {i} is not a permutation")
    return JspInstance(n, m, machine, duration)


def write_orlib(inst: JspInstance) -> str:
    """Inverse of :func:`parse_orlib` (modulo whitespace)."""
    lines = [f"{inst.n_jobs} {inst.n_machines}"]
    for i in range(inst.n_jobs):
        pairs = []
        for j in range(inst.n_machines):
            pairs.append(f"{inst.machine[i, j]} {inst.duration[i, j]}")
        lines.append(" ".join(pairs))
    return "\n".join(lines) + "\n"


def gen_jsp(
    n_jobs: int,
    n_machines: int,
    dur_lo: int = 1,
    dur_hi: int = 99,
    seed: int = 0,
) -> JspInstance:
    """Random instance: uniform random machine permutation per job and
    i.i.d. uniform integer durations in [dur_lo, dur_hi].
    """
    if n_jobs < 1 or n_machines < 1:
        raise InstanceError(f"invalid sizes {n_jobs}x{n_machines}")
    if not (1 <= dur_lo <= dur_hi):
        raise InstanceError(f"invalid duration bounds [{dur_lo}, {dur_hi}]")
    rng = make_rng(seed, 0x4A53)  # stream tag 'JS'
    machine = np.stack([rng.permutation(n_machines) for _ in range(n_jobs)])
    duration = rng.integers(dur_lo, dur_hi + 1, size=(n_jobs, n_machines))
    return JspInstance(n_jobs, n_machines, machine, duration)


# ---------------------------------------------------------------------------
# VRAP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Host:
    cpu_capacity: float
    bw_capacity: float
    link_latency: float


@dataclass(frozen=True)
class VmType:
    cpu: float
    bw: float
    compute_latency: float


@dataclass(frozen=True)
class EnergyModel:
    """Energy prices: per active host, per used core, per bandwidth unit."""

    w_min: float
    w_cpu: float
    w_net: float


@dataclass(frozen=True, eq=False)
class VrapInstance:
    """A service-chain placement instance.

    ``chain`` holds indices into ``vm_catalog`` in flow order. The first
    VM's ingress and the last VM's egress always cross the host boundary;
    flows between chain neighbours placed on the same host are internal
    and cost no bandwidth.
    """

    hosts: tuple[Host, ...]
    vm_catalog: tuple[VmType, ...]
    chain: tuple[int, ...]
    latency_threshold: float
    energy: EnergyModel
    occ_cpu: np.ndarray  # per-host fraction of cpu already used
    occ_bw: np.ndarray   # per-host fraction of bandwidth already used

    def __eq__(self, other) -> bool:
        return (isinstance(other, VrapInstance)
                and self.hosts == other.hosts
                and self.vm_catalog == other.vm_catalog
                and self.chain == other.chain
                and self.latency_threshold == other.latency_threshold
                and self.energy == other.energy
                and np.array_equal(self.occ_cpu, other.occ_cpu)
                and np.array_equal(self.occ_bw, other.occ_bw))

    def __post_init__(self):
        object.__setattr__(self, "hosts", tuple(self.hosts))
        object.__setattr__(self, "vm_catalog", tuple(self.vm_catalog))
        object.__setattr__(self, "chain", tuple(int(c) for c in self.chain))
        object.__setattr__(self, "occ_cpu", _frozen(np.asarray(self.occ_cpu, dtype=np.float64)))
        object.__setattr__(self, "occ_bw", _frozen(np.asarray(self.occ_bw, dtype=np.float64)))
        self.validate()

    def validate(self) -> None:
        if len(self.hosts) < 1:
            raise InstanceError("need at least one host")
        if len(self.vm_catalog) < 1:
            raise InstanceError("need a non-empty VM catalog")
        if len(self.chain) < 1:
            raise InstanceError("chain must have at least one element")
        for c in self.chain:
            if not 0 <= c < len(self.vm_catalog):
                raise InstanceError(f"chain index {c} outside catalog of {len(self.vm_catalog)}")
        for h in self.hosts:
            if h.cpu_capacity < 0 or h.bw_capacity < 0 or h.link_latency < 0:
                raise InstanceError("host capacities and latency must be >= 0")
        for v in self.vm_catalog:
            if v.cpu < 0 or v.bw < 0 or v.compute_latency < 0:
                raise InstanceError("vm requirements and latency must be >= 0")
        if min(self.energy.w_min, self.energy.w_cpu, self.energy.w_net) < 0:
            raise InstanceError("energy weights must be >= 0")
        if self.latency_threshold < 0:
            raise InstanceError("latency threshold must be >= 0")
        n = len(self.hosts)
        if self.occ_cpu.shape != (n,) or self.occ_bw.shape != (n,):
            raise InstanceError("occupancy arrays must have one entry per host")
        for occ in (self.occ_cpu, self.occ_bw):
            if ((occ < 0) | (occ > 1)).any():
                raise InstanceError("occupancy fractions must lie in [0, 1]")

    @property
    def n_hosts(self) -> int:
        return len(self.hosts)

    @property
    def chain_len(self) -> int:
        return len(self.chain)

    def chain_vms(self) -> tuple[VmType, ...]:
        return tuple(self.vm_catalog[c] for c in self.chain)

    def host_cpu(self) -> np.ndarray:
        return np.array([h.cpu_capacity for h in self.hosts])

    def host_bw(self) -> np.ndarray:
        return np.array([h.bw_capacity for h in self.hosts])

    def host_lat(self) -> np.ndarray:
        return np.array([h.link_latency for h in self.hosts])


@dataclass(frozen=True)
class VrapGenConfig:
    """Knobs for the random VRAP generator.

    The published experiments only state uniform initial occupancy and the
    environment sizes, so every range here is a documented default.
    """

    host_cpu: tuple[int, int] = (8, 32)
    host_bw: tuple[int, int] = (40, 160)
    host_lat: tuple[int, int] = (1, 5)
    vm_cpu: tuple[int, int] = (1, 4)
    vm_bw: tuple[int, int] = (1, 10)
    vm_lat: tuple[int, int] = (1, 5)
    max_occupancy: float = 0.5
    energy: EnergyModel = field(default_factory=lambda: EnergyModel(10.0, 2.0, 0.1))
    # threshold = sum of compute latencies + lth_factor * chain_len * mean host latency
    lth_factor: float = 0.8


def gen_vrap(
    n_hosts: int,
    catalog_size: int,
    chain_len: int = 5,
    seed: int = 0,
    cfg: VrapGenConfig | None = None,
) -> VrapInstance:
    """Random VRAP instance with uniform initial occupancy."""
    if n_hosts < 1 or catalog_size < 1 or chain_len < 1:
        raise InstanceError(f"invalid sizes hosts={n_hosts} catalog={catalog_size} chain={chain_len}")
    cfg = cfg or VrapGenConfig()
    rng = make_rng(seed, 0x5652)  # stream tag 'VR'
    hosts = tuple(
        Host(
            float(rng.integers(cfg.host_cpu[0], cfg.host_cpu[1] + 1)),
            float(rng.integers(cfg.host_bw[0], cfg.host_bw[1] + 1)),
            float(rng.integers(cfg.host_lat[0], cfg.host_lat[1] + 1)),
        )
        for _ in range(n_hosts)
    )
    catalog = tuple(
        VmType(
            float(rng.integers(cfg.vm_cpu[0], cfg.vm_cpu[1] + 1)),
            float(rng.integers(cfg.vm_bw[0], cfg.vm_bw[1] + 1)),
            float(rng.integers(cfg.vm_lat[0], cfg.vm_lat[1] + 1)),
        )
        for _ in range(catalog_size)
    )
    chain = tuple(int(c) for c in rng.integers(0, catalog_size, size=chain_len))
    occ_cpu = rng.uniform(0.0, cfg.max_occupancy, size=n_hosts)
    occ_bw = rng.uniform(0.0, cfg.max_occupancy, size=n_hosts)
    compute_lat = sum(catalog[c].compute_latency for c in chain)
    mean_host_lat = float(np.mean([h.link_latency for h in hosts]))
    lth = float(compute_lat + cfg.lth_factor * chain_len * mean_host_lat)
    return VrapInstance(hosts, catalog, chain, lth, cfg.energy, occ_cpu, occ_bw)


# ---------------------------------------------------------------------------
# VRAP text format (vrap-v1)
# ---------------------------------------------------------------------------

def write_vrap(inst: VrapInstance) -> str:
    """Serialize to the ``vrap-v1`` key/value document."""
    out = ["vrap-v1"]
    out.append(f"latency_threshold {float(inst.latency_threshold)!r}")
    out.append(f"energy {float(inst.energy.w_min)!r} {float(inst.energy.w_cpu)!r} "
               f"{float(inst.energy.w_net)!r}")
    out.append(f"hosts {inst.n_hosts}")
    for i, h in enumerate(inst.hosts):
        out.append(
            f"host {float(h.cpu_capacity)!r} {float(h.bw_capacity)!r} "
            f"{float(h.link_latency)!r} "
            f"{float(inst.occ_cpu[i])!r} {float(inst.occ_bw[i])!r}"
        )
    out.append(f"vmtypes {len(inst.vm_catalog)}")
    for v in inst.vm_catalog:
        out.append(f"vm {float(v.cpu)!r} {float(v.bw)!r} {float(v.compute_latency)!r}")
    out.append("chain " + " ".join(str(c) for c in inst.chain))
    return "\n".join(out) + "\n"


def parse_vrap(text: str) -> VrapInstance:
    lines = [l.strip() for l in text.splitlines() if l.strip() and not l.strip().startswith("#")]
    if not lines or lines[0] != "vrap-v1":
        raise InstanceError("missing 'vrap-v1' version line")
    it = iter(enumerate(lines[1:], start=2))

    def next_fields(keyword: str) -> list[str]:
        try:
            lineno, line = next(it)
        except StopIteration:
            raise InstanceError(f"unexpected end of file, expected '{keyword}'") from None
        parts = line.split()
        if parts[0] != keyword:
            raise InstanceError(f"line {lineno}: expected '{keyword}', got {parts[0]!r}")
        return parts[1:]

    lth = float(next_fields("latency_threshold")[0])
    ew = next_fields("energy")
    energy = EnergyModel(float(ew[0]), float(ew[1]), float(ew[2]))
    n_hosts = int(next_fields("hosts")[0])
    hosts, occ_cpu, occ_bw = [], [], []
    for _ in range(n_hosts):
        f = next_fields("host")
        hosts.append(Host(float(f[0]), float(f[1]), float(f[2])))
        occ_cpu.append(float(f[3]))
        occ_bw.append(float(f[4]))
    n_vm = int(next_fields("vmtypes")[0])
    catalog = []
    for _ in range(n_vm):
        f = next_fields("vm")
        catalog.append(VmType(float(f[0]), float(f[1]), float(f[2])))
    chain = [int(c) for c in next_fields("chain")]
    return VrapInstance(tuple(hosts), tuple(catalog), tuple(chain), lth, energy,
                        np.array(occ_cpu), np.array(occ_bw))


# ---------------------------------------------------------------------------
# Dataset helpers (one instance per file, lexicographic benchmark order)
# ---------------------------------------------------------------------------

JSP_SUFFIX = ".jsp"
VRAP_SUFFIX = ".vrap"


def instance_filename(problem: str, index: int) -> str:
    suffix = JSP_SUFFIX if problem == "jsp" else VRAP_SUFFIX
    return f"inst_{index:04d}{suffix}"


def load_instance(path) -> JspInstance | VrapInstance:
    from pathlib import Path

    p = Path(path)
    text = p.read_text()
    if p.suffix == VRAP_SUFFIX or text.startswith("vrap-v1"):
        return parse_vrap(text)
    return parse_orlib(text)
