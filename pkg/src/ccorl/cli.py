"""Command-line surface: gen | train | solve | bench | gantt.

Exit codes: 0 success, 2 validation error, 3 I/O error. Every command is
deterministic given its inputs and --seed. The CCORL_THREADS environment
variable sets how many benchmark evaluations run concurrently.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import baselines, instances, jsp_env, trainer as trainer_mod, vrap_env
from .instances import (InstanceError, JspInstance, VrapGenConfig, gen_jsp,
                        gen_vrap, instance_filename, load_instance, write_orlib,
                        write_vrap, EnergyModel)
from .policy import ModelManifest, net_from_manifest
from .rng import make_rng
from .tensor_nn import ParamStore
from .trainer import (EpochStats, TrainConfig, TrainerState, greedy_decode,
                      sample_decode, train_epoch)


class CliError(ValueError):
    """User-facing validation problem (maps to exit code 2)."""


# ---------------------------------------------------------------------------
# Train config file (key-value text)
# ---------------------------------------------------------------------------

_CFG_KEYS = {
    "problem": str, "jobs": int, "machines": int, "dur_lo": int, "dur_hi": int,
    "hosts": int, "catalog": int, "chain": int,
    "batch_instances": int, "samples_per_instance": int, "alpha": float,
    "lambda": float, "t_th": float, "idle_mode": str, "lr": float,
    "grad_clip_norm": float, "dropout": float, "epochs": int, "seed": int,
    "baseline_mode": str, "beta": float, "dataset_mode": str,
    "dataset_size": int, "chunk_instances": int, "embed": int,
    "lstm_hidden": int, "decoder": str, "max_occupancy": float,
    "lth_factor": float,
}

_CFG_TO_FIELD = {
    "jobs": "n_jobs", "machines": "n_machines", "hosts": "n_hosts",
    "catalog": "catalog_size", "chain": "chain_len", "lambda": "lam",
}


def parse_train_config(text: str) -> TrainConfig:
    """Parse 'key value' lines; unknown keys and bad values are all
    reported together."""
    values: dict[str, object] = {}
    errors: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            errors.append(f"line {lineno}: expected 'key value', got {line!r}")
            continue
        key, val = parts
        if key not in _CFG_KEYS:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _CFG_KEYS[key](val)
        except ValueError:
            errors.append(f"line {lineno}: bad value for {key!r}: {val!r}")
    if errors:
        raise CliError("invalid training config:\n  " + "\n  ".join(errors))
    kwargs: dict[str, object] = {}
    gen_kwargs: dict[str, object] = {}
    for key, val in values.items():
        if key == "decoder":
            kwargs["decoder"] = tuple(int(v) for v in str(val).split(","))
        elif key in ("max_occupancy", "lth_factor"):
            gen_kwargs[key] = val
        else:
            kwargs[_CFG_TO_FIELD.get(key, key)] = val
    if gen_kwargs:
        kwargs["vrap_gen"] = replace(VrapGenConfig(), **gen_kwargs)
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from None


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    gen = d.pop("vrap_gen", None)
    kwargs = {f.name: d[f.name] for f in fields(TrainConfig)
              if f.name in d and f.name != "vrap_gen"}
    kwargs["decoder"] = tuple(kwargs.get("decoder", (128, 64)))
    if gen is not None:
        energy = EnergyModel(**gen.pop("energy"))
        gen = {k: tuple(v) if isinstance(v, list) else v for k, v in gen.items()}
        kwargs["vrap_gen"] = VrapGenConfig(energy=energy, **gen)
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(args.count):
        seed = trainer_mod.make_dataset_seed(args.seed, i)
        name = instance_filename(args.problem, i)
        if args.problem == "jsp":
            inst = gen_jsp(args.jobs, args.machines, args.dur_lo, args.dur_hi, seed)
            text = write_orlib(inst)
        else:
            cfg = replace(VrapGenConfig(), max_occupancy=args.max_occupancy)
            inst = gen_vrap(args.hosts, args.catalog, args.chain, seed, cfg)
            text = write_vrap(inst)
        (out / name).write_text(text)
        files.append(name)
    manifest = {
        "problem": args.problem,
        "count": args.count,
        "seed": args.seed,
        "params": ({"jobs": args.jobs, "machines": args.machines,
                    "dur_lo": args.dur_lo, "dur_hi": args.dur_hi}
                   if args.problem == "jsp" else
                   {"hosts": args.hosts, "catalog": args.catalog,
                    "chain": args.chain, "max_occupancy": args.max_occupancy}),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.count} {args.problem} instances to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _write_model(state: TrainerState, prefix: Path) -> None:
    state.save(prefix.with_suffix(".ckpt"))
    man = ModelManifest.for_net(state.net,
                                extra={"train_config": train_config_to_dict(state.cfg),
                                       "epoch": state.epoch})
    prefix.with_suffix(".json").write_text(man.to_json())


def load_model(prefix: str):
    """Load (net, manifest) from PREFIX.ckpt / PREFIX.json."""
    p = Path(prefix)
    if p.suffix == ".ckpt":
        p = p.with_suffix("")
    man_path = p.with_suffix(".json")
    ckpt_path = p.with_suffix(".ckpt")
    if not man_path.exists() or not ckpt_path.exists():
        raise CliError(f"model files {ckpt_path} / {man_path} not found")
    man = ModelManifest.from_json(man_path.read_text())
    net = net_from_manifest(man)
    values = ParamStore.load_raw(ckpt_path)
    net.params.load_values({k: v for k, v in values.items() if k in net.params})
    return net, man


def cmd_train(args) -> int:
    cfg = parse_train_config(Path(args.config).read_text())
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    state = TrainerState(cfg)
    stats_path = prefix.with_suffix(".stats.csv")
    if args.resume:
        state.restore(ParamStore.load_raw(args.resume))
        mode = "a"
    else:
        mode = "w"
    ckpt_every = args.ckpt_every
    with open(stats_path, mode) as log:
        if mode == "w":
            log.write(EpochStats.CSV_HEADER + "\n")
        start = state.epoch
        for _ in range(start, start + cfg.epochs):
            stats = train_epoch(state)
            log.write(stats.csv_row() + "\n")
            log.flush()
            if not args.quiet:
                print(f"epoch {stats.epoch}: mean_L={stats.mean_l:.2f} "
                      f"reward={stats.mean_reward:.2f} penalty={stats.mean_penalty:.3f} "
                      f"({stats.seconds:.2f}s)")
            if ckpt_every and (stats.epoch + 1) % ckpt_every == 0:
                state.save(prefix.parent / f"{prefix.name}.epoch{stats.epoch + 1:05d}.ckpt")
    _write_model(state, prefix)
    print(f"model written to {prefix.with_suffix('.ckpt')}")
    return 0


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def _check_compat(net, man: ModelManifest, inst) -> None:
    if isinstance(inst, JspInstance):
        if man.problem != "jsp":
            raise CliError("model was trained for vrap, instance is a jsp file")
        if (inst.n_jobs != man.jsp["n_jobs"]
                or inst.n_machines != man.jsp["n_machines"]):
            raise CliError(
                f"model expects {man.jsp['n_jobs']}x{man.jsp['n_machines']} instances, "
                f"got {inst.n_jobs}x{inst.n_machines}")
    else:
        if man.problem != "vrap":
            raise CliError("model was trained for jsp, instance is a vrap file")


def _parse_decode(text: str) -> tuple[str, int]:
    if text == "greedy":
        return "greedy", 1
    if text.startswith("sample:"):
        n = int(text.split(":", 1)[1])
        if n < 1:
            raise CliError("sample count must be >= 1")
        return "sample", n
    raise CliError(f"unknown decode mode {text!r} (use greedy or sample:N)")


def cmd_solve(args) -> int:
    net, man = load_model(args.model)
    inst = load_instance(args.instance)
    _check_compat(net, man, inst)
    mode, n = _parse_decode(args.decode)
    if mode == "greedy":
        sol, obj = greedy_decode(net, inst, lam=args.lam, t_th=args.tth)
    else:
        rng = make_rng(args.seed, 0x50)
        sol, obj = sample_decode(net, inst, n, rng, lam=args.lam, t_th=args.tth)
    if isinstance(inst, JspInstance):
        idle = jsp_env.idle_excess(sol, inst, args.tth)
        print(f"objective {obj!r}")
        print(f"reward {-float(sol.makespan)!r}")
        print(f"penalty idle_excess {idle!r} (weighted {args.lam * idle!r})")
        text = jsp_env.write_schedule(sol, inst)
    else:
        excess = vrap_env.latency_excess(sol, inst) if sol.feasible else 0.0
        print(f"objective {obj!r}")
        print(f"reward {-sol.energy!r}")
        print(f"penalty latency_excess {excess!r} (weighted {args.lam * excess!r})")
        if not sol.feasible:
            print("infeasible placement (sentinel objective)")
        text = vrap_env.write_placement(sol)
    if args.out:
        Path(args.out).write_text(text)
        print(f"solution written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

KNOWN_METHODS = ("spt", "lpt", "fcfs", "lwr", "ga", "rl_greedy")


def _bench_one(method: str, name: str, inst, ctx: dict) -> dict:
    lam, t_th = ctx["lam"], ctx["tth"]
    t0 = time.perf_counter()
    feasible = True
    if method in ("spt", "lpt", "fcfs", "lwr"):
        if not isinstance(inst, JspInstance):
            raise CliError(f"{method} only applies to jsp instances")
        sched = baselines.dispatch(inst, method.upper())
        primary = float(sched.makespan)
        penalty = jsp_env.idle_excess(sched, inst, t_th)
        obj = primary + lam * penalty
    elif method == "ga":
        cfg = baselines.GaConfig(population=ctx["ga_population"],
                                 generations=ctx["ga_generations"],
                                 seed=trainer_mod.make_dataset_seed(ctx["seed"], hash(name) % 10000))
        if isinstance(inst, JspInstance):
            res = baselines.ga_jsp(inst, cfg, lam, t_th)
            primary = float(res.best.makespan)
            penalty = jsp_env.idle_excess(res.best, inst, t_th)
        else:
            res = baselines.ga_vrap(inst, cfg, lam)
            feasible = res.best.feasible
            primary = res.best.energy if feasible else res.objective
            penalty = vrap_env.latency_excess(res.best, inst) if feasible else 0.0
        obj = float(res.objective)
    elif method == "rl_greedy" or method.startswith("rl_sample:"):
        net, man = ctx["model"]
        _check_compat(net, man, inst)
        if method == "rl_greedy":
            sol, obj = greedy_decode(net, inst, lam=lam, t_th=t_th)
        else:
            n = int(method.split(":", 1)[1])
            rng = make_rng(ctx["seed"], 0xBE, hash(name) % 100000)
            sol, obj = sample_decode(net, inst, n, rng, lam=lam, t_th=t_th)
        if isinstance(inst, JspInstance):
            primary = float(sol.makespan)
            penalty = jsp_env.idle_excess(sol, inst, t_th)
        else:
            feasible = sol.feasible
            primary = sol.energy if feasible else obj
            penalty = vrap_env.latency_excess(sol, inst) if feasible else 0.0
    else:
        raise CliError(f"unknown method {method!r}")
    wall_ms = (time.perf_counter() - t0) * 1e3
    return {"method": method, "instance": name, "objective": float(obj),
            "primary": float(primary), "penalty": float(penalty),
            "feasible": feasible, "wall_ms": wall_ms}


def _reference_optima(paths, insts, args) -> dict[str, float]:
    optima: dict[str, float] = {}
    if args.optima:
        for line in Path(args.optima).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("instance,") or line.startswith("#"):
                continue
            name, val = line.split(",")
            optima[name] = float(val)
    elif args.brute_force:
        for p, inst in zip(paths, insts):
            _, opt = baselines.brute_force(inst, args.lam, args.tth)
            optima[p.name] = opt
    return optima


def cmd_bench(args) -> int:
    suite = Path(args.suite)
    paths = sorted([p for p in suite.iterdir()
                    if p.suffix in (instances.JSP_SUFFIX, instances.VRAP_SUFFIX)])
    if not paths:
        raise CliError(f"no instance files in {suite}")
    insts = [load_instance(p) for p in paths]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in KNOWN_METHODS and not m.startswith("rl_sample:"):
            raise CliError(f"unknown method {m!r}; known: "
                           f"{', '.join(KNOWN_METHODS)}, rl_sample:N")
    ctx = {"lam": args.lam, "tth": args.tth, "seed": args.seed,
           "ga_population": args.ga_population, "ga_generations": args.ga_generations}
    if any(m.startswith("rl_") for m in methods):
        if not args.model:
            raise CliError("RL methods need --model")
        ctx["model"] = load_model(args.model)

    tasks = [(m, p.name, inst) for m in methods for p, inst in zip(paths, insts)]
    threads = int(os.environ.get("CCORL_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda t: _bench_one(t[0], t[1], t[2], ctx), tasks))
    else:
        rows = [_bench_one(m, name, inst, ctx) for m, name, inst in tasks]
    rows.sort(key=lambda r: (r["method"], r["instance"]))

    optima = _reference_optima(paths, insts, args)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    rows_path = report.parent / (report.stem + "_rows.csv")
    with open(rows_path, "w") as fh:
        fh.write("method,instance,objective,primary,penalty,feasible,wall_ms\n")
        for r in rows:
            fh.write(f"{r['method']},{r['instance']},{r['objective']!r},"
                     f"{r['primary']!r},{r['penalty']!r},{int(r['feasible'])},"
                     f"{r['wall_ms']!r}\n")
    summary = []
    for m in methods:
        sub = [r for r in rows if r["method"] == m]
        objs = np.array([r["objective"] for r in sub])
        times = np.array([r["wall_ms"] for r in sub])
        gap = ""
        if optima:
            gaps = [(r["objective"] - optima[r["instance"]]) / max(optima[r["instance"]], 1e-12)
                    for r in sub if r["instance"] in optima]
            if gaps:
                gap = repr(float(np.mean(gaps) * 100.0))
        summary.append({"method": m, "mean": float(objs.mean()),
                        "std": float(objs.std()), "mean_time_ms": float(times.mean()),
                        "gap_pct": gap})
    with open(report, "w") as fh:
        fh.write("method,mean,std,mean_time_ms,gap_pct\n")
        for s in summary:
            fh.write(f"{s['method']},{s['mean']!r},{s['std']!r},"
                     f"{s['mean_time_ms']!r},{s['gap_pct']}\n")
    if args.pretty:
        print(f"{'method':<14}{'mean':>12}{'std':>12}{'time ms':>12}{'gap %':>10}")
        for s in summary:
            gap = s["gap_pct"] if s["gap_pct"] else "-"
            print(f"{s['method']:<14}{s['mean']:>12.2f}{s['std']:>12.2f}"
                  f"{s['mean_time_ms']:>12.2f}{str(gap)[:8]:>10}")
    print(f"report written to {report} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# gantt
# ---------------------------------------------------------------------------

def cmd_gantt(args) -> int:
    sched, machine = jsp_env.parse_schedule(Path(args.schedule).read_text())
    doc = jsp_env.gantt_from_matrices(sched.starts, sched.ends, machine)
    Path(args.out).write_text(doc.to_svg())
    if args.text:
        Path(args.text).write_text(doc.to_text())
    print(f"gantt written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccorl",
                                 description="Constrained scheduling and placement: "
                                             "heuristics, GA and RL")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an instance dataset")
    g.add_argument("--problem", choices=("jsp", "vrap"), required=True)
    g.add_argument("--count", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=int, default=10)
    g.add_argument("--machines", type=int, default=10)
    g.add_argument("--dur-lo", type=int, default=1)
    g.add_argument("--dur-hi", type=int, default=99)
    g.add_argument("--hosts", type=int, default=10)
    g.add_argument("--catalog", type=int, default=10)
    g.add_argument("--chain", type=int, default=5)
    g.add_argument("--max-occupancy", type=float, default=0.5)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a policy from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="model path prefix")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="override the config epoch count")
    t.add_argument("--ckpt-every", type=int, default=100)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="solve one instance with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--instance", required=True)
    s.add_argument("--decode", default="greedy", help="greedy or sample:N")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lambda", dest="lam", type=float, default=0.0)
    s.add_argument("--tth", type=float, default=0.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="run methods over an instance directory")
    b.add_argument("--suite", required=True)
    b.add_argument("--methods", required=True,
                   help="comma list: spt,lpt,fcfs,lwr,ga,rl_greedy,rl_sample:N")
    b.add_argument("--model")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--lambda", dest="lam", type=float, default=0.0)
    b.add_argument("--tth", type=float, default=0.0)
    b.add_argument("--ga-population", type=int, default=300)
    b.add_argument("--ga-generations", type=int, default=500)
    b.add_argument("--optima", help="csv of instance,objective reference optima")
    b.add_argument("--brute-force", action="store_true",
                   help="compute optima exactly (small instances only)")
    b.add_argument("--report", required=True)
    b.add_argument("--pretty", action="store_true")
    b.set_defaults(func=cmd_bench)

    ga = sub.add_parser("gantt", help="render a schedule file as SVG")
    ga.add_argument("--schedule", required=True)
    ga.add_argument("--out", required=True)
    ga.add_argument("--text", help="also write the textual bar list here")
    ga.set_defaults(func=cmd_gantt)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, InstanceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
