import json

import numpy as np
import pytest

from ccorl import cli, jsp_env
from ccorl.cli import main, parse_train_config
from ccorl.instances import load_instance, parse_orlib


TINY_JSP_CFG = """\
# tiny training run
problem jsp
jobs 2
machines 2
dur_hi 9
batch_instances 2
samples_per_instance 3
epochs 2
dataset_size 4
chunk_instances 2
seed 5
"""


def run(*argv) -> int:
    return main(list(argv))


class TestGen:
    def test_writes_files_and_manifest(self, tmp_path):
        out = tmp_path / "ds"
        assert run("gen", "--problem", "jsp", "--count", "3", "--seed", "1",
                   "--jobs", "3", "--machines", "2", "--out", str(out)) == 0
        files = sorted(p.name for p in out.iterdir())
        assert files == ["inst_0000.jsp", "inst_0001.jsp", "inst_0002.jsp",
                         "manifest.json"]
        man = json.loads((out / "manifest.json").read_text())
        assert man["count"] == 3 and man["problem"] == "jsp"
        assert man["files"] == files[:3]
        inst = load_instance(out / "inst_0000.jsp")
        assert inst.n_jobs == 3

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run("gen", "--problem", "vrap", "--count", "2", "--seed", "9",
                "--hosts", "3", "--catalog", "3", "--chain", "3", "--out", str(out))
        for name in ("inst_0000.vrap", "inst_0001.vrap"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestTrainConfigParsing:
    def test_parse_basic(self):
        cfg = parse_train_config(TINY_JSP_CFG)
        assert cfg.n_jobs == 2 and cfg.epochs == 2 and cfg.seed == 5

    def test_errors_listed_exhaustively(self):
        bad = "problem jsp\nnope 3\nalpha banana\nwhat\n"
        with pytest.raises(cli.CliError) as ei:
            parse_train_config(bad)
        msg = str(ei.value)
        assert "unknown key 'nope'" in msg
        assert "bad value for 'alpha'" in msg
        assert "expected 'key value'" in msg

    def test_semantic_validation(self):
        with pytest.raises(cli.CliError, match="alpha"):
            parse_train_config("alpha 1.5\n")

    def test_round_trip_through_dict(self):
        cfg = parse_train_config(TINY_JSP_CFG)
        again = cli.train_config_from_dict(cli.train_config_to_dict(cfg))
        assert again == cfg


class TestTrainSolve:
    @pytest.fixture
    def trained(self, tmp_path):
        cfg_path = tmp_path / "train.cfg"
        cfg_path.write_text(TINY_JSP_CFG)
        model = tmp_path / "model"
        assert run("train", "--config", str(cfg_path), "--out", str(model),
                   "--quiet") == 0
        return tmp_path, model

    def test_outputs_exist(self, trained):
        tmp_path, model = trained
        assert model.with_suffix(".ckpt").exists()
        assert model.with_suffix(".json").exists()
        stats = model.with_suffix(".stats.csv").read_text().splitlines()
        assert stats[0].startswith("epoch,mean_L,std_L")
        assert len(stats) == 3  # header + 2 epochs

    def test_resume_continues_epoch_numbering(self, trained):
        tmp_path, model = trained
        cfg_path = tmp_path / "train.cfg"
        assert run("train", "--config", str(cfg_path), "--out", str(model),
                   "--resume", str(model.with_suffix(".ckpt")),
                   "--epochs", "2", "--quiet") == 0
        rows = model.with_suffix(".stats.csv").read_text().splitlines()[1:]
        assert [r.split(",")[0] for r in rows] == ["0", "1", "2", "3"]

    def test_solve_greedy_deterministic(self, trained, tmp_path):
        tmp_path, model = trained
        inst_path = tmp_path / "one.jsp"
        inst_path.write_text("2 2\n0 3 1 2\n1 2 0 4\n")
        out1 = tmp_path / "sol1.txt"
        out2 = tmp_path / "sol2.txt"
        for out in (out1, out2):
            assert run("solve", "--model", str(model), "--instance", str(inst_path),
                       "--decode", "greedy", "--out", str(out)) == 0
        assert out1.read_text() == out2.read_text()
        sched, machine = jsp_env.parse_schedule(out1.read_text())
        inst = parse_orlib(inst_path.read_text())
        jsp_env.check_schedule(sched, inst)

    def test_solve_sample_best_of_forty_not_worse(self, trained, tmp_path, capsys):
        tmp_path, model = trained
        inst_path = tmp_path / "one.jsp"
        inst_path.write_text("2 2\n0 3 1 2\n1 2 0 4\n")

        def objective_of(decode):
            assert run("solve", "--model", str(model), "--instance", str(inst_path),
                       "--decode", decode, "--seed", "3") == 0
            outp = capsys.readouterr().out
            return float([l for l in outp.splitlines()
                          if l.startswith("objective")][0].split()[1])

        assert objective_of("sample:40") <= objective_of("sample:1")

    def test_incompatible_size_is_validation_error(self, trained, tmp_path):
        tmp_path, model = trained
        big = tmp_path / "big.jsp"
        big.write_text("3 3\n0 3 1 2 2 2\n1 2 0 4 2 2\n2 2 1 2 0 2\n")
        assert run("solve", "--model", str(model), "--instance", str(big)) == 2

    def test_missing_model_is_validation_error(self, tmp_path):
        inst_path = tmp_path / "one.jsp"
        inst_path.write_text("1 1\n0 5\n")
        assert run("solve", "--model", str(tmp_path / "ghost"),
                   "--instance", str(inst_path)) == 2


class TestBench:
    @pytest.fixture
    def suite(self, tmp_path):
        out = tmp_path / "suite"
        run("gen", "--problem", "jsp", "--count", "2", "--seed", "3",
            "--jobs", "2", "--machines", "2", "--dur-hi", "9", "--out", str(out))
        return out

    def test_single_method_rows(self, suite, tmp_path):
        report = tmp_path / "r.csv"
        assert run("bench", "--suite", str(suite), "--methods", "spt",
                   "--report", str(report)) == 0
        rows = (tmp_path / "r_rows.csv").read_text().splitlines()
        assert rows[0] == "method,instance,objective,primary,penalty,feasible,wall_ms"
        assert len(rows) == 3  # header + 2 instances
        summary = report.read_text().splitlines()
        assert summary[0] == "method,mean,std,mean_time_ms,gap_pct"
        assert len(summary) == 2

    def test_aggregates_match_rows(self, suite, tmp_path):
        report = tmp_path / "r.csv"
        run("bench", "--suite", str(suite), "--methods", "spt,lpt,fcfs,lwr",
            "--report", str(report))
        rows = [l.split(",") for l in
                (tmp_path / "r_rows.csv").read_text().splitlines()[1:]]
        summary = {l.split(",")[0]: l.split(",") for l in
                   report.read_text().splitlines()[1:]}
        for method in ("spt", "lpt", "fcfs", "lwr"):
            objs = np.array([float(r[2]) for r in rows if r[0] == method])
            assert float(summary[method][1]) == pytest.approx(objs.mean())
            assert float(summary[method][2]) == pytest.approx(objs.std())

    def test_gap_zero_when_method_is_optimal(self, suite, tmp_path):
        # supply brute-force optima; on 2x2 the spt rule is optimal here
        report = tmp_path / "r.csv"
        assert run("bench", "--suite", str(suite), "--methods", "spt",
                   "--brute-force", "--report", str(report)) == 0
        line = report.read_text().splitlines()[1].split(",")
        gap = float(line[4])
        assert gap >= 0.0
        # and with a reference file equal to spt's own objectives, gap == 0
        rows = [l.split(",") for l in
                (tmp_path / "r_rows.csv").read_text().splitlines()[1:]]
        ref = tmp_path / "opt.csv"
        ref.write_text("instance,objective\n" +
                       "\n".join(f"{r[1]},{r[2]}" for r in rows) + "\n")
        assert run("bench", "--suite", str(suite), "--methods", "spt",
                   "--optima", str(ref), "--report", str(report)) == 0
        line = report.read_text().splitlines()[1].split(",")
        assert float(line[4]) == pytest.approx(0.0)

    def test_unknown_method_rejected(self, suite, tmp_path):
        assert run("bench", "--suite", str(suite), "--methods", "magic",
                   "--report", str(tmp_path / "r.csv")) == 2

    def test_rl_requires_model(self, suite, tmp_path):
        assert run("bench", "--suite", str(suite), "--methods", "rl_greedy",
                   "--report", str(tmp_path / "r.csv")) == 2


TINY_VRAP_CFG = """\
problem vrap
hosts 3
catalog 3
chain 3
batch_instances 2
samples_per_instance 3
epochs 2
dataset_size 4
chunk_instances 2
seed 6
lambda 1.0
"""


class TestVrapPipeline:
    def test_train_solve_bench(self, tmp_path, capsys):
        cfg_path = tmp_path / "v.cfg"
        cfg_path.write_text(TINY_VRAP_CFG)
        model = tmp_path / "vmodel"
        assert run("train", "--config", str(cfg_path), "--out", str(model),
                   "--quiet") == 0
        suite = tmp_path / "vsuite"
        run("gen", "--problem", "vrap", "--count", "2", "--seed", "8",
            "--hosts", "3", "--catalog", "3", "--chain", "3", "--out", str(suite))
        sol = tmp_path / "sol.place"
        assert run("solve", "--model", str(model),
                   "--instance", str(suite / "inst_0000.vrap"),
                   "--decode", "sample:4", "--lambda", "1", "--out", str(sol)) == 0
        out = capsys.readouterr().out
        assert "latency_excess" in out
        assert sol.read_text().startswith("vrap-placement-v1")
        report = tmp_path / "vr.csv"
        assert run("bench", "--suite", str(suite), "--methods", "ga,rl_greedy",
                   "--model", str(model), "--lambda", "1",
                   "--ga-population", "12", "--ga-generations", "10",
                   "--brute-force", "--report", str(report)) == 0
        lines = report.read_text().splitlines()
        assert len(lines) == 3  # header + ga + rl_greedy
        assert all(len(l.split(",")) == 5 for l in lines)

    def test_jsp_model_on_vrap_instance_rejected(self, tmp_path):
        cfg_path = tmp_path / "t.cfg"
        cfg_path.write_text(TINY_JSP_CFG)
        model = tmp_path / "m"
        run("train", "--config", str(cfg_path), "--out", str(model), "--quiet")
        suite = tmp_path / "vs"
        run("gen", "--problem", "vrap", "--count", "1", "--seed", "1",
            "--hosts", "2", "--catalog", "2", "--chain", "2", "--out", str(suite))
        assert run("solve", "--model", str(model),
                   "--instance", str(suite / "inst_0000.vrap")) == 2


class TestThreadedBench:
    def test_thread_count_env_var(self, tmp_path, monkeypatch):
        suite = tmp_path / "suite"
        run("gen", "--problem", "jsp", "--count", "3", "--seed", "4",
            "--jobs", "2", "--machines", "2", "--dur-hi", "9", "--out", str(suite))
        serial = tmp_path / "serial.csv"
        threaded = tmp_path / "threaded.csv"
        run("bench", "--suite", str(suite), "--methods", "spt,lpt",
            "--report", str(serial))
        monkeypatch.setenv("CCORL_THREADS", "2")
        run("bench", "--suite", str(suite), "--methods", "spt,lpt",
            "--report", str(threaded))
        # identical objectives regardless of the executor
        strip = lambda p: [",".join(l.split(",")[:3]) for l in
                           (tmp_path / p).read_text().splitlines()]
        assert strip("serial_rows.csv") == strip("threaded_rows.csv")


class TestGantt:
    def test_render_two_by_two(self, tmp_path):
        from ccorl.baselines import brute_force_jsp
        inst = parse_orlib("2 2\n0 3 1 2\n1 2 0 4")
        sched, _ = brute_force_jsp(inst)
        sched_path = tmp_path / "s.sched"
        sched_path.write_text(jsp_env.write_schedule(sched, inst))
        out = tmp_path / "g.svg"
        text = tmp_path / "g.txt"
        assert run("gantt", "--schedule", str(sched_path), "--out", str(out),
                   "--text", str(text)) == 0
        svg = out.read_text()
        assert svg.count("<rect") == 4
        assert "makespan 7" in svg
        bars = [l for l in text.read_text().splitlines() if l.startswith("bar ")]
        assert len(bars) == 4
        # per machine, bars are sorted and never overlap
        per_machine: dict[int, list[tuple[int, int]]] = {}
        for b in bars:
            _, mach, job, op, start, end = b.split()
            per_machine.setdefault(int(mach), []).append((int(start), int(end)))
        for spans in per_machine.values():
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                assert s2 >= e1

    def test_missing_file_is_io_error(self, tmp_path):
        assert run("gantt", "--schedule", str(tmp_path / "none.sched"),
                   "--out", str(tmp_path / "g.svg")) == 3
