import numpy as np
import pytest

from ccorl import jsp_env, vrap_env
from ccorl.baselines import (DISPATCH_RULES, GaConfig, brute_force,
                             brute_force_jsp, brute_force_vrap, dispatch,
                             ga_jsp, ga_vrap)
from ccorl.instances import gen_jsp, gen_vrap, parse_orlib
from ccorl.jsp_env import check_schedule


@pytest.fixture
def inst2x2():
    return parse_orlib("2 2\n0 3 1 2\n1 2 0 4")


class TestDispatch:
    def test_spt_solves_two_by_two(self, inst2x2):
        assert dispatch(inst2x2, "SPT").makespan == 7

    def test_single_job_identical_under_all_rules(self):
        inst = parse_orlib("1 3\n0 4 2 2 1 7")
        scheds = [dispatch(inst, r) for r in DISPATCH_RULES]
        for s in scheds[1:]:
            assert np.array_equal(s.starts, scheds[0].starts)

    def test_always_feasible(self):
        for seed in range(15):
            inst = gen_jsp(4, 4, 1, 20, seed=seed)
            for rule in DISPATCH_RULES:
                check_schedule(dispatch(inst, rule), inst)

    def test_unknown_rule(self, inst2x2):
        with pytest.raises(ValueError):
            dispatch(inst2x2, "EDD")

    def test_rules_differ_somewhere(self):
        # sanity: SPT and LPT disagree on at least one random instance
        diffs = 0
        for seed in range(10):
            inst = gen_jsp(4, 4, 1, 99, seed=seed)
            if dispatch(inst, "SPT").makespan != dispatch(inst, "LPT").makespan:
                diffs += 1
        assert diffs > 0


class TestBruteForce:
    def test_two_by_two_optimum(self, inst2x2):
        sched, obj = brute_force_jsp(inst2x2)
        assert obj == 7.0
        assert sched.makespan == 7
        assert sched.makespan >= inst2x2.lower_bound()

    def test_single_op(self):
        inst = parse_orlib("1 1\n0 9")
        assert brute_force_jsp(inst)[1] == 9.0

    def test_respects_lambda(self, inst2x2):
        _, obj0 = brute_force_jsp(inst2x2, lam=0.0)
        _, obj1 = brute_force_jsp(inst2x2, lam=1.0, t_th=0.0)
        assert obj1 >= obj0

    def test_budget_guard(self):
        with pytest.raises(ValueError, match="budget"):
            brute_force_jsp(gen_jsp(4, 3, 1, 9, seed=0))

    def test_vrap_single_host_chain(self):
        inst = gen_vrap(1, 2, 2, seed=3)
        pl, obj = brute_force_vrap(inst, lam=1.0)
        if pl.feasible:
            assert pl.hosts.tolist() == [0, 0]
            assert obj == pytest.approx(vrap_env.objective(pl, inst, 1.0))

    def test_vrap_matches_exhaustive_scan(self):
        # cross-check the DFS against a plain product scan with env steps
        import itertools
        for seed in range(6):
            inst = gen_vrap(3, 3, 3, seed=seed)
            best = float("inf")
            for combo in itertools.product(range(3), repeat=3):
                s = vrap_env.reset(inst)
                ok = True
                for h in combo:
                    if not vrap_env.feasible_mask(s, inst)[h]:
                        ok = False
                        break
                    s = vrap_env.step(s, h, inst)
                if ok:
                    pl = vrap_env.finish(s, inst)
                    best = min(best, vrap_env.objective(pl, inst, 1.0))
            _, obj = brute_force_vrap(inst, lam=1.0)
            if best == float("inf"):
                assert obj == vrap_env.infeasible_objective(inst)
            else:
                assert obj == pytest.approx(best)

    def test_dispatcher_function(self, inst2x2):
        assert brute_force(inst2x2)[1] == 7.0
        inst = gen_vrap(2, 2, 2, seed=0)
        assert brute_force(inst)[1] == brute_force_vrap(inst)[1]

    def test_dispatch_never_beats_oracle(self):
        for seed in range(20):
            inst = gen_jsp(3, 3, 1, 9, seed=seed)
            _, opt = brute_force_jsp(inst)
            for rule in DISPATCH_RULES:
                assert dispatch(inst, rule).makespan >= opt


class TestGaJsp:
    def test_zero_generations_is_best_of_initial_population(self):
        inst = gen_jsp(3, 3, 1, 9, seed=1)
        res = ga_jsp(inst, GaConfig(population=20, generations=0, seed=2))
        assert len(res.history) == 1
        check_schedule(res.best, inst)

    def test_history_monotone_nonincreasing(self):
        inst = gen_jsp(3, 3, 1, 20, seed=3)
        res = ga_jsp(inst, GaConfig(population=30, generations=40, seed=4))
        assert (np.diff(res.history) <= 0).all()

    def test_reaches_optimum_on_small_instances(self):
        hits = 0
        for seed in range(5):
            inst = gen_jsp(3, 3, 1, 20, seed=seed)
            _, opt = brute_force_jsp(inst)
            res = ga_jsp(inst, GaConfig(population=60, generations=60, seed=seed))
            assert res.objective >= opt
            hits += res.objective == opt
        assert hits >= 4

    def test_deterministic_by_seed(self):
        inst = gen_jsp(3, 3, 1, 20, seed=6)
        a = ga_jsp(inst, GaConfig(population=20, generations=10, seed=7))
        b = ga_jsp(inst, GaConfig(population=20, generations=10, seed=7))
        assert a.objective == b.objective
        assert np.array_equal(a.history, b.history)

    def test_constrained_objective_used(self):
        inst = gen_jsp(3, 3, 1, 20, seed=8)
        res = ga_jsp(inst, GaConfig(population=40, generations=30, seed=9),
                     lam=1.0, t_th=2.0)
        want = jsp_env.objective(res.best, inst, 1.0, 2.0)
        assert res.objective == pytest.approx(want)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            GaConfig(population=1)
        with pytest.raises(ValueError):
            GaConfig(crossover_rate=1.5)


class TestGaVrap:
    def test_runs_and_feasible_or_sentinel(self):
        inst = gen_vrap(4, 3, 3, seed=1)
        res = ga_vrap(inst, GaConfig(population=20, generations=20, seed=2), lam=1.0)
        if res.best.feasible:
            vrap_env.check_placement(res.best, inst)
            assert res.objective == pytest.approx(
                vrap_env.objective(res.best, inst, 1.0))
        else:
            assert res.objective == vrap_env.infeasible_objective(inst)

    def test_history_monotone(self):
        inst = gen_vrap(4, 4, 4, seed=3)
        res = ga_vrap(inst, GaConfig(population=24, generations=30, seed=4), lam=1.0)
        assert (np.diff(res.history) <= 0).all()

    def test_never_beats_oracle(self):
        for seed in range(8):
            inst = gen_vrap(3, 3, 3, seed=seed)
            _, opt = brute_force_vrap(inst, lam=1.0)
            res = ga_vrap(inst, GaConfig(population=30, generations=30, seed=seed),
                          lam=1.0)
            assert res.objective >= opt - 1e-9
