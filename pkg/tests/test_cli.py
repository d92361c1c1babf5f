import json

import numpy as np
import pytest

from swarmplan.cli import EX_BADINPUT, EX_OK, EX_PLANFAIL, EX_USAGE, main
from swarmplan.scenario import (
    Scenario,
    load_scenario,
    read_trajectory_csv,
    save_scenario,
    sim_algo,
    sim_phys,
    write_trajectory_csv,
)


def run_cli(*args):
    return main([str(a) for a in args])


@pytest.fixture()
def four_agent_scenario(tmp_path):
    path = tmp_path / "four.json"
    rc = run_cli("gen", "--n", 4, "--box", "2,2,1", "--seed", 1, "-o", path)
    assert rc == EX_OK
    return path


class TestGen:
    def test_creates_valid_scenario(self, four_agent_scenario):
        sc = load_scenario(four_agent_scenario)
        assert sc.n_agents == 4
        assert np.allclose(sc.phys.p_max, [2, 2, 1])

    def test_density_cube(self, tmp_path):
        out = tmp_path / "s.json"
        assert run_cli("gen", "--n", 20, "--density", "1.0", "--seed", 7,
                       "-o", out) == EX_OK
        sc = load_scenario(out)
        assert np.allclose(sc.phys.p_max - sc.phys.p_min, 20 ** (1 / 3))

    def test_missing_out_is_usage_error(self):
        assert run_cli("gen", "--n", 4, "--density", "1.0") == EX_USAGE

    def test_both_box_and_density_usage_error(self, tmp_path):
        assert run_cli("gen", "--n", 4, "--density", "1.0", "--box", "2,2,1",
                       "-o", tmp_path / "x.json") == EX_USAGE

    def test_generation_error_exit_2(self, tmp_path):
        rc = run_cli("gen", "--n", 80, "--box", "1,1,1", "--seed", 0,
                     "-o", tmp_path / "x.json")
        assert rc == EX_BADINPUT

    def test_config_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"algo": {"kappa": 2}, "physics": {"r_min": 0.2}}))
        out = tmp_path / "s.json"
        assert run_cli("gen", "--n", 4, "--box", "2,2,1", "--seed", 0,
                       "--config", cfg, "-o", out) == EX_OK
        sc = load_scenario(out)
        assert sc.algo.kappa == 2
        assert sc.phys.r_min == 0.2


class TestSolveAndCheck:
    def test_round_trip(self, four_agent_scenario, tmp_path):
        out_dir = tmp_path / "out"
        assert run_cli("solve", four_agent_scenario, "--out-dir", out_dir) == EX_OK
        csv_path = out_dir / "four_trajectory.csv"
        metrics_path = out_dir / "four_metrics.json"
        assert csv_path.exists() and metrics_path.exists()
        metrics = json.loads(metrics_path.read_text())
        assert metrics["success"] is True
        assert metrics["distance_ratio"] > 0.9
        # stored trajectory re-verifies
        assert run_cli("check", csv_path, four_agent_scenario) == EX_OK

    def test_planner_failure_exit_3_files_written(self, tmp_path):
        phys = sim_phys((-3, -3, 0), (3, 3, 3))
        sc = Scenario(id="rushed", starts=[[-1, 0, 1]], goals=[[1.5, 0, 1]],
                      static=[False], phys=phys, algo=sim_algo(t_max=0.4))
        path = tmp_path / "rushed.json"
        save_scenario(sc, path)
        out_dir = tmp_path / "out"
        assert run_cli("solve", path, "--out-dir", out_dir) == EX_PLANFAIL
        assert (out_dir / "rushed_trajectory.csv").exists()
        metrics = json.loads((out_dir / "rushed_metrics.json").read_text())
        assert metrics["failure_reason"] == "timeout"

    def test_bad_scenario_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run_cli("solve", bad) == EX_BADINPUT

    def test_clustered_solve_matches_itself(self, four_agent_scenario, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert run_cli("solve", four_agent_scenario, "--clusters", 2,
                       "--out-dir", out_a) == EX_OK
        assert run_cli("solve", four_agent_scenario, "--clusters", 2,
                       "--out-dir", out_b) == EX_OK
        assert (out_a / "four_trajectory.csv").read_bytes() == \
            (out_b / "four_trajectory.csv").read_bytes()

    def test_check_detects_near_miss(self, four_agent_scenario, tmp_path):
        sc = load_scenario(four_agent_scenario)
        # hand-built pair sliding below the threshold
        samples = 50
        t = np.arange(samples) * sc.phys.ts
        p = np.zeros((4, samples, 3))
        for i in range(4):
            p[i, :, :] = sc.goals[i]
        gap = np.linspace(1.0, 0.1, samples)
        p[0, :, 0] = p[1, :, 0] + gap
        p[0, :, 1:] = p[1, :, 1:]
        v = np.zeros_like(p)
        a = np.zeros_like(p)
        csv_path = tmp_path / "near.csv"
        write_trajectory_csv(csv_path, t, p, v, a)
        assert run_cli("check", csv_path, four_agent_scenario) == EX_PLANFAIL

    def test_check_malformed_csv_exit_2(self, four_agent_scenario, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("agent_id,t,px,py,pz,vx,vy,vz,ax,ay,az\n0,0,1\n")
        assert run_cli("check", bad, four_agent_scenario) == EX_BADINPUT

    def test_agent_count_mismatch_exit_2(self, four_agent_scenario, tmp_path):
        t = np.zeros(1)
        z = np.zeros((2, 1, 3))
        csv_path = tmp_path / "two.csv"
        write_trajectory_csv(csv_path, t, z, z, z)
        assert run_cli("check", csv_path, four_agent_scenario) == EX_BADINPUT


class TestBench:
    def test_sweep_and_resume(self, tmp_path):
        out = tmp_path / "bench.json"
        rc = run_cli("bench", "--trials", 2, "--n", 5,
                     "--strategies", "soft-on-demand,hard-on-demand",
                     "--seed-base", 3, "-o", out)
        assert rc == EX_OK
        report = json.loads(out.read_text())
        assert len(report["trials"]) == 4
        assert len(report["aggregates"]) == 2
        for rec in report["trials"]:
            assert rec["seed"] == 3 + rec["trial"]
        # resume: nothing re-run, records identical
        before = {r["key"]: r for r in report["trials"]}
        assert run_cli("bench", "--trials", 2, "--n", 5,
                       "--strategies", "soft-on-demand,hard-on-demand",
                       "--seed-base", 3, "-o", out) == EX_OK
        after = json.loads(out.read_text())
        assert {r["key"]: r for r in after["trials"]} == before

    def test_zero_trials_empty_aggregate(self, tmp_path):
        out = tmp_path / "empty.json"
        assert run_cli("bench", "--trials", 0, "--n", 4, "-o", out) == EX_OK
        report = json.loads(out.read_text())
        assert report["trials"] == []
        assert report["aggregates"] == []

    def test_volume_sweep(self, tmp_path):
        out = tmp_path / "vol.json"
        assert run_cli("bench", "--trials", 1, "--n-sweep", "4,6",
                       "--volume", "8.0", "-o", out) == EX_OK
        report = json.loads(out.read_text())
        assert {r["n_agents"] for r in report["trials"]} == {4, 6}


class TestUsage:
    def test_unknown_command(self):
        assert run_cli("fly") == EX_USAGE

    def test_no_command(self):
        assert run_cli() == EX_USAGE

    def test_unknown_strategy(self, tmp_path):
        sc = tmp_path / "s.json"
        assert run_cli("gen", "--n", 3, "--box", "2,2,1", "-o", sc) == EX_OK
        assert run_cli("solve", sc, "--strategy", "magic") == EX_USAGE
