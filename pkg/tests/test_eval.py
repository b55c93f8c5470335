import numpy as np
import pytest

from orbitarm import eval as ev
from orbitarm.env import FaultState
from orbitarm.errors import ConfigError, IncompleteTrace
from orbitarm.trainer import SpaceRobotTask, init_agents


@pytest.fixture(scope="module")
def controller(model):
    pols, _ = init_agents(SpaceRobotTask(model), 0)
    return ev.PolicyController(pols)


# ------------------------------------------------------------------ metrics

def test_constant_trace_window_mean():
    m = ev.episode_metrics(np.full(50, 0.02), np.zeros(50), np.zeros(50))
    assert abs(m.ape - 0.02) < 1e-12


def test_split_window_mean():
    e = np.zeros(50)
    e[40:45], e[45:50] = 0.01, 0.03
    assert abs(ev.episode_metrics(e, e, e).ape - 0.02) < 1e-12


def test_window_ignores_early_steps():
    e = np.full(50, 9.0)
    e[40:] = 0.0
    m = ev.episode_metrics(e, e, e)
    assert m.ape == 0.0 and m.aoe == 0.0 and m.abae == 0.0


def test_truncated_trace_raises():
    with pytest.raises(IncompleteTrace):
        ev.episode_metrics(np.zeros(30), np.zeros(30), np.zeros(30))
    with pytest.raises(IncompleteTrace):
        ev.batch_metrics(np.zeros((2, 30)), np.zeros((2, 30)), np.zeros((2, 30)))


def test_aggregate_two_episodes():
    a = ev.episode_metrics(np.full(50, 0.02), np.zeros(50), np.zeros(50))
    b = ev.episode_metrics(np.full(50, 0.04), np.zeros(50), np.zeros(50))
    assert abs(ev.aggregate([a, b])["APE"] - 0.03) < 1e-12


def test_aggregate_all_zero_all_success():
    eps = [ev.episode_metrics(np.zeros(50), np.zeros(50), np.zeros(50)) for _ in range(3)]
    assert ev.aggregate(eps) == {"ASR": 1.0, "APE": 0.0, "AOE": 0.0, "ABAE": 0.0}


def test_success_needs_all_three_errors():
    ok = np.zeros(50)
    bad = np.full(50, 0.2)
    assert not ev.episode_metrics(ok, ok, bad).success
    assert not ev.episode_metrics(bad, ok, ok).success
    assert ev.episode_metrics(ok, ok, ok).success


def test_batch_metrics_agrees_with_per_episode(rng):
    e = rng.uniform(0, 0.12, (3, 20, 50))
    per = ev.batch_metrics(*e)
    for i in range(20):
        m = ev.episode_metrics(e[0, i], e[1, i], e[2, i])
        assert m.success == per["success"][i]
        assert abs(m.ape - per["ape"][i]) < 1e-15 and abs(m.abae - per["abae"][i]) < 1e-15


# ---------------------------------------------------------------- scenarios

def test_scenario_mapping():
    assert ev.scenario_faults("eff-manip", 0.3).eff_manip == pytest.approx(0.7)
    assert ev.scenario_faults("base-mass", -0.25).base_mass_scale == pytest.approx(0.75)
    assert ev.scenario_faults("spin", 0.2).spin_rate == 0.2
    for name in ev.SCENARIOS:
        assert ev.scenario_faults(name, 0.0) == FaultState()


def test_unknown_scenario():
    with pytest.raises(ConfigError) as exc:
        ev.scenario_faults("warp-drive", 1.0)
    assert exc.value.field == "scenario"


def test_empty_grid_rejected(model, controller):
    with pytest.raises(ConfigError):
        ev.run_scenario(model, controller, "spin", [], [0], episodes=2)


def test_zero_point_equals_nominal(model, controller):
    nominal, _ = ev.evaluate(model, controller, episodes=6, seed=4, batch=3)
    for name in ("spin", "obs-delay", "momentum-sat", "base-mass"):
        res = ev.run_scenario(model, controller, name, [0.0], [4], episodes=6, batch=3)
        assert res[0].per_seed[0] == nominal


def test_extreme_spin_runs(model, controller):
    res = ev.run_scenario(model, controller, "spin", [0.2], [0], episodes=2)
    s = res[0].per_seed[0]
    assert 0 <= s["ASR"] <= 1 and min(s["APE"], s["AOE"], s["ABAE"]) >= 0


def test_full_saturation_zero_torque(model, controller):
    job = ev.EvalJob(model, controller, ev.scenario_faults("momentum-sat", 1.0), ev.RewardConfig(), 0, 0, 4)
    assert np.all(ev.run_job(job)["tau_abs_max"] == 0.0)


def test_worker_count_does_not_change_results(model, controller):
    a = ev.run_scenario(model, controller, "act-delay", [0.0, 0.4], [0, 1], episodes=4, batch=2, workers=1)
    b = ev.run_scenario(model, controller, "act-delay", [0.0, 0.4], [0, 1], episodes=4, batch=2, workers=2)
    assert [r.per_seed for r in a] == [r.per_seed for r in b]


def test_seed_results_independent_of_other_seeds(model, controller):
    a = ev.run_scenario(model, controller, "obs-delay", [0.3], [1], episodes=4)
    b = ev.run_scenario(model, controller, "obs-delay", [0.3], [5, 1], episodes=4)
    assert a[0].per_seed[0] == b[0].per_seed[1]


# ------------------------------------------------------------------ export

def _result(value, seeds):
    rng = np.random.default_rng(int(value * 100))
    per = [{m: float(rng.uniform()) for m in ev.METRICS} for _ in seeds]
    return ev.CampaignResult("spin", value, list(seeds), per)


def test_empty_campaign_header_only(tmp_path):
    ev.write_campaign(tmp_path / "x.csv", [])
    assert (tmp_path / "x.csv").read_text().strip() == ",".join(ev.CAMPAIGN_COLUMNS)


def test_single_seed_std_zero(tmp_path):
    ev.write_campaign(tmp_path / "x.csv", [_result(0.1, [0])])
    import csv
    row = next(csv.DictReader(open(tmp_path / "x.csv")))
    assert all(float(row[f"{m}_std"]) == 0.0 for m in ev.METRICS)


def test_campaign_round_trip(tmp_path):
    res = [_result(v, [0, 1, 2]) for v in (0.0, 0.05, 0.1)]
    ev.write_campaign(tmp_path / "x.csv", res)
    assert ev.read_campaign(tmp_path / "x.csv") == res


def test_plot_export_manifest(tmp_path):
    ck = tmp_path / "a.ckpt"
    ck.write_bytes(b"abc")
    out = ev.plot_export(tmp_path / "out", {"spin": [_result(0.0, [0, 1])]}, [0, 1], 10, checkpoints=[ck])
    import json
    man = json.loads((out / "manifest.json").read_text())
    assert man["scenarios"] == {"spin": [0.0]} and man["seeds"] == [0, 1]
    assert man["checkpoints"]["a.ckpt"] == ev.file_sha256(ck)
    assert (out / "spin.png").stat().st_size > 0


def test_maintenance_replay_trace(model, controller, tmp_path):
    from orbitarm.env import read_trace
    tr = ev.maintenance_replay(model, controller, tmp_path / "t.csv", steps=100)
    assert tr["e_att"].shape == (1, 100)
    rows = read_trace(tmp_path / "t.csv")
    assert len(rows) == 100
