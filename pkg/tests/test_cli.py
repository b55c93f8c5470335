import json

import pytest
import yaml

from orbitarm import cli
from orbitarm import env as env_mod
from orbitarm import selftest
from orbitarm.config import DEFAULT_GRIDS, RunConfig, config_from_dict, load_config, parse_grid
from orbitarm.errors import ConfigError

SMOKE = {
    "seed": 3,
    "train": {"buffer_size": 500, "minibatch": 100, "update_steps": 3, "prior_budget": 150,
              "eval_every": 1, "eval_episodes": 4, "batch_envs": 10, "checkpoint_every": 1},
}


@pytest.fixture
def smoke_cfg(tmp_path, monkeypatch):
    p = tmp_path / "smoke.yaml"
    p.write_text(yaml.safe_dump(SMOKE))
    monkeypatch.setenv("ORBITARM_OUTPUT_ROOT", str(tmp_path / "out"))
    return p


# ------------------------------------------------------------------ config

def test_defaults_match_reference_tables():
    c = RunConfig()
    t = c.train
    assert (t.buffer_size, t.minibatch, t.total_episodes, t.horizon) == (80000, 8000, 240000, 50)
    assert (t.gamma, t.lam, t.clip_eps, t.update_steps, t.her_epochs, t.guidance_epochs) == (
        0.96, 0.95, 0.1, 90, 70, 15)
    r = c.rewards
    assert (r.k_pos, r.k_ori, r.k_smth, r.k_aln, r.k_done_m) == (0.5, 0.125, 0.1, 0.15, 0.1)
    assert (r.k_att, r.k_var, r.k_done_b) == (2.5, 2.5, 0.2)
    assert c.eval.episodes == 1000


def test_print_config_round_trips(capsys):
    assert cli.main(["train", "--print-config"]) == 0
    text = capsys.readouterr().out
    assert config_from_dict(yaml.safe_load(text)) == RunConfig()


def test_unknown_keys_rejected_with_path():
    for doc, field in [({"trian": {}}, "trian"), ({"train": {"gama": 1}}, "train.gama"),
                       ({"rewards": {"k_pos": "x"}}, "rewards.k_pos"),
                       ({"robustness": {"grids": {"warp": "0:1:2"}}}, "robustness.grids.warp")]:
        with pytest.raises(ConfigError) as exc:
            config_from_dict(doc)
        assert exc.value.field == field


def test_invalid_values_name_field():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"train": {"minibatch": 100000}})
    assert exc.value.field == "train.minibatch"


def test_missing_model_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("model_file: /does/not/exist.yaml\n")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert exc.value.field == "model_file"
    assert cli.main(["train", "--config", str(p), "--epochs", "1"]) == 1


def test_grid_parsing():
    assert parse_grid("0:0.05:0.20") == [0.0, 0.05, 0.1, 0.15, 0.2]
    assert parse_grid("0:0.25:1.0")[-1] == 1.0
    assert parse_grid("0.1,0.3") == [0.1, 0.3]
    for bad in ("", "1:0:2", "0:1", "a:b:c"):
        with pytest.raises(ConfigError):
            parse_grid(bad)
    assert set(DEFAULT_GRIDS) == set(cli.ev.SCENARIOS)
    for g in DEFAULT_GRIDS.values():
        assert 0.0 in parse_grid(g)


# -------------------------------------------------------------------- train

def test_default_schedule_announced(smoke_cfg, capsys, monkeypatch):
    import orbitarm.trainer as tr
    monkeypatch.setattr(tr, "train", lambda *a, **k: None)
    assert cli.main(["train", "--epochs", "1"]) == 0
    assert "schedule: 150 epochs" in capsys.readouterr().out


def test_train_run_directory(smoke_cfg, tmp_path, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(smoke_cfg), "--epochs", "2", "--workers", "1",
                     "--run-dir", str(run)]) == 0
    man = json.loads((run / "manifest.json").read_text())
    assert man["seed"] == 3 and len(man["code_sha256"]) == 64 and man["package_version"]
    assert load_config(run / "config.yaml").train.buffer_size == 500
    assert len((run / "metrics.csv").read_text().splitlines()) == 3
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == [
        "epoch0001_b.ckpt", "epoch0001_m.ckpt", "epoch0002_b.ckpt", "epoch0002_m.ckpt"]
    assert cli.find_checkpoints(run)["m"].name == "epoch0002_m.ckpt"


def test_buffer_override_scales_minibatch(capsys):
    assert cli.main(["train", "--print-config", "--buffer", "4000"]) == 0
    d = yaml.safe_load(capsys.readouterr().out)
    assert d["train"]["buffer_size"] == 4000 and d["train"]["minibatch"] == 400


# --------------------------------------------------------------- eval etc.

@pytest.fixture(scope="module")
def checkpoint_dir(tmp_path_factory):
    from orbitarm import dynamics as dyn
    from orbitarm.nn import save_agent
    from orbitarm.trainer import SpaceRobotTask, init_agents
    d = tmp_path_factory.mktemp("ck") / "checkpoints"
    d.mkdir()
    pols, crits = init_agents(SpaceRobotTask(dyn.load_model()), 0)
    for a in ("m", "b"):
        save_agent(d / f"epoch0001_{a}.ckpt", a, pols[a], crits[a])
    return d.parent


def test_eval_default_episode_count():
    args = cli.build_parser().parse_args(["eval", "--expert"])
    assert args.episodes is None and RunConfig().eval.episodes == 1000


def test_eval_same_seed_identical(checkpoint_dir, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        assert cli.main(["eval", "--checkpoint", str(checkpoint_dir), "--episodes", "4",
                         "--workers", "1", "--out", str(tmp_path / name)]) == 0
        outs.append(capsys.readouterr().out.split("results:")[0])
        assert "end-effector position error" in outs[-1]
    assert outs[0] == outs[1]
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()


def test_eval_expert_needs_no_checkpoint(smoke_cfg, tmp_path, capsys):
    assert cli.main(["eval", "--expert", "--config", str(smoke_cfg), "--episodes", "2",
                     "--out", str(tmp_path / "e")]) == 0
    assert "expert" in capsys.readouterr().out


def test_eval_bad_checkpoint(tmp_path):
    (tmp_path / "epoch0001_m.ckpt").write_bytes(b"garbage")
    (tmp_path / "epoch0001_b.ckpt").write_bytes(b"garbage")
    assert cli.main(["eval", "--checkpoint", str(tmp_path), "--episodes", "1"]) == 1
    assert cli.main(["eval", "--episodes", "1"]) == 1


def test_robustness_outputs(checkpoint_dir, tmp_path, capsys):
    out = tmp_path / "rob"
    assert cli.main(["robustness", "momentum-sat", "--grid", "0:0.5:1.0", "--checkpoint", str(checkpoint_dir),
                     "--episodes", "2", "--seeds", "0", "--workers", "1", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["scenarios"]["momentum-sat"] == [0.0, 0.5, 1.0] and man["seed"] == 0
    assert (out / "momentum-sat.csv").exists() and (out / "momentum-sat.png").exists()


def test_robustness_validation(checkpoint_dir):
    assert cli.main(["robustness", "spin", "--grid", "", "--checkpoint", str(checkpoint_dir)]) == 1
    assert cli.main(["robustness", "warp", "--checkpoint", str(checkpoint_dir)]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["robustness"])
    assert exc.value.code == 1


def test_maintenance_trace(checkpoint_dir, tmp_path):
    out = tmp_path / "m"
    assert cli.main(["maintenance", "--checkpoint", str(checkpoint_dir), "--out", str(out)]) == 0
    assert len((out / "trace.csv").read_text().splitlines()) == 101
    assert (out / "trace.png").exists()


# ---------------------------------------------------------------- selftest

def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6 and "tol=" in out


def test_selftest_catches_reward_sign_flip(monkeypatch, capsys):
    real = env_mod.reward_manipulator

    def flipped(*args):
        r, c = real(*args)
        c = c.copy()
        c[..., 0] = -c[..., 0]     # pose penalty coefficient with the wrong sign
        return c.sum(-1), c

    monkeypatch.setattr(env_mod, "reward_manipulator", flipped)
    ok, checks = selftest.run_selftest(log=None)
    assert not ok
    assert [c.name for c in checks if not c.ok] == ["reward oracles"]
    assert cli.main(["selftest"]) == 2
