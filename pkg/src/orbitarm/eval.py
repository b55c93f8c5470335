"""Evaluation metrics, the fault-injection campaign runner and result export.

Metrics are averaged over the final ten steps of each episode; an episode
succeeds when all three errors stay under their thresholds for ten
consecutive steps.  Campaign runs are split into fixed (value, seed,
episode-block) jobs whose results depend only on their own random streams,
so worker count never changes the numbers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import seeding
from .env import FaultState, RewardConfig, SpaceRobotEnv, success_monitor, write_trace
from .errors import ConfigError, IncompleteTrace

WINDOW = 10
THRESHOLDS = (0.05, 0.1, 0.05)
RELAXED = (0.1, 0.2, 0.1)
METRICS = ("ASR", "APE", "AOE", "ABAE")
METRIC_DEFINITIONS = {
    "ASR": "fraction of episodes with e_pos, e_ori, e_att all within threshold for 10 consecutive steps",
    "APE": "end-effector position error (m), mean over the final 10 steps, averaged over episodes",
    "AOE": "end-effector orientation error (rad), mean over the final 10 steps, averaged over episodes",
    "ABAE": "base attitude error from the initial attitude (rad), final-10-step mean, averaged over episodes",
}

# scenario name -> (FaultState field, map from grid value to field value)
SCENARIOS = {
    "spin": ("spin_rate", lambda x: x),
    "base-impulse": ("impulse_magnitude", lambda x: x),
    "obs-delay": ("obs_delay_prob", lambda x: x),
    "act-delay": ("act_delay_prob", lambda x: x),
    "eff-base": ("eff_base", lambda x: 1.0 - x),
    "eff-manip": ("eff_manip", lambda x: 1.0 - x),
    "momentum-sat": ("wheel_saturation", lambda x: x),
    "base-mass": ("base_mass_scale", lambda x: 1.0 + x),
    "obs-bias-pos": ("obs_bias_pos", lambda x: x),
    "obs-bias-ori": ("obs_bias_ori", lambda x: x),
}


def scenario_faults(name, value) -> FaultState:
    """FaultState with only the named disturbance set; grid values are
    magnitudes (losses for efficiency, fractional change for mass)."""
    if name not in SCENARIOS:
        raise ConfigError("scenario", f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    key, fn = SCENARIOS[name]
    value = float(value)
    if value == 0.0:
        return FaultState()
    return replace(FaultState(), **{key: fn(value)})


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class EpisodeMetrics:
    e_pos: np.ndarray
    e_ori: np.ndarray
    e_att: np.ndarray
    success: bool
    ape: float
    aoe: float
    abae: float


def episode_metrics(e_pos, e_ori, e_att, horizon=50, thresholds=THRESHOLDS) -> EpisodeMetrics:
    e_pos, e_ori, e_att = (np.asarray(x, dtype=float) for x in (e_pos, e_ori, e_att))
    if not (len(e_pos) == len(e_ori) == len(e_att)) or len(e_pos) < horizon:
        raise IncompleteTrace(f"need {horizon} steps, got {len(e_pos)}")
    w = slice(horizon - WINDOW, horizon)
    ok = bool(success_monitor(e_pos[:horizon], e_ori[:horizon], e_att[:horizon], *thresholds))
    return EpisodeMetrics(e_pos, e_ori, e_att, ok, float(np.mean(e_pos[w])),
                          float(np.mean(e_ori[w])), float(np.mean(e_att[w])))


def batch_metrics(e_pos, e_ori, e_att, horizon=50, thresholds=THRESHOLDS):
    """Vectorised per-episode metrics for ``(episodes, steps)`` traces."""
    e_pos, e_ori, e_att = (np.asarray(x, dtype=float) for x in (e_pos, e_ori, e_att))
    if e_pos.shape[-1] < horizon:
        raise IncompleteTrace(f"need {horizon} steps, got {e_pos.shape[-1]}")
    w = slice(horizon - WINDOW, horizon)
    return {
        "success": success_monitor(e_pos[..., :horizon], e_ori[..., :horizon], e_att[..., :horizon],
                                   *thresholds),
        "ape": e_pos[..., w].mean(-1), "aoe": e_ori[..., w].mean(-1), "abae": e_att[..., w].mean(-1),
    }


def aggregate(episodes):
    """ASR/APE/AOE/ABAE from EpisodeMetrics objects or a ``batch_metrics`` dict."""
    if isinstance(episodes, dict):
        m = episodes
    else:
        m = {"success": np.array([e.success for e in episodes]),
             "ape": np.array([e.ape for e in episodes]),
             "aoe": np.array([e.aoe for e in episodes]),
             "abae": np.array([e.abae for e in episodes])}
    if len(m["ape"]) == 0:
        raise ValueError("no episodes to aggregate")
    return {"ASR": float(np.mean(m["success"])), "APE": float(np.mean(m["ape"])),
            "AOE": float(np.mean(m["aoe"])), "ABAE": float(np.mean(m["abae"]))}


# ----------------------------------------------------------------- rollouts

class PolicyController:
    """Deterministic (mean-action) controller built from trained policies."""

    def __init__(self, policies):
        self.policies = policies

    def reset(self, env, rngs):
        pass

    def act(self, env):
        return {a: p.mean(env.obs[a]) for a, p in self.policies.items()}


class ZeroBaseController:
    """Wraps a controller and forces zero base torque (uncontrolled base)."""

    def __init__(self, inner):
        self.inner = inner

    def reset(self, env, rngs):
        self.inner.reset(env, rngs)

    def act(self, env):
        a = dict(self.inner.act(env))
        a["b"] = np.zeros_like(a["b"])
        return a


def rollout(env, controller, env_rngs, ctrl_rngs, steps=None, targets=None):
    env.reset(env_rngs, targets=targets)
    controller.reset(env, ctrl_rngs)
    for _ in range(steps or env.horizon):
        env.step(controller.act(env))
    return env.episode_trace()


@dataclass(frozen=True)
class EvalJob:
    model: object
    controller: object
    faults: FaultState
    rewards: RewardConfig
    seed: int
    first: int
    count: int
    thresholds: tuple = THRESHOLDS
    horizon: int = 50


def run_job(job: EvalJob):
    env = SpaceRobotEnv(job.model, job.rewards, job.faults, horizon=job.horizon)
    ids = range(job.first, job.first + job.count)
    tr = rollout(env, job.controller, [seeding.stream(job.seed, "eval", i) for i in ids],
                 [seeding.stream(job.seed, "eval-ctrl", i) for i in ids])
    m = batch_metrics(tr["e_pos"], tr["e_ori"], tr["e_att"], job.horizon, job.thresholds)
    m["tau_abs_max"] = np.max(np.abs(tr["tau"]), axis=(1, 2))
    m["failed"] = tr["failed"][:, -1]
    return m


def _map(jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(run_job, jobs))


def _concat(parts):
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def evaluate(model, controller, episodes=1000, seed=0, faults=FaultState(), rewards=RewardConfig(),
             thresholds=THRESHOLDS, batch=100, workers=1):
    """Evaluate a controller on ``episodes`` seeded episodes; returns
    ``(summary, per_episode)``."""
    jobs = [EvalJob(model, controller, faults, rewards, seed, s, min(batch, episodes - s), thresholds)
            for s in range(0, episodes, batch)]
    per = _concat(_map(jobs, workers))
    return aggregate(per), per


# ----------------------------------------------------------------- campaign

@dataclass
class CampaignResult:
    scenario: str
    value: float
    seeds: list
    per_seed: list = field(default_factory=list)   # one {metric: value} per seed

    def mean(self, metric):
        return float(np.mean([s[metric] for s in self.per_seed]))

    def std(self, metric):
        return float(np.std([s[metric] for s in self.per_seed]))


def run_scenario(model, controller, scenario, grid, seeds, episodes=200, rewards=RewardConfig(),
                 thresholds=THRESHOLDS, batch=100, workers=1):
    grid = [float(x) for x in grid]
    if not grid:
        raise ConfigError("grid", "empty grid")
    jobs, keys = [], []
    for v in grid:
        faults = scenario_faults(scenario, v)
        for s in seeds:
            for start in range(0, episodes, batch):
                jobs.append(EvalJob(model, controller, faults, rewards, int(s), start,
                                    min(batch, episodes - start), thresholds))
                keys.append((v, s))
    outs = _map(jobs, workers)
    results = []
    for v in grid:
        res = CampaignResult(scenario, v, [int(s) for s in seeds])
        for s in seeds:
            parts = [o for o, k in zip(outs, keys) if k == (v, s)]
            res.per_seed.append(aggregate(_concat(parts)))
        results.append(res)
    return results


CAMPAIGN_COLUMNS = (["scenario", "value", "seeds"]
                    + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
                    + [f"{m}_per_seed" for m in METRICS])


def write_campaign(path, results):
    """One row per grid point; per-seed values are ';'-joined exact reprs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CAMPAIGN_COLUMNS)
        for r in results:
            row = [r.scenario, repr(r.value), ";".join(str(s) for s in r.seeds)]
            row += [repr(f(m)) for m in METRICS for f in (r.mean, r.std)]
            row += [";".join(repr(s[m]) for s in r.per_seed) for m in METRICS]
            w.writerow(row)


def read_campaign(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            seeds = [int(s) for s in row["seeds"].split(";")] if row["seeds"] else []
            per = [dict() for _ in seeds]
            for m in METRICS:
                for d, v in zip(per, row[f"{m}_per_seed"].split(";")):
                    d[m] = float(v)
            out.append(CampaignResult(row["scenario"], float(row["value"]), seeds, per))
    return out


def plot_campaign(path, results, scenario):
    """Bar chart of APE/AOE/ABAE with the ASR curve on a twin axis."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    if results:
        x = np.arange(len(results))
        width = 0.25
        for i, m in enumerate(("APE", "AOE", "ABAE")):
            ax.bar(x + (i - 1) * width, [r.mean(m) for r in results], width,
                   yerr=[r.std(m) for r in results], label=m, capsize=2)
        ax.set_xticks(x, [f"{r.value:g}" for r in results])
        ax2 = ax.twinx()
        ax2.errorbar(x, [r.mean("ASR") for r in results], yerr=[r.std("ASR") for r in results],
                     color="k", marker="o", label="ASR")
        ax2.set_ylim(0, 1.05)
        ax2.set_ylabel("ASR")
        ax.legend(loc="upper left", fontsize=8)
    ax.set_xlabel(scenario)
    ax.set_ylabel("error (m / rad)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def plot_export(out_dir, campaigns, seeds, episodes, checkpoints=(), figures=True, extra=None):
    """Write ``<scenario>.csv`` (+ ``.png``) per scenario and ``manifest.json``.

    ``campaigns`` maps scenario name to its list of CampaignResult.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "scenarios": {name: [r.value for r in res] for name, res in campaigns.items()},
        "seeds": [int(s) for s in seeds],
        "episodes_per_point": int(episodes),
        "checkpoints": {os.path.basename(str(c)): file_sha256(c) for c in checkpoints},
        "columns": CAMPAIGN_COLUMNS,
    }
    if extra:
        manifest.update(extra)
    for name, res in campaigns.items():
        write_campaign(out / f"{name}.csv", res)
        if figures:
            plot_campaign(out / f"{name}.png", res, name)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# ------------------------------------------------------------- maintenance

def maintenance_replay(model, controller, path, seed=0, episode=0, steps=100, rewards=RewardConfig()):
    """Single extended episode (reach then hold) with the full trace written to ``path``."""
    env = SpaceRobotEnv(model, rewards, horizon=steps)
    tr = rollout(env, controller, [seeding.stream(seed, "eval", episode)],
                 [seeding.stream(seed, "eval-ctrl", episode)], steps=steps)
    write_trace(path, tr, episode_ids=[episode])
    return tr


def plot_trace(path, trace):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = np.arange(1, trace["e_pos"].shape[1] + 1) * 0.1
    fig, axes = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    axes[0].plot(t, trace["e_pos"][0], label="e_pos (m)")
    axes[0].plot(t, trace["e_ori"][0], label="e_ori (rad)")
    axes[0].plot(t, trace["e_att"][0], label="e_att (rad)")
    axes[0].legend(fontsize=8)
    for j in range(3):
        axes[1].plot(t, trace["tau"][0, :, j], label=f"tau{j + 1}")
    axes[1].set_xlabel("time (s)")
    axes[1].set_ylabel("base torque (N m)")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
