"""Dual-agent clipped-surrogate training with timestep-level expert switching.

Each epoch fills the per-agent buffers with intact episodes, then each agent
runs its update phase on its own buffer only, then both buffers are flushed
and the guidance counter advances.  While guidance is active a single
uniform draw per step decides, for both agents together, whether the
learned or the prior action pair executes; either way the stored
log-density is that of the executed action under the collecting policy.

The loop is written against a small task interface (``SpaceRobotTask`` here,
``orbitarm.toy.IntegratorTask`` for the plumbing check) so the same code
path trains both.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import eval as ev
from . import geometry as geo
from . import seeding
from .env import (FaultState, RewardConfig, SpaceRobotEnv, observe_manipulator, reward_manipulator,
                  success_monitor)
from .errors import ConfigError
from .nn import HIDDEN, Adam, GaussianPolicy, ValueFunction, save_agent
from .priors import ExpertPolicy


@dataclass(frozen=True)
class TrainConfig:
    buffer_size: int = 80_000        # C, transitions per agent buffer
    minibatch: int = 8_000           # N
    total_episodes: int = 240_000    # M
    horizon: int = 50                # T
    gamma: float = 0.96
    lam: float = 0.95
    clip_eps: float = 0.1
    update_steps: int = 90           # K
    her_epochs: int = 70
    guidance_epochs: int = 15        # k_g
    lr_actor: float = 2e-4
    lr_critic: float = 1e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    use_tesg: bool = True
    use_her: bool = True
    eval_every: int = 5
    eval_episodes: int = 200
    checkpoint_every: int = 10
    batch_envs: int = 100
    prior_budget: int = 3000
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or f.name in ("seed", "entropy_coef"):
                continue
            if f.name in ("her_epochs", "guidance_epochs") and v >= 0:
                continue
            if not v > 0:
                raise ConfigError(f.name, "must be positive")
        if self.minibatch > self.buffer_size:
            raise ConfigError("minibatch", "must not exceed buffer_size")
        if not (0 < self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ConfigError("gamma", "gamma in (0, 1] and lam in [0, 1] required")

    @property
    def episodes_per_epoch(self):
        return math.ceil(self.buffer_size / self.horizon)

    @property
    def epochs(self):
        return self.total_episodes // self.episodes_per_epoch

    def as_dict(self):
        return asdict(self)


# --------------------------------------------------------------- guidance

@dataclass
class GuidanceSchedule:
    k_g: int = 15
    p0: float = 0.3
    span: float = 0.5
    k: int = 0

    def p(self, k=None):
        k = self.k if k is None else k
        if k > self.k_g:
            return 1.0
        return self.p0 + self.span * k / self.k_g if self.k_g > 0 else self.p0

    @property
    def active(self):
        return self.p() < 1.0


def tesg_select(p, rng, drl, prior):
    """One uniform per episode decides the source of the whole action pair.

    Returns ``(actions, from_policy)``; ``from_policy`` is True where the
    learned pair executes.
    """
    n = len(next(iter(drl.values())))
    from_policy = rng.random(n) < p
    acts = {a: np.where(from_policy[:, None], drl[a], prior[a]) for a in drl}
    return acts, from_policy


# ------------------------------------------------------------------ tasks

class SpaceRobotTask:
    """The dual-agent reaching / stabilisation task."""

    agents = ("m", "b")
    her_agents = ("m",)

    def __init__(self, model, rewards=RewardConfig(), horizon=50, prior_budget=3000):
        self.model = model
        self.rewards = rewards
        self.horizon = horizon
        self.prior_budget = prior_budget
        self.obs_dim = {"m": 41, "b": 15}
        self.act_dim = {"m": 6, "b": 3}
        self.bound = {"m": model.qdot_limits.copy(), "b": np.full(3, model.torque_limit)}
        self.hidden = dict(HIDDEN)

    def make_env(self):
        return SpaceRobotEnv(self.model, self.rewards, FaultState(), horizon=self.horizon)

    def make_prior(self):
        return ExpertPolicy(self.model, budget=self.prior_budget)

    def outcome(self, env):
        tr = env.episode_trace()
        m = ev.batch_metrics(tr["e_pos"], tr["e_ori"], tr["e_att"], self.horizon)
        m["her_success"] = success_monitor(tr["e_pos"], tr["e_ori"], np.zeros_like(tr["e_att"]))
        m["valid"] = ~tr["failed"][:, -1]
        return m

    def replay_manipulator(self, env, idx, target_pos, target_R):
        """Recompute manipulator observations and rewards of episodes ``idx``
        against a different (fixed) target; returns ``(obs, rewards)``."""
        tr = env.episode_trace()
        ini = env.initial
        ee_p = np.concatenate([ini["ee_pos"][idx, None], tr["ee_pos"][idx]], axis=1)
        ee_R = np.concatenate([ini["ee_rot"][idx, None], tr["ee_rot"][idx]], axis=1)
        q = np.concatenate([ini["q"][idx, None], tr["q"][idx]], axis=1)
        qd = np.concatenate([ini["qdot"][idx, None], tr["qdot"][idx]], axis=1)
        tp = np.broadcast_to(target_pos[:, None], ee_p.shape)
        tR = np.broadcast_to(target_R[:, None], ee_R.shape)
        obs = observe_manipulator(geo.Pose(ee_R, ee_p), geo.Pose(tR, tp), q, qd)
        e_pos = np.linalg.norm(ee_p - tp, axis=-1)
        e_ori = geo.geodesic_angle(ee_R, tR)
        r, _ = reward_manipulator(e_pos[:, 1:], e_ori[:, 1:], e_ori[:, :-1], qd[:, 1:], qd[:, :-1],
                                  self.rewards)
        return obs, r

    def relabel(self, env, idx):
        tr = env.episode_trace()
        return self.replay_manipulator(env, idx, tr["ee_pos"][idx, -1], tr["ee_rot"][idx, -1])

    def evaluate(self, policies, episodes, seed, thresholds=ev.THRESHOLDS):
        summary, _ = ev.evaluate(self.model, ev.PolicyController(policies), episodes, seed,
                                 rewards=self.rewards, thresholds=thresholds)
        return summary


# ------------------------------------------------------------ collection

@dataclass
class EpisodeBatch:
    """Intact episodes of one agent: obs has ``T + 1`` entries per episode."""

    obs: np.ndarray        # (E, T+1, d)
    act: np.ndarray        # (E, T, a)
    logp: np.ndarray       # (E, T)
    rew: np.ndarray        # (E, T)
    from_policy: np.ndarray  # (E, T) bool
    relabeled: bool = False

    @property
    def transitions(self):
        return self.rew.size


class AgentBuffer:
    def __init__(self, agent):
        self.agent = agent
        self.batches = []
        self.reads = 0

    def add(self, batch: EpisodeBatch):
        self.batches.append(batch)

    def __len__(self):
        return sum(b.transitions for b in self.batches)

    def data(self):
        self.reads += 1
        cat = lambda k: np.concatenate([getattr(b, k) for b in self.batches])  # noqa: E731
        return {k: cat(k) for k in ("obs", "act", "logp", "rew", "from_policy")}

    def flush(self):
        self.batches = []


@dataclass(frozen=True)
class CollectJob:
    task: object
    policies: dict
    p: float
    seed: int
    epoch: int
    batch_index: int
    first_episode: int
    count: int
    her: bool


def collect_batch(job: CollectJob):
    """Run ``job.count`` episodes in one batched env; pure function of the job."""
    task, pols = job.task, job.policies
    env = task.make_env()
    ids = range(job.first_episode, job.first_episode + job.count)
    obs = env.reset([seeding.stream(job.seed, "env", job.epoch, i) for i in ids])
    guided = job.p < 1.0
    prior = None
    if guided:
        prior = task.make_prior()
        prior.reset(env, [seeding.stream(job.seed, "prior", job.epoch, i) for i in ids])
    act_rng = seeding.stream(job.seed, "act", job.epoch, job.batch_index)
    tesg_rng = seeding.stream(job.seed, "tesg", job.epoch, job.batch_index)
    n, T = job.count, task.horizon
    store = {a: {"obs": np.zeros((n, T + 1, task.obs_dim[a])), "act": np.zeros((n, T, task.act_dim[a])),
                 "logp": np.zeros((n, T)), "rew": np.zeros((n, T)),
                 "from_policy": np.ones((n, T), dtype=bool)} for a in task.agents}
    prior_calls = 0
    for t in range(T):
        drl = {}
        for a in task.agents:
            store[a]["obs"][:, t] = obs[a]
            drl[a], _ = pols[a].sample(obs[a], act_rng)
        if guided:
            pri = prior.act(env)
            prior_calls += 1
            acts, from_policy = tesg_select(job.p, tesg_rng, drl, pri)
        else:
            acts, from_policy = drl, np.ones(n, dtype=bool)
        for a in task.agents:
            store[a]["act"][:, t] = acts[a]
            store[a]["logp"][:, t] = pols[a].log_prob(obs[a], acts[a])
            store[a]["from_policy"][:, t] = from_policy
        out = env.step(acts)
        for a in task.agents:
            store[a]["rew"][:, t] = out.rewards[a]
        obs = out.obs
    for a in task.agents:
        store[a]["obs"][:, T] = obs[a]

    res = task.outcome(env)
    valid = res["valid"]
    batches = {a: EpisodeBatch(**{k: v[valid] for k, v in store[a].items()}) for a in task.agents}
    extra = {}
    n_her = 0
    if job.her:
        idx = np.flatnonzero(valid & ~res["her_success"])
        if len(idx):
            for a in task.her_agents:
                o, r = task.relabel(env, idx)
                act = store[a]["act"][idx]
                extra[a] = EpisodeBatch(o, act, pols[a].log_prob(o[:, :T], act), r,
                                        store[a]["from_policy"][idx], relabeled=True)
            n_her = len(idx)
    return {"batches": batches, "her": extra, "episodes": int(valid.sum()), "dropped": int((~valid).sum()),
            "her_count": n_her, "prior_calls": prior_calls, "success": res["success"][valid]}


def _pool_map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def collect_epoch(task, policies, schedule, cfg: TrainConfig, epoch, buffers, her=True):
    """Fill ``buffers`` with ``ceil(C / T)`` valid episodes (plus relabelled
    copies for the HER agents).  Returns collection statistics."""
    p = schedule.p() if cfg.use_tesg else 1.0
    need = cfg.episodes_per_epoch
    stats = {"episodes": 0, "dropped": 0, "her": 0, "prior_calls": 0, "train_success": []}
    next_ep, bidx = 0, 0
    while stats["episodes"] < need:
        jobs = []
        remaining = need - stats["episodes"]
        while remaining > 0:
            c = min(cfg.batch_envs, remaining)
            jobs.append(CollectJob(task, policies, p, cfg.seed, epoch, bidx, next_ep, c, her))
            next_ep += c
            bidx += 1
            remaining -= c
        for out in _pool_map(collect_batch, jobs, cfg.workers):
            for a, b in out["batches"].items():
                buffers[a].add(b)
            for a, b in out["her"].items():
                buffers[a].add(b)
            stats["episodes"] += out["episodes"]
            stats["dropped"] += out["dropped"]
            stats["her"] += out["her_count"]
            stats["prior_calls"] += out["prior_calls"]
            stats["train_success"].append(out["success"])
    stats["train_success"] = float(np.mean(np.concatenate(stats["train_success"])))
    return stats


# ----------------------------------------------------------------- update

def compute_gae(rewards, values, gamma, lam):
    """``values`` carries one more entry than ``rewards`` (the bootstrap)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = rewards.shape[-1]
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[:-1])
    for t in reversed(range(T)):
        delta = rewards[..., t] + gamma * values[..., t + 1] - values[..., t]
        last = delta + gamma * lam * last
        adv[..., t] = last
    return adv, adv + values[..., :T]


def ppo_update(policy: GaussianPolicy, critic: ValueFunction, opt_pi: Adam, opt_v: Adam, data,
               cfg: TrainConfig, rng):
    """K minibatch iterations of the clipped surrogate and value regression."""
    obs = data["obs"]
    E, T1, d = obs.shape
    T = T1 - 1
    values = critic.value(obs.reshape(-1, d)).reshape(E, T1)
    adv, ret = compute_gae(data["rew"], values, cfg.gamma, cfg.lam)
    o = obs[:, :T].reshape(-1, d)
    a = data["act"].reshape(E * T, -1)
    lp = data["logp"].reshape(-1)
    adv = adv.reshape(-1)
    ret = ret.reshape(-1)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(adv)
    nb = min(cfg.minibatch, n)
    diag = {"actor_loss": [], "critic_loss": [], "ratio": [], "clip_frac": []}
    for _ in range(cfg.update_steps):
        idx = rng.choice(n, size=nb, replace=False)
        loss, g, dd = policy.surrogate(o[idx], a[idx], lp[idx], adv[idx], cfg.clip_eps, cfg.entropy_coef)
        opt_pi.step(g)
        vloss, gv = critic.loss_grad(o[idx], ret[idx], cfg.value_coef)
        opt_v.step(gv)
        diag["actor_loss"].append(loss)
        diag["critic_loss"].append(vloss)
        diag["ratio"].append(dd["ratio"])
        diag["clip_frac"].append(dd["clip_frac"])
    return {k: float(np.mean(v)) for k, v in diag.items()}


# ------------------------------------------------------------------ train

METRIC_COLUMNS = ["epoch", "k", "p", "episodes", "dropped", "her", "prior_calls", "train_success",
                  "ASR", "APE", "AOE", "ABAE"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    policies: dict
    critics: dict
    rows: list
    schedule: GuidanceSchedule
    buffers: dict


def init_agents(task, seed):
    pols, crits = {}, {}
    for a in task.agents:
        rng = seeding.stream(seed, "init", task.agents.index(a))
        pols[a] = GaussianPolicy(task.obs_dim[a], task.act_dim[a], task.hidden[a], task.bound[a], rng)
        crits[a] = ValueFunction(task.obs_dim[a], task.hidden[a], rng)
    return pols, crits


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train(task, cfg: TrainConfig, out_dir=None, epochs=None, log=None, eval_thresholds=ev.THRESHOLDS):
    """Run the collect / update / flush loop; returns a TrainResult.

    With ``out_dir`` set, writes ``metrics.csv`` and checkpoints under
    ``checkpoints/``.  ``log`` is an optional callable taking one line.
    """
    epochs = cfg.epochs if epochs is None else epochs
    pols, crits = init_agents(task, cfg.seed)
    opts = {a: (Adam(pols[a].params, cfg.lr_actor), Adam(crits[a].params, cfg.lr_critic)) for a in task.agents}
    schedule = GuidanceSchedule(k_g=cfg.guidance_epochs)
    buffers = {a: AgentBuffer(a) for a in task.agents}
    cols = METRIC_COLUMNS + [f"{a}_{k}" for a in task.agents
                             for k in ("actor_loss", "critic_loss", "ratio", "clip_frac")]
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    bad = 0
    # worker count is excluded: it never affects results
    hyper = {k: v for k, v in cfg.as_dict().items()
             if isinstance(v, (int, float)) and not isinstance(v, bool) and k != "workers"}

    def checkpoint(epoch):
        if out is None:
            return
        for a in task.agents:
            save_agent(out / "checkpoints" / f"epoch{epoch:04d}_{a}.ckpt", a, pols[a], crits[a], hyper)

    for epoch in range(1, epochs + 1):
        p = schedule.p() if cfg.use_tesg else 1.0
        her = cfg.use_her and epoch <= cfg.her_epochs
        stats = collect_epoch(task, pols, schedule, cfg, epoch, buffers, her=her)
        row = {"epoch": epoch, "k": schedule.k, "p": p, "episodes": stats["episodes"],
               "dropped": stats["dropped"], "her": stats["her"], "prior_calls": stats["prior_calls"],
               "train_success": stats["train_success"]}
        finite = True
        for a in task.agents:
            rng = seeding.stream(cfg.seed, "update", epoch, task.agents.index(a))
            d = ppo_update(pols[a], crits[a], *opts[a], buffers[a].data(), cfg, rng)
            finite &= all(np.isfinite(v) for v in d.values())
            row.update({f"{a}_{k}": v for k, v in d.items()})
        for b in buffers.values():
            b.flush()
        schedule.k += 1
        bad = 0 if finite else bad + 1
        if bad > 3:
            raise TrainingDiverged(f"non-finite losses for {bad} consecutive epochs (epoch {epoch})")
        if epoch % cfg.eval_every == 0 or epoch == epochs:
            row.update(task.evaluate(pols, cfg.eval_episodes, cfg.seed, eval_thresholds))
        rows.append(row)
        if out is not None:
            _write_rows(out / "metrics.csv", cols, rows)
        if epoch % cfg.checkpoint_every == 0 or epoch == epochs:
            checkpoint(epoch)
        if log is not None:
            log(" ".join(f"{k}={_fmt(row[k])}" for k in ("epoch", "p", "train_success", "ASR") if k in row))
    return TrainResult(pols, crits, rows, schedule, buffers)


def _write_rows(path, cols, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) if c in r else "" for c in cols])
    Path(path).write_text(buf.getvalue())
