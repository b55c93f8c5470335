"""One-dimensional velocity-integrator reaching task.

A point at ``x`` is driven by a velocity command in ``[-1, 1]`` toward a
goal ``g``; both are drawn uniformly in ``[-1, 1]``.  It exercises the
trainer end to end (collection, GAE, clipped updates, Adam, buffers) in a
few minutes, with the same success rule as the arm task: the error stays
within tolerance for ten consecutive steps.
"""

from __future__ import annotations

import numpy as np

from .env import StepOutput, success_monitor

TOL = 0.05


class IntegratorEnv:
    def __init__(self, horizon=30, dt=0.1):
        self.horizon = horizon
        self.dt = dt

    def reset(self, rngs, targets=None):
        draws = np.array([r.uniform(-1.0, 1.0, 2) for r in rngs])
        self.n = len(rngs)
        self.x = draws[:, 0]
        self.g = draws[:, 1] if targets is None else np.broadcast_to(targets, (self.n,)).astype(float)
        self.t = 0
        self.err = [np.abs(self.g - self.x)]
        self.obs = self._observe()
        return self.obs

    def _observe(self):
        return {"x": np.stack([self.x, self.g, self.g - self.x], axis=-1)}

    def step(self, actions):
        v = np.clip(np.asarray(actions["x"], dtype=float)[:, 0], -1.0, 1.0)
        self.x = self.x + v * self.dt
        self.t += 1
        e = np.abs(self.g - self.x)
        r = -0.5 * e + 0.1 * np.maximum((TOL - e) / TOL, 0.0)
        self.err.append(e)
        self.obs = self._observe()
        return StepOutput(self.obs, {"x": r}, {}, {"failed": np.zeros(self.n, dtype=bool)},
                          done=self.t >= self.horizon)

    def errors(self):
        return np.stack(self.err[1:], axis=1)


class IntegratorTask:
    agents = ("x",)
    her_agents = ()

    def __init__(self, horizon=30, hidden=(32, 32)):
        self.horizon = horizon
        self.obs_dim = {"x": 3}
        self.act_dim = {"x": 1}
        self.bound = {"x": np.ones(1)}
        self.hidden = {"x": tuple(hidden)}

    def make_env(self):
        return IntegratorEnv(self.horizon)

    def make_prior(self):
        raise RuntimeError("the toy task has no prior; train it with use_tesg=False")

    def outcome(self, env):
        e = env.errors()
        ok = success_monitor(e, np.zeros_like(e), np.zeros_like(e), TOL, 1.0, 1.0)
        return {"success": ok, "her_success": ok, "valid": np.ones(env.n, dtype=bool)}

    def evaluate(self, policies, episodes, seed, thresholds=None):
        from . import seeding
        env = self.make_env()
        obs = env.reset([seeding.stream(seed, "eval", i) for i in range(episodes)])
        for _ in range(self.horizon):
            obs = env.step({"x": policies["x"].mean(obs["x"])}).obs
        res = self.outcome(env)
        e = env.errors()
        return {"ASR": float(np.mean(res["success"])), "APE": float(np.mean(e[:, -10:])),
                "AOE": 0.0, "ABAE": 0.0}
