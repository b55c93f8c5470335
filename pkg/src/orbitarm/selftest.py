"""Fast invariant suite behind ``orbitarm selftest``.

Each check returns a ``Check`` carrying its measured value and tolerance so
the report is self-explanatory.  Everything here finishes in a few seconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import dynamics as dyn
from . import env as env_mod
from .nn import MLP
from .trainer import GuidanceSchedule, compute_gae


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    detail: str = ""

    @property
    def ok(self):
        return bool(np.isfinite(self.value) and self.value <= self.tolerance)

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        return f"{status}  {self.name:<24} value={self.value:.3e}  tol={self.tolerance:.0e}  {self.detail}"


def check_conservation(model, trials=8, steps=20, seed=0):
    """Free-float drift of angular momentum and of the system centre of mass."""
    rng = np.random.default_rng(seed)
    s = dyn.rest_state(model, batch=trials)
    s = replace(s, q=model.home_q + rng.uniform(-0.5, 0.5, (trials, 6)),
                base_omega=rng.normal(0, 0.01, (trials, 3)))
    H0 = dyn.angular_momentum_direct(model, s)
    c0 = dyn.forward_kinematics(model, s).com
    for _ in range(steps):
        cmd = dyn.CommandInput(rng.uniform(-2, 2, (trials, 6)), np.zeros((trials, 3)))
        s = dyn.step(model, s, cmd, dt=0.1, substeps=100)
    dh = float(np.max(np.abs(dyn.angular_momentum_direct(model, s) - H0)))
    dc = float(np.max(np.abs(dyn.forward_kinematics(model, s).com - c0)))
    return [Check("angular momentum drift", dh, 1e-8, "N m s"),
            Check("centre of mass drift", dc, 1e-10, "m (zero linear momentum)")]


def check_gradients(seed=5, h=1e-6):
    """Every parameter of an 8/8 probe net against central differences."""
    rng = np.random.default_rng(seed)
    net = MLP((5, 8, 8, 3), rng)
    for p in net.params.values():
        p += rng.normal(0, 0.2, p.shape)
    x, y = rng.normal(size=(7, 5)), rng.normal(size=(7, 3))
    w = np.arange(1, 4)

    def loss():
        return float(np.sum((net(x) - y) ** 2 * w))

    out, acts = net.forward(x, keep=True)
    grads, _ = net.backward(acts, 2 * (out - y) * w)
    worst = 0.0
    for name, p in net.params.items():
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            lp = loss()
            p[i] = old - h
            lm = loss()
            p[i] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - grads[name][i]) / max(abs(fd), abs(grads[name][i]), 1e-8))
    return [Check("probe net gradient", worst, 1e-4, "max relative error")]


def check_rewards(cfg=None):
    """Hand-evaluated reward cases."""
    cfg = cfg or env_mod.RewardConfig()
    z = np.zeros(6)
    errs = []
    _, c = env_mod.reward_manipulator(0.1, 0.2, 0.2, z, z, cfg)
    errs.append(abs(c[0] - (-0.075)))
    _, c = env_mod.reward_manipulator(0.0, 0.0, 0.0, z, z, cfg)
    errs.append(abs(c[3] - 0.2))
    _, c = env_mod.reward_manipulator(0.0, 0.0, 0.0, np.array([3.0, -2.5, 1, 0, 0, 0]), z, cfg)
    errs.append(abs(c[1] - (-0.15)))
    _, c = env_mod.reward_manipulator(0.1, 0.1, 0.2, z, z, cfg)
    errs.append(abs(c[2] - 0.015))
    errs.append(abs(env_mod.l1_reduction(np.array([0.1, -0.2, 0.05]), np.array([0.05, -0.1, 0.05])) - 0.15))
    r, _ = env_mod.reward_base(0.0, 0.0, np.zeros(3), np.zeros(3), cfg)
    errs.append(abs(r - 0.2))
    return [Check("reward oracles", float(max(errs)), 1e-12, f"{len(errs)} hand cases")]


def check_schedule():
    s = GuidanceSchedule()
    expect = [0.3 + 0.5 * k / 15 for k in range(16)] + [1.0] * 5
    table = [s.p(k) for k in range(21)]
    err = max(abs(a - b) for a, b in zip(table, expect))
    if table[15] != 0.8 or table[16] != 1.0:
        err = max(err, 1.0)
    return [Check("guidance schedule", err, 0.0, "p(0..20), p(15)=0.8, p(16)=1")]


def check_gae(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        T = int(rng.integers(1, 60))
        r, v = rng.normal(size=T), rng.normal(size=T + 1)
        adv, _ = compute_gae(r, v, 0.96, 0.95)
        for t in range(T):
            ref = sum((0.96 * 0.95) ** l * (r[t + l] + 0.96 * v[t + l + 1] - v[t + l]) for l in range(T - t))
            worst = max(worst, abs(adv[t] - ref))
    return [Check("GAE recursion", worst, 1e-12, "20 random sequences")]


def run_selftest(model=None, log=print):
    """Run every check; returns ``(all_ok, checks)``."""
    model = model or dyn.load_model()
    t0 = time.perf_counter()
    checks = []
    for fn in (lambda: check_conservation(model), check_gradients, check_rewards, check_schedule, check_gae):
        try:
            out = fn()
        except Exception as exc:   # a crashing check is a failed check
            out = [Check(getattr(fn, "__name__", "check"), float("inf"), 0.0, f"raised {exc!r}")]
        for c in out:
            checks.append(c)
            if log:
                log(c.line())
    ok = all(c.ok for c in checks)
    if log:
        log(f"{'all checks passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f} s")
    return ok, checks
