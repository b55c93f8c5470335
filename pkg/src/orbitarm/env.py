"""Dual-agent reaching / stabilisation environment.

One agent commands the six joint rates, the other the three base torques.
The environment is batched: ``reset`` takes one random generator per
episode and every array carries a leading episode dimension.  Episodes are
independent; the batch only amortises numpy overhead.

Observation layouts
-------------------
manipulator (41): ``[cpr_ee(9), cpr_target(9), cpr_err(9), e_pos, e_ori, q(6), qdot(6)]``
base (15):        ``[rot6d(R0^T R_b)(6), q[:3], qdot[:3], tau_prev(3)]``

Poses are expressed in the inertial frame, which coincides with the base
frame at the start of the episode.  ``cpr_err`` encodes ``T_ee^-1 T_target``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import dynamics as dyn
from . import geometry as geo

HORIZON = 50
DT = 0.1
OBS_DIM = {"m": 41, "b": 15}
ACT_DIM = {"m": 6, "b": 3}
SUCCESS_WINDOW = 10


@dataclass(frozen=True)
class RewardConfig:
    k_pos: float = 0.5
    k_ori: float = 0.125
    k_smth: float = 0.1
    delta_qdot: float = 2.0
    k_aln: float = 0.15
    k_done_m: float = 0.1
    eps_pos: float = 0.05
    eps_ori: float = 0.1
    k_att: float = 2.5
    k_var: float = 2.5
    k_done_b: float = 0.2
    eps_att: float = 0.05
    # False: |delta e_ori| inside the max, exactly as printed; True: drop the abs
    aln_signed: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                continue
            if v < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if min(self.eps_pos, self.eps_ori, self.eps_att) <= 0:
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class FaultState:
    """Scenario parameters for disturbance and fault injection; defaults are nominal."""

    obs_delay_prob: float = 0.0
    act_delay_prob: float = 0.0
    eff_base: float = 1.0
    eff_manip: float = 1.0
    wheel_saturation: float = 0.0    # initial |h_i| / capacity
    wheel_capacity: float = 3.0      # N*m*s per axis
    obs_bias_pos: float = 0.0        # m, initial target position bias
    obs_bias_ori: float = 0.0        # rad, initial target orientation bias
    bias_decay_steps: int = 30
    impulse_magnitude: float = 0.0   # N*m, one control step
    impulse_window: tuple = (5, 25)
    base_mass_scale: float = 1.0
    spin_rate: float = 0.0           # rad/s, target tumbling rate

    def __post_init__(self):
        for name in ("obs_delay_prob", "act_delay_prob", "eff_base", "eff_manip", "wheel_saturation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.base_mass_scale <= 0 or self.spin_rate < 0 or self.impulse_magnitude < 0:
            raise ValueError("mass scale must be positive; spin rate and impulse non-negative")

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TargetSpec:
    position: np.ndarray       # (..., 3)
    orientation: np.ndarray    # (..., 4) unit quaternion
    spin_rate: float = 0.0
    spin_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    @property
    def rotation(self):
        return geo.quat_to_matrix(self.orientation)

    def pose(self):
        return geo.Pose(self.rotation, np.asarray(self.position, dtype=float))


def sample_target(rng, model: dyn.SystemModel, r_in=0.25, r_out=0.65) -> TargetSpec:
    """Uniform over the hollow hemisphere on the outward (+z) side of the mount.

    Orientation is Haar-uniform.  Consumes a fixed number of draws.
    """
    d = rng.standard_normal(3)
    d[2] = abs(d[2])
    d = d / np.linalg.norm(d)
    r = np.cbrt(rng.uniform(r_in ** 3, r_out ** 3))
    q = geo.quat_normalize(rng.standard_normal(4))
    return TargetSpec(model.mount.apply(r * d), q)


# ------------------------------------------------------------------ rewards

def reward_manipulator(e_pos, e_ori, e_ori_prev, qdot, qdot_prev, cfg: RewardConfig):
    """Return ``(r_m, components)``; components are the signed terms
    ``[-p_pose, -p_smth, r_aln, r_done]`` and sum to ``r_m``."""
    e_pos = np.asarray(e_pos, dtype=float)
    e_ori = np.asarray(e_ori, dtype=float)
    p_pose = cfg.k_pos * e_pos + cfg.k_ori * e_ori
    jerk = np.abs(np.asarray(qdot) - np.asarray(qdot_prev)) - cfg.delta_qdot
    p_smth = cfg.k_smth * np.sum(np.maximum(jerk, 0.0), axis=-1)
    delta = np.asarray(e_ori_prev) - e_ori
    r_aln = cfg.k_aln * np.maximum(delta if cfg.aln_signed else np.abs(delta), 0.0)
    r_done = cfg.k_done_m * (np.maximum((cfg.eps_pos - e_pos) / cfg.eps_pos, 0.0)
                             + np.maximum((cfg.eps_ori - e_ori) / cfg.eps_ori, 0.0))
    comps = np.stack(np.broadcast_arrays(-p_pose, -p_smth, r_aln, r_done), axis=-1)
    return comps.sum(axis=-1), comps


def l1_reduction(euler_prev, euler):
    """Drop in the L1 norm of the Euler angle vector between two steps."""
    return np.sum(np.abs(euler_prev), axis=-1) - np.sum(np.abs(euler), axis=-1)


def reward_base(e_att, e_att_prev, euler, euler_prev, cfg: RewardConfig):
    """Return ``(r_b, components)`` with components ``[-p_att, r_var, r_done]``."""
    e_att = np.asarray(e_att, dtype=float)
    p_att = cfg.k_att * e_att
    r_var = cfg.k_var * ((np.asarray(e_att_prev) - e_att) + l1_reduction(euler_prev, euler))
    r_done = cfg.k_done_b * np.maximum((cfg.eps_att - e_att) / cfg.eps_att, 0.0)
    comps = np.stack(np.broadcast_arrays(-p_att, r_var, r_done), axis=-1)
    return comps.sum(axis=-1), comps


def success_monitor(e_pos, e_ori, e_att, eps_pos=0.05, eps_ori=0.1, eps_att=0.05,
                    window=SUCCESS_WINDOW):
    """True where all three errors sit at or below threshold for ``window``
    consecutive steps.  Inputs are ``(..., T)`` traces."""
    ok = ((np.asarray(e_pos) <= eps_pos) & (np.asarray(e_ori) <= eps_ori)
          & (np.asarray(e_att) <= eps_att))
    run = np.zeros(ok.shape[:-1], dtype=int)
    best = np.zeros(ok.shape[:-1], dtype=int)
    for t in range(ok.shape[-1]):
        run = np.where(ok[..., t], run + 1, 0)
        best = np.maximum(best, run)
    return best >= window


# ------------------------------------------------------------- observations

def observe_manipulator(ee: geo.Pose, target: geo.Pose, q, qdot):
    err = ee.inverse() @ target
    e_pos = np.linalg.norm(ee.translation - target.translation, axis=-1)
    e_ori = geo.geodesic_angle(ee.rotation, target.rotation)
    return np.concatenate([
        geo.encode_cpr(ee), geo.encode_cpr(target), geo.encode_cpr(err),
        e_pos[..., None], e_ori[..., None], q, qdot,
    ], axis=-1)


def observe_base(R_rel, q, qdot, tau_prev):
    return np.concatenate([geo.rot6d_encode(R_rel), q[..., :3], qdot[..., :3], tau_prev], axis=-1)


def bias_decay(t, steps=30):
    return max(0.0, 1.0 - t / steps)


# ---------------------------------------------------------------- the MDP

@dataclass
class StepOutput:
    obs: dict
    rewards: dict
    components: dict
    info: dict
    done: bool


TRACE_COLUMNS = (
    ["episode", "t"]
    + [f"q{j}" for j in range(1, 7)] + [f"qd{j}" for j in range(1, 7)]
    + [f"a_m{j}" for j in range(1, 7)] + [f"a_b{j}" for j in range(1, 4)]
    + [f"tau{j}" for j in range(1, 4)]
    + ["e_pos", "e_ori", "e_att", "r_m", "r_b",
       "obs_delayed", "act_delayed", "wheel_saturated", "impulse"]
)


class SpaceRobotEnv:
    """Batched dual-agent MDP over the free-floating dynamics."""

    def __init__(self, model: dyn.SystemModel, rewards: RewardConfig = RewardConfig(),
                 faults: FaultState = FaultState(), horizon=HORIZON, dt=DT, substeps=10):
        self.model = model
        self.sim_model = model.with_base_mass_scale(faults.base_mass_scale)
        self.rewards = rewards
        self.faults = faults
        self.horizon = horizon
        self.dt = dt
        self.substeps = substeps

    # -- episode bookkeeping ------------------------------------------------
    def reset(self, rngs, targets=None, q0=None):
        f = self.faults
        self.rngs = list(rngs)
        n = len(self.rngs)
        self.n = n
        sampled = [sample_target(r, self.model) for r in self.rngs]
        # fault draws always happen so the streams line up across scenarios
        spin_axis = np.stack([geo.normalize(r.standard_normal(3)) for r in self.rngs])
        bias_dir = np.stack([geo.normalize(r.standard_normal(3)) for r in self.rngs])
        bias_axis = np.stack([geo.normalize(r.standard_normal(3)) for r in self.rngs])
        lo, hi = f.impulse_window
        self.impulse_step = np.array([r.integers(lo, hi + 1) for r in self.rngs])
        impulse_dir = np.stack([geo.normalize(r.standard_normal(3)) for r in self.rngs])
        wheel_sign = np.stack([np.where(r.random(3) < 0.5, -1.0, 1.0) for r in self.rngs])

        if targets is None:
            targets = TargetSpec(np.stack([s.position for s in sampled]),
                                 np.stack([s.orientation for s in sampled]))
        self.target_pos = np.array(np.broadcast_to(targets.position, (n, 3)), dtype=float)
        self.target_R = np.array(np.broadcast_to(targets.rotation, (n, 3, 3)), dtype=float)
        self.spin_rate = float(f.spin_rate)
        self.spin_axis = spin_axis
        self.bias_pos = f.obs_bias_pos * bias_dir
        self.bias_axis = bias_axis
        self.impulse = f.impulse_magnitude * impulse_dir
        self.wheel_h = f.wheel_saturation * f.wheel_capacity * wheel_sign

        self.state = dyn.rest_state(self.model, q=q0, batch=n)
        self.R0 = self.state.rotation
        self.failed = np.zeros(n, dtype=bool)
        self.tau_prev = np.zeros((n, 3))
        self.prev_actions = None
        err = self._errors(self.state)
        self._err = err
        self.obs = self._observe(self.state, 0)
        self.trace = {k: [] for k in ("q", "qdot", "a_m", "a_b", "tau", "e_pos", "e_ori", "e_att",
                                      "r_m", "r_b", "obs_delayed", "act_delayed", "wheel_saturated",
                                      "impulse", "ee_pos", "ee_rot", "failed")}
        self.initial = {"q": self.state.q.copy(), "qdot": self.state.qdot.copy(),
                        "e_ori": err["e_ori"].copy(), "ee_pos": err["ee"].translation.copy(),
                        "ee_rot": err["ee"].rotation.copy()}
        return self.obs

    @property
    def t(self):
        return self.state.t

    def target_pose(self):
        return geo.Pose(self.target_R, self.target_pos)

    def observed_target(self, t):
        k = bias_decay(t, self.faults.bias_decay_steps)
        pos, R = self.target_pos, self.target_R
        if self.faults.obs_bias_pos and k > 0:
            pos = pos + k * self.bias_pos
        if self.faults.obs_bias_ori and k > 0:
            R = geo.axis_angle_matrix(self.bias_axis, k * self.faults.obs_bias_ori) @ R
        return geo.Pose(R, pos)

    def base_euler(self, state=None):
        state = self.state if state is None else state
        return geo.euler_zyx(np.swapaxes(self.R0, -1, -2) @ state.rotation, check=False)

    def _errors(self, state):
        ee = dyn.ee_pose(self.sim_model, state)
        R_rel = np.swapaxes(self.R0, -1, -2) @ state.rotation
        euler = geo.euler_zyx(R_rel, check=False)
        return {
            "ee": ee,
            "e_pos": np.linalg.norm(ee.translation - self.target_pos, axis=-1),
            "e_ori": geo.geodesic_angle(ee.rotation, self.target_R),
            "e_att": geo.geodesic_angle(self.R0, state.rotation),
            "euler": euler,
            "R_rel": R_rel,
            "gimbal": np.abs(euler[..., 1]) >= np.pi / 2 - geo.GIMBAL_MARGIN,
        }

    def _observe(self, state, t, ee=None, R_rel=None):
        if ee is None:
            ee = dyn.ee_pose(self.sim_model, state)
        if R_rel is None:
            R_rel = np.swapaxes(self.R0, -1, -2) @ state.rotation
        return {
            "m": observe_manipulator(ee, self.observed_target(t), state.q, state.qdot),
            "b": observe_base(R_rel, state.q, state.qdot, self.tau_prev),
        }

    # -- transition ---------------------------------------------------------
    def step(self, actions) -> StepOutput:
        f = self.faults
        model = self.model
        t = self.state.t
        qdot_prev = self.state.qdot
        u = np.stack([r.random(2) for r in self.rngs])   # (act, obs) delay draws
        a_m = np.asarray(actions["m"], dtype=float)
        a_b = np.asarray(actions["b"], dtype=float)

        act_delayed = np.zeros(self.n, dtype=bool)
        if f.act_delay_prob > 0 and t >= 1 and self.prev_actions is not None:
            act_delayed = u[:, 0] < f.act_delay_prob
            a_m = np.where(act_delayed[:, None], self.prev_actions[0], a_m)
            a_b = np.where(act_delayed[:, None], self.prev_actions[1], a_b)
        self.prev_actions = (a_m, a_b)

        qdot_cmd = np.clip(a_m, -model.qdot_limits, model.qdot_limits)
        tau_req = np.clip(a_b, -model.torque_limit, model.torque_limit)
        if f.eff_manip != 1.0:
            qdot_cmd = f.eff_manip * qdot_cmd
        if f.eff_base != 1.0:
            tau_req = f.eff_base * tau_req

        # reaction wheel: a saturated axis, or one this step would saturate, delivers nothing
        h_next = self.wheel_h + tau_req * self.dt
        saturated = (np.abs(self.wheel_h) >= f.wheel_capacity) | (np.abs(h_next) > f.wheel_capacity)
        tau_applied = np.where(saturated, 0.0, tau_req)
        self.wheel_h = self.wheel_h + tau_applied * self.dt

        impulse_on = self.impulse_step == t
        tau_ext = np.zeros((self.n, 3))
        if f.impulse_magnitude > 0:
            tau_ext = np.where(impulse_on[:, None], self.impulse, 0.0)

        cmd = dyn.CommandInput(qdot_cmd, tau_applied, tau_ext)
        new = dyn.step(self.sim_model, self.state, cmd, self.dt, self.substeps, check_finite=False)
        finite = new.is_finite()
        if not np.all(finite):
            keep = ~finite
            new = dyn.SystemState(
                *(np.where(keep[:, None], getattr(self.state, k), getattr(new, k))
                  for k in ("base_attitude", "base_omega", "base_position", "q", "qdot")),
                t=new.t)
        self.state = new

        if self.spin_rate > 0:
            spin = geo.axis_angle_matrix(self.spin_axis, np.full(self.n, self.spin_rate * self.dt))
            self.target_R = spin @ self.target_R

        prev = self._err
        err = self._errors(new)
        cfg = self.rewards
        r_m, c_m = reward_manipulator(err["e_pos"], err["e_ori"], prev["e_ori"], new.qdot,
                                      qdot_prev, cfg)
        r_b, c_b = reward_base(err["e_att"], prev["e_att"], err["euler"], prev["euler"], cfg)
        newly_failed = (~finite | err["gimbal"]) & ~self.failed
        self.failed |= newly_failed
        r_m = np.where(self.failed, 0.0, r_m)
        r_b = np.where(self.failed, 0.0, r_b)
        self._err = err
        self.tau_prev = tau_applied

        obs = self._observe(new, new.t, err["ee"], err["R_rel"])
        obs_delayed = np.zeros(self.n, dtype=bool)
        if f.obs_delay_prob > 0 and new.t >= 2:
            obs_delayed = u[:, 1] < f.obs_delay_prob
            obs = {k: np.where(obs_delayed[:, None], self.obs[k], v) for k, v in obs.items()}
        self.obs = obs

        tr = self.trace
        for key, val in (("q", new.q), ("qdot", new.qdot), ("a_m", qdot_cmd), ("a_b", tau_req),
                         ("tau", tau_applied), ("e_pos", err["e_pos"]), ("e_ori", err["e_ori"]),
                         ("e_att", err["e_att"]), ("r_m", r_m), ("r_b", r_b),
                         ("obs_delayed", obs_delayed), ("act_delayed", act_delayed),
                         ("wheel_saturated", np.any(saturated & (tau_req != 0), axis=-1)),
                         ("impulse", impulse_on & (f.impulse_magnitude > 0)),
                         ("ee_pos", err["ee"].translation), ("ee_rot", err["ee"].rotation),
                         ("failed", self.failed.copy())):
            tr[key].append(np.array(val))

        info = {"e_pos": err["e_pos"], "e_ori": err["e_ori"], "e_att": err["e_att"],
                "tau_applied": tau_applied, "failed": self.failed.copy(),
                "newly_failed": newly_failed}
        return StepOutput(obs, {"m": r_m, "b": r_b}, {"m": c_m, "b": c_b}, info,
                          done=new.t >= self.horizon)

    def episode_trace(self):
        """Per-step arrays stacked as ``(episodes, steps, ...)``."""
        return {k: np.stack(v, axis=1) for k, v in self.trace.items()}


def write_trace(path, trace, episode_ids=None):
    """Delimiter-separated trace export, one row per step (``TRACE_COLUMNS``)."""
    n, T = trace["e_pos"].shape
    ids = range(n) if episode_ids is None else episode_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for i, ep in enumerate(ids):
            for t in range(T):
                row = [ep, t + 1]
                for key in ("q", "qdot", "a_m", "a_b", "tau"):
                    row.extend(repr(float(x)) for x in trace[key][i, t])
                row.extend(repr(float(trace[k][i, t])) for k in ("e_pos", "e_ori", "e_att", "r_m", "r_b"))
                row.extend(int(trace[k][i, t]) for k in ("obs_delayed", "act_delayed",
                                                         "wheel_saturated", "impulse"))
                w.writerow(row)


def read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows
