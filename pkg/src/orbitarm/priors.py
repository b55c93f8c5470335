"""Model-based expert policies used as guidance.

The arm expert plans in joint space as if the base were fixed: inverse
kinematics supplies goal configurations, RRT* connects them to the start
configuration, and the path is time-parameterised and tracked with a
proportional correction.  The base expert is a discrete PID on the Z-Y-X
Euler error relative to the initial attitude.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import geometry as geo
from .errors import NoSolution, PlanningFailed

DT = 0.1
K_TRACK = 2.0
TRAJ_SPEED = 0.8 * 2.0


# ---------------------------------------------------------------------- PID

@dataclass
class PidState:
    kp: float = 15.0
    ki: float = 2.5
    kd: float = 800.0
    limit: float = 0.1
    error_sum: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prev_error: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def create(cls, batch=(), **gains):
        return cls(error_sum=np.zeros(tuple(batch) + (3,)), prev_error=np.zeros(tuple(batch) + (3,)),
                   **gains)


def pid_step(pid: PidState, error, dt=DT):
    """One controller update; gains act on the per-step sum and difference.

    ``dt`` is accepted for interface symmetry but the discrete law does not
    scale by it.  There is no anti-windup; only the output is clipped.
    """
    e = np.asarray(error, dtype=float)
    total = pid.error_sum + e
    raw = pid.kp * e + pid.ki * total + pid.kd * (e - pid.prev_error)
    pid.error_sum = total
    pid.prev_error = e
    return np.clip(raw, -pid.limit, pid.limit)


# ----------------------------------------------------------------------- IK

def solve_ik(model: dyn.SystemModel, target: geo.Pose, rng, seeds=16, iters=150, damping=0.02,
             pos_tol=1e-3, ori_tol=1e-2):
    """Damped least-squares IK from ``seeds`` random starts (fixed base).

    Returns the list of converged configurations; raises NoSolution when
    none meets the tolerances.
    """
    lim = model.q_limits
    q = np.clip(rng.uniform(-np.pi, np.pi, (seeds, 6)), -lim, lim)
    zeros = dyn.rest_state(model, batch=seeds)
    eye = np.eye(6)
    for _ in range(iters):
        ee = dyn.fixed_base_ee(model, q)
        err = np.concatenate([target.translation - ee.translation,
                              geo.matrix_log(target.rotation @ np.swapaxes(ee.rotation, -1, -2))], axis=-1)
        _, J = dyn.jacobians(model, dyn.SystemState(zeros.base_attitude, zeros.base_omega,
                                                    zeros.base_position, q, zeros.qdot))
        JJt = J @ np.swapaxes(J, -1, -2) + damping ** 2 * eye
        dq = np.einsum("...ji,...j->...i", J, np.linalg.solve(JJt, err[..., None])[..., 0])
        n = np.linalg.norm(dq, axis=-1, keepdims=True)
        dq = dq * np.minimum(1.0, 0.5 / np.maximum(n, 1e-300))
        q = np.clip(q + dq, -lim, lim)
    ee = dyn.fixed_base_ee(model, q)
    e_pos = np.linalg.norm(ee.translation - target.translation, axis=-1)
    e_ori = geo.geodesic_angle(ee.rotation, target.rotation)
    ok = (e_pos <= pos_tol) & (e_ori <= ori_tol)
    if not np.any(ok):
        raise NoSolution(f"no IK solution from {seeds} seeds (best e_pos {e_pos.min():.3g} m)")
    return [q[i] for i in np.flatnonzero(ok)]


def nearest_equivalent(q, q_ref, limits):
    """Shift joints by multiples of 2*pi toward ``q_ref`` while staying in limits."""
    q = np.array(q, dtype=float)
    for shift in (2 * np.pi, -2 * np.pi):
        alt = q + shift
        better = (np.abs(alt - q_ref) < np.abs(q - q_ref)) & (np.abs(alt) <= limits)
        q = np.where(better, alt, q)
    return q


# --------------------------------------------------------------------- RRT*

@dataclass
class JointPath:
    waypoints: np.ndarray         # (n, 6)
    cost: float
    cost_log: list = field(default_factory=list)   # (iteration, best cost)


def _densify(wp, step):
    out = [wp[0]]
    for a, b in zip(wp[:-1], wp[1:]):
        n = int(np.ceil(np.linalg.norm(b - a) / step - 1e-12))
        for k in range(1, max(n, 1) + 1):
            out.append(a + (b - a) * (k / max(n, 1)))
    return np.array(out)


def _informed_sample(rng, a, b, c_best, limits, tries=20):
    """Uniform draw from the prolate hyperspheroid of points whose path
    ``a -> x -> b`` is no longer than ``c_best``, restricted to the box."""
    d = a.size
    c_min = np.linalg.norm(b - a)
    e1 = (b - a) / c_min
    # orthonormal frame with first axis along the focal line
    Q, _ = np.linalg.qr(np.column_stack([e1, np.eye(d)[:, :d - 1]]))
    Q[:, 0] *= np.sign(Q[:, 0] @ e1)
    r_minor = np.sqrt(max(c_best ** 2 - c_min ** 2, 0.0)) / 2
    radii = np.array([c_best / 2] + [r_minor] * (d - 1))
    centre = 0.5 * (a + b)
    for _ in range(tries):
        u = rng.standard_normal(d)
        u *= rng.random() ** (1.0 / d) / np.linalg.norm(u)
        x = centre + Q @ (radii * u)
        if np.all(np.abs(x) <= limits):
            return x
    return np.clip(x, -limits, limits)


def rrt_star_plan(q_start, goals, limits, rng, budget=3000, step=0.3, gamma=4.0, goal_bias=0.1,
                  goal_tol=0.05, log_every=500, informed=True, path_bias=0.5, path_noise=0.1):
    """Asymptotically optimal joint-space planner inside the box ``|q| <= limits``.

    The box is the only constraint, so every straight edge is feasible.  Once
    a solution exists, non-goal samples come from the informed subset that
    could still shorten it.  The returned waypoints are spaced at most
    ``step`` apart.
    """
    q_start = np.asarray(q_start, dtype=float)
    limits = np.asarray(limits, dtype=float)
    if np.any(np.abs(q_start) > limits):
        raise ValueError("start configuration outside joint limits")
    goals = np.atleast_2d(np.asarray(goals, dtype=float))
    goals = goals[np.all(np.abs(goals) <= limits, axis=-1)]
    if len(goals) == 0:
        raise PlanningFailed("no goal configuration inside the joint limits")
    d = q_start.size
    if np.min(np.linalg.norm(goals - q_start, axis=-1)) <= goal_tol:
        return JointPath(q_start[None].copy(), 0.0, [(i, 0.0) for i in range(log_every, budget + 1, log_every)])

    nodes = np.empty((budget + 1, d))
    parent = np.full(budget + 1, -1)
    cost = np.zeros(budget + 1)
    children = [[] for _ in range(budget + 1)]
    nodes[0] = q_start
    n = 1
    at_goal = []
    log = []

    for it in range(1, budget + 1):
        if rng.random() < goal_bias:
            x = goals[rng.integers(len(goals))]
        elif informed and at_goal:
            best = min(at_goal, key=lambda i: cost[i])
            if rng.random() < path_bias:
                # perturb a node of the incumbent path so rewiring can straighten it
                chain = [best]
                while parent[chain[-1]] >= 0:
                    chain.append(parent[chain[-1]])
                i = rng.integers(len(chain))
                lo = nodes[chain[i]]
                hi = nodes[chain[max(i - 1, 0)]]
                x = np.clip(lo + rng.random() * (hi - lo) + path_noise * rng.standard_normal(d), -limits, limits)
            else:
                g = goals[np.argmin(np.linalg.norm(goals - nodes[best], axis=-1))]
                x = _informed_sample(rng, q_start, g, cost[best] + np.linalg.norm(g - nodes[best]), limits)
        else:
            x = rng.uniform(-limits, limits)
        dists = np.linalg.norm(nodes[:n] - x, axis=-1)
        i_near = int(np.argmin(dists))
        if dists[i_near] > 1e-12:
            new = x if dists[i_near] <= step else nodes[i_near] + (x - nodes[i_near]) * (step / dists[i_near])
            radius = max(gamma * (np.log(n + 1) / (n + 1)) ** (1.0 / d), step)
            dn = np.linalg.norm(nodes[:n] - new, axis=-1)
            near = np.flatnonzero(dn <= radius)
            via = cost[near] + dn[near]
            j = near[np.argmin(via)]
            nodes[n] = new
            parent[n] = j
            cost[n] = cost[j] + dn[j]
            children[j].append(n)
            # rewire neighbours through the new node
            for k in near[cost[n] + dn[near] < cost[near] - 1e-12]:
                children[parent[k]].remove(k)
                parent[k] = n
                children[n].append(k)
                delta = cost[n] + dn[k] - cost[k]
                stack = [k]
                while stack:
                    m = stack.pop()
                    cost[m] += delta
                    stack.extend(children[m])
            if np.min(np.linalg.norm(goals - new, axis=-1)) <= goal_tol:
                at_goal.append(n)
            n += 1
        if it % log_every == 0:
            log.append((it, float(min(cost[at_goal])) if at_goal else float("inf")))

    if not at_goal:
        raise PlanningFailed(f"goal set not reached within {budget} iterations")
    best = min(at_goal, key=lambda i: cost[i])
    chain = [best]
    while parent[chain[-1]] >= 0:
        chain.append(parent[chain[-1]])
    wp = nodes[chain[::-1]]
    return JointPath(_densify(wp, step), float(cost[best]), log)


def path_cost(waypoints):
    return float(np.sum(np.linalg.norm(np.diff(waypoints, axis=0), axis=-1)))


def write_path(path, jp: JointPath):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i"] + [f"q{j}" for j in range(1, jp.waypoints.shape[1] + 1)])
        for i, q in enumerate(jp.waypoints):
            w.writerow([i] + [repr(float(x)) for x in q])


# ------------------------------------------------------------ trajectories

@dataclass(frozen=True)
class PriorTrajectory:
    q_ref: np.ndarray      # (steps + 1, 6)
    qdot_ref: np.ndarray   # (steps, 6)
    dt: float = DT


def time_parameterize(jp: JointPath, steps=50, dt=DT, speed=TRAJ_SPEED) -> PriorTrajectory:
    """Constant joint-space speed along the path, then forward differences."""
    wp = np.asarray(jp.waypoints, dtype=float)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(wp, axis=0), axis=-1))])
    sq = np.minimum(speed * dt * np.arange(steps + 1), s[-1])
    q_ref = np.stack([np.interp(sq, s, wp[:, j]) for j in range(wp.shape[1])], axis=-1)
    return PriorTrajectory(q_ref, np.diff(q_ref, axis=0) / dt, dt)


def prior_manipulator_action(traj: PriorTrajectory, q, t, k_track=K_TRACK, limit=2.0):
    if t < len(traj.qdot_ref):
        q_ref, qd_ref = traj.q_ref[t], traj.qdot_ref[t]
    else:
        q_ref, qd_ref = traj.q_ref[-1], 0.0
    return np.clip(qd_ref + k_track * (q_ref - np.asarray(q)), -limit, limit)


# ------------------------------------------------------------ batched expert

class ExpertPolicy:
    """RRT* + PID expert driving a batched ``SpaceRobotEnv``.

    Call ``reset(env, rngs)`` right after the env reset, then ``act(env)``
    once per step.  Episodes with no IK solution or plan fall back to a
    zero arm rate with PID still active.
    """

    def __init__(self, model: dyn.SystemModel, budget=3000, ik_seeds=16, pid_gains=None):
        self.model = model
        self.budget = budget
        self.ik_seeds = ik_seeds
        self.pid_gains = pid_gains or {}
        self.fallbacks = 0
        self.calls = 0

    def plan(self, q0, target: geo.Pose, rng):
        lim = self.model.q_limits
        try:
            sols = solve_ik(self.model, target, rng, seeds=self.ik_seeds)
            goals = np.stack([nearest_equivalent(s, q0, lim) for s in sols])
            return time_parameterize(rrt_star_plan(q0, goals, lim, rng, budget=self.budget))
        except (NoSolution, PlanningFailed):
            self.fallbacks += 1
            return None

    def reset(self, env, rngs):
        tgt = env.observed_target(0)
        q0 = env.state.q
        self.trajs = [self.plan(q0[i], geo.Pose(tgt.rotation[i], tgt.translation[i]), rngs[i])
                      for i in range(env.n)]
        self.pid = PidState.create((env.n,), **self.pid_gains)

    def act(self, env):
        self.calls += 1
        q, t = env.state.q, env.state.t
        a_m = np.stack([np.zeros(6) if tr is None else prior_manipulator_action(tr, q[i], t)
                        for i, tr in enumerate(self.trajs)])
        tau = pid_step(self.pid, -env.base_euler())
        return {"m": a_m, "b": tau}
