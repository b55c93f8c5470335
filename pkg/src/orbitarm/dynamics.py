"""Free-floating spacecraft-manipulator kinematics and dynamics.

The coupled equations of motion are integrated at the momentum level.  With
all bodies stacked as ``i = 0`` (base) and ``i = 1..6`` (links), the total
angular momentum about the system centre of mass is

    H = A(attitude, q) @ omega_b + B(attitude, q) @ qdot

where ``A`` is the locked (composite) rotational inertia about the CoM and
``B`` maps joint rates to momentum.  ``A`` plays the role of the base inertia
block and ``B @ qdd`` (through ``dH/dt``) is the reaction torque the arm
exerts on the base; the velocity-product terms never need to be formed
because ``H`` itself is integrated.  Joint motion is prescribed: commanded
rates are tracked with a linear ramp over each control period.  Base
translation follows from keeping the system CoM fixed, which is the same as
zero total linear momentum.

All state arrays may carry a leading batch dimension; every function here
broadcasts over it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import geometry as geo
from .errors import ConfigError, NonFiniteState

N_JOINTS = 6
DEFAULT_MODEL = "spacecraft_ur5.yaml"
# _CARRIED[j, i] is 1 when body i (0 = base) moves with joint j
_CARRIED = (np.arange(N_JOINTS + 1)[None, :] > np.arange(N_JOINTS)[:, None]).astype(float)


def _inertia_matrix(six):
    ixx, iyy, izz, ixy, ixz, iyz = (float(v) for v in six)
    return np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])


@dataclass(frozen=True)
class BodyParams:
    mass: float
    inertia: np.ndarray
    com: np.ndarray

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        I = np.asarray(self.inertia)
        if not np.allclose(I, I.T) or np.any(np.linalg.eigvalsh(I) <= 0):
            raise ValueError("inertia must be symmetric positive definite")


@dataclass(frozen=True)
class LinkParams:
    name: str
    origin: geo.Pose
    axis: np.ndarray
    body: BodyParams
    q_limit: float
    qdot_limit: float


@dataclass(frozen=True)
class SystemModel:
    base: BodyParams
    mount: geo.Pose
    links: tuple
    ee: geo.Pose
    torque_limit: float
    home_q: np.ndarray
    version: str = ""
    checksum: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.links) != N_JOINTS:
            raise ValueError(f"expected {N_JOINTS} links, got {len(self.links)}")
        c = self._cache
        c["o_rot"] = np.stack([ln.origin.rotation for ln in self.links])
        c["o_pos"] = np.stack([ln.origin.translation for ln in self.links])
        c["axis"] = np.stack([geo.normalize(ln.axis) for ln in self.links])
        c["K"] = geo.skew(c["axis"])
        c["K2"] = c["K"] @ c["K"]
        c["mass"] = np.array([self.base.mass] + [ln.body.mass for ln in self.links])
        c["com"] = np.stack([self.base.com] + [ln.body.com for ln in self.links])
        c["inertia"] = np.stack([self.base.inertia] + [ln.body.inertia for ln in self.links])

    @property
    def masses(self):
        return self._cache["mass"]

    @property
    def total_mass(self):
        return float(self._cache["mass"].sum())

    @property
    def q_limits(self):
        return np.array([ln.q_limit for ln in self.links])

    @property
    def qdot_limits(self):
        return np.array([ln.qdot_limit for ln in self.links])

    def with_base_mass_scale(self, scale):
        """Copy with base mass and inertia scaled together (uniform density change)."""
        if scale == 1.0:
            return self
        base = BodyParams(self.base.mass * scale, self.base.inertia * scale, self.base.com)
        return SystemModel(base, self.mount, self.links, self.ee, self.torque_limit,
                           self.home_q, self.version + f"+mass*{scale:g}", self.checksum)


def model_path(path=None):
    if path is not None:
        return Path(path)
    return Path(str(resources.files("orbitarm.data").joinpath(DEFAULT_MODEL)))


def load_model(path=None) -> SystemModel:
    """Read a model parameter file (see the schema in the bundled YAML)."""
    path = model_path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError("model_file", f"cannot read {path}: {exc.strerror}") from exc
    doc = yaml.safe_load(raw)
    if doc.get("format_version") != 1:
        raise ConfigError("model_file", "unsupported format_version")

    def body(d):
        return BodyParams(float(d["mass"]), _inertia_matrix(d["inertia"]),
                          np.asarray(d["com"], dtype=float))

    links = tuple(
        LinkParams(
            name=d["name"],
            origin=geo.Pose.from_xyz_rpy(d["origin_xyz"], d["origin_rpy"]),
            axis=geo.normalize(d["axis"]),
            body=body(d),
            q_limit=float(d["q_limit"]),
            qdot_limit=float(d["qdot_limit"]),
        )
        for d in doc["links"]
    )
    return SystemModel(
        base=body(doc["base"]),
        mount=geo.Pose.from_xyz_rpy(doc["mount"]["xyz"], doc["mount"]["rpy"]),
        links=links,
        ee=geo.Pose.from_xyz_rpy(doc["ee"]["origin_xyz"], doc["ee"]["origin_rpy"]),
        torque_limit=float(doc["base"]["torque_limit"]),
        home_q=np.asarray(doc["home_q"], dtype=float),
        version=str(doc.get("model_version", "")),
        checksum=hashlib.sha256(raw).hexdigest(),
    )


@dataclass(frozen=True)
class SystemState:
    """Full mechanical state; ``base_omega`` is in inertial-frame components."""

    base_attitude: np.ndarray
    base_omega: np.ndarray
    base_position: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    t: int = 0

    @property
    def batch_shape(self):
        return np.shape(self.q)[:-1]

    @property
    def rotation(self):
        return geo.quat_to_matrix(self.base_attitude)

    def take(self, idx):
        return replace(self, base_attitude=self.base_attitude[idx], base_omega=self.base_omega[idx],
                       base_position=self.base_position[idx], q=self.q[idx], qdot=self.qdot[idx])

    def is_finite(self):
        parts = (self.base_attitude, self.base_omega, self.base_position, self.q, self.qdot)
        return np.all(np.stack([np.all(np.isfinite(p), axis=-1) for p in parts]), axis=0)


def rest_state(model: SystemModel, q=None, batch=None) -> SystemState:
    q = model.home_q if q is None else np.asarray(q, dtype=float)
    shape = () if batch is None else (batch,)
    att = np.broadcast_to(np.array([1.0, 0.0, 0.0, 0.0]), shape + (4,)).copy()
    zeros3 = np.zeros(shape + (3,))
    return SystemState(att, zeros3, zeros3.copy(), np.broadcast_to(q, shape + (6,)).copy(),
                       np.zeros(shape + (6,)))


@dataclass(frozen=True)
class CommandInput:
    qdot_cmd: np.ndarray
    tau_b: np.ndarray
    tau_ext: np.ndarray = None

    def clipped(self, model: SystemModel) -> "CommandInput":
        tau_ext = np.zeros_like(self.tau_b) if self.tau_ext is None else self.tau_ext
        lim = model.qdot_limits
        return CommandInput(np.clip(self.qdot_cmd, -lim, lim),
                            np.clip(self.tau_b, -model.torque_limit, model.torque_limit),
                            np.asarray(tau_ext, dtype=float))


# ------------------------------------------------------------------ kinematics

@dataclass(frozen=True)
class ChainFrames:
    """Base-frame quantities that depend on the joint angles only."""

    joint_origin: np.ndarray   # (..., 6, 3)
    joint_axis: np.ndarray     # (..., 6, 3)
    link_rot: np.ndarray       # (..., 6, 3, 3)
    link_pos: np.ndarray       # (..., 6, 3)
    body_com: np.ndarray       # (..., 7, 3)  base first
    body_rot: np.ndarray       # (..., 7, 3, 3)
    ee: geo.Pose


def chain_frames(model: SystemModel, q) -> ChainFrames:
    c = model._cache
    q = np.asarray(q, dtype=float)
    batch = q.shape[:-1]
    R = np.broadcast_to(model.mount.rotation, batch + (3, 3))
    p = np.broadcast_to(model.mount.translation, batch + (3,))
    origins, axes, rots, poss = [], [], [], []
    for j in range(N_JOINTS):
        Rj = R @ c["o_rot"][j]
        pj = p + np.einsum("...ij,j->...i", R, c["o_pos"][j])
        s = np.sin(q[..., j])[..., None, None]
        co = np.cos(q[..., j])[..., None, None]
        Rq = np.eye(3) + s * c["K"][j] + (1.0 - co) * c["K2"][j]
        R = Rj @ Rq
        p = pj
        origins.append(pj)
        axes.append(Rj @ c["axis"][j])
        rots.append(R)
        poss.append(p)
    link_rot = np.stack(rots, axis=-3)
    link_pos = np.stack(poss, axis=-2)
    link_com = link_pos + np.einsum("...ij,...j->...i", link_rot, c["com"][1:])
    base_com = np.broadcast_to(c["com"][0], batch + (3,))
    ee = geo.Pose(R @ model.ee.rotation, p + np.einsum("...ij,j->...i", R, model.ee.translation))
    return ChainFrames(
        joint_origin=np.stack(origins, axis=-2),
        joint_axis=np.stack(axes, axis=-2),
        link_rot=link_rot,
        link_pos=link_pos,
        body_com=np.concatenate([base_com[..., None, :], link_com], axis=-2),
        body_rot=np.concatenate([np.broadcast_to(np.eye(3), batch + (1, 3, 3)), link_rot], axis=-3),
        ee=ee,
    )


@dataclass(frozen=True)
class Kinematics:
    link_poses: geo.Pose   # (..., 6) world poses of the link frames
    ee: geo.Pose
    com: np.ndarray        # system CoM, world frame


def _to_world(R, p, x):
    return p[..., None, :] + np.einsum("...ij,...kj->...ki", R, x)


def forward_kinematics(model: SystemModel, state: SystemState) -> Kinematics:
    fr = chain_frames(model, state.q)
    R = state.rotation
    p = np.asarray(state.base_position, dtype=float)
    base = geo.Pose(R, p)
    ee = base @ fr.ee
    links = geo.Pose(R[..., None, :, :] @ fr.link_rot, _to_world(R, p, fr.link_pos))
    com_body = np.einsum("i,...ij->...j", model.masses, fr.body_com) / model.total_mass
    return Kinematics(links, ee, base.apply(com_body))


def ee_pose(model: SystemModel, state: SystemState) -> geo.Pose:
    fr = chain_frames(model, state.q)
    return geo.Pose(state.rotation, np.asarray(state.base_position)) @ fr.ee


def fixed_base_ee(model: SystemModel, q) -> geo.Pose:
    """End-effector pose in the base frame (base assumed fixed at identity)."""
    return chain_frames(model, q).ee


def jacobians(model: SystemModel, state: SystemState):
    """World-frame ``J_b`` (6x3) and ``J_m`` (6x6) with ``[v_e; w_e] = J_b w_b + J_m qdot``.

    The base origin is held fixed; rows are linear velocity then angular.
    """
    fr = chain_frames(model, state.q)
    R = state.rotation
    p = np.asarray(state.base_position, dtype=float)
    p_ee = p + np.einsum("...ij,...j->...i", R, fr.ee.translation)
    o = _to_world(R, p, fr.joint_origin)
    z = np.einsum("...ij,...kj->...ki", R, fr.joint_axis)
    batch = np.shape(state.q)[:-1]
    J_b = np.zeros(batch + (6, 3))
    J_b[..., :3, :] = -geo.skew(p_ee - p)
    J_b[..., 3:, :] = np.eye(3)
    J_m = np.zeros(batch + (6, 6))
    J_m[..., :3, :] = np.swapaxes(np.cross(z, p_ee[..., None, :] - o), -1, -2)
    J_m[..., 3:, :] = np.swapaxes(z, -1, -2)
    return J_b, J_m


# --------------------------------------------------------------------- momentum

@dataclass(frozen=True)
class MomentumTerms:
    """``H = A w_b + B qdot`` about the system CoM and ``P = M v_b + C w_b + D qdot``."""

    A: np.ndarray
    B: np.ndarray
    lin_omega: np.ndarray
    lin_qdot: np.ndarray
    com: np.ndarray


def _body_momentum_maps(model: SystemModel, fr: ChainFrames):
    """``A``, ``B`` and the CoM offset expressed in the base frame."""
    c = model._cache
    m = c["mass"]
    r = fr.body_com
    I_w = fr.body_rot @ c["inertia"] @ np.swapaxes(fr.body_rot, -1, -2)
    com = np.einsum("i,...ij->...j", m, r) / m.sum()
    d = r - com[..., None, :]
    dd = np.einsum("...ij,...ij->...i", d, d)
    parallel = m[:, None, None] * (dd[..., None, None] * np.eye(3) - d[..., :, None] * d[..., None, :])
    A = np.sum(I_w + parallel, axis=-3)

    # B[:, j] sums over the bodies carried by joint j (body index > j)
    z = fr.joint_axis[..., :, None, :]                   # (..., 6, 1, 3)
    s = r[..., None, :, :] - fr.joint_origin[..., :, None, :]
    spin = np.moveaxis(I_w @ np.swapaxes(fr.joint_axis, -1, -2)[..., None, :, :], -1, -3)
    # d x (z x s) = z (d.s) - s (d.z)
    dn = d[..., None, :, :]
    orbit = z * np.sum(dn * s, axis=-1, keepdims=True) - s * np.sum(dn * z, axis=-1, keepdims=True)
    B = np.swapaxes(np.sum((spin + m[:, None] * orbit) * _CARRIED[:, :, None], axis=-2), -1, -2)
    return A, B, com


def momentum_decomposition(model: SystemModel, state: SystemState) -> MomentumTerms:
    fr = chain_frames(model, state.q)
    A_b, B_b, com_b = _body_momentum_maps(model, fr)
    R = state.rotation
    Rt = np.swapaxes(R, -1, -2)
    p = np.asarray(state.base_position, dtype=float)
    m = model.masses
    # linear momentum: sum m_i (v_b + w_b x R r_i + sum_j z_j x (R r_i - R o_j) qd_j)
    r_w = np.einsum("...ij,...kj->...ki", R, fr.body_com)
    lin_omega = -geo.skew(np.einsum("i,...ij->...j", m, r_w))
    z_w = np.einsum("...ij,...kj->...ki", R, fr.joint_axis)
    o_w = np.einsum("...ij,...kj->...ki", R, fr.joint_origin)
    lin_cols = []
    for j in range(N_JOINTS):
        sl = slice(j + 1, None)
        v = np.cross(z_w[..., j, None, :], r_w[..., sl, :] - o_w[..., j, None, :])
        lin_cols.append(np.einsum("i,...ij->...j", m[sl], v))
    return MomentumTerms(
        A=R @ A_b @ Rt,
        B=R @ B_b,
        lin_omega=lin_omega,
        lin_qdot=np.stack(lin_cols, axis=-1),
        com=p + np.einsum("...ij,...j->...i", R, com_b),
    )


def angular_momentum(model: SystemModel, state: SystemState):
    t = momentum_decomposition(model, state)
    return (np.einsum("...ij,...j->...i", t.A, state.base_omega)
            + np.einsum("...ij,...j->...i", t.B, state.qdot))


def body_velocities(model: SystemModel, state: SystemState, base_velocity=None):
    """Per-body CoM velocities and angular rates by outward recursion.

    ``base_velocity`` defaults to the value that zeroes total linear momentum.
    """
    fr = chain_frames(model, state.q)
    R = state.rotation
    p = np.asarray(state.base_position, dtype=float)
    com = _to_world(R, p, fr.body_com)
    origin = _to_world(R, p, fr.joint_origin)
    axis = np.einsum("...ij,...kj->...ki", R, fr.joint_axis)
    w = np.asarray(state.base_omega, dtype=float)
    qd = np.asarray(state.qdot, dtype=float)

    def propagate(v_b):
        omegas, vels = [w], [v_b + np.cross(w, com[..., 0, :] - p)]
        w_prev, pt_prev, v_pt = w, p, v_b
        for j in range(N_JOINTS):
            v_o = v_pt + np.cross(w_prev, origin[..., j, :] - pt_prev)
            w_j = w_prev + axis[..., j, :] * qd[..., j, None]
            omegas.append(w_j)
            vels.append(v_o + np.cross(w_j, com[..., j + 1, :] - origin[..., j, :]))
            w_prev, pt_prev, v_pt = w_j, origin[..., j, :], v_o
        return np.stack(omegas, axis=-2), np.stack(vels, axis=-2)

    if base_velocity is None:
        _, v0 = propagate(np.zeros_like(p))
        base_velocity = -np.einsum("i,...ij->...j", model.masses, v0) / model.total_mass
    omegas, vels = propagate(base_velocity)
    return com, omegas, vels, fr


def angular_momentum_direct(model: SystemModel, state: SystemState):
    """Per-body summation of ``I_i w_i + m_i r_i x v_i`` about the system CoM."""
    com, omegas, vels, fr = body_velocities(model, state)
    m = model.masses
    c = np.einsum("i,...ij->...j", m, com) / m.sum()
    R = state.rotation
    body_R = R[..., None, :, :] @ fr.body_rot
    I_w = body_R @ model._cache["inertia"] @ np.swapaxes(body_R, -1, -2)
    spin = np.einsum("...kij,...kj->...ki", I_w, omegas)
    orbit = m[:, None] * np.cross(com - c[..., None, :], vels)
    return np.sum(spin + orbit, axis=-2)


def linear_momentum_direct(model: SystemModel, state: SystemState, base_velocity):
    _, _, vels, _ = body_velocities(model, state, base_velocity)
    return np.einsum("i,...ij->...j", model.masses, vels)


# --------------------------------------------------------------------- stepping

def _solve_omega(A_b, B_b, R, H, qdot):
    rhs = np.einsum("...ji,...j->...i", R, H) - np.einsum("...ij,...j->...i", B_b, qdot)
    w_body = np.linalg.solve(A_b, rhs[..., None])[..., 0]
    return np.einsum("...ij,...j->...i", R, w_body)


def step(model: SystemModel, state: SystemState, cmd: CommandInput, dt=0.1, substeps=10,
         check_finite=True) -> SystemState:
    """Advance one control period.

    Joint rates ramp linearly from ``state.qdot`` to the clipped command; a
    joint that reaches its angle limit is clamped there with zero rate for
    the rest of the period.  The base torque ``tau_b`` is body-fixed and
    ``tau_ext`` inertial; both are pure couples.  Each substep adds the
    torque impulse to ``H``, re-solves ``A w = H - B qdot`` and integrates
    the attitude with a predictor-corrector on the rate.
    """
    if dt <= 0 or substeps < 1:
        raise ValueError("dt must be positive and substeps >= 1")
    cmd = cmd.clipped(model)
    lim = model.q_limits
    h = dt / substeps

    R = state.rotation
    fr = chain_frames(model, state.q)
    A_b, B_b, com_b = _body_momentum_maps(model, fr)
    p = np.asarray(state.base_position, dtype=float)
    com0 = p + np.einsum("...ij,...j->...i", R, com_b)
    H = (np.einsum("...ij,...jk,...lk,...l->...i", R, A_b, R, state.base_omega)
         + np.einsum("...ij,...jk,...k->...i", R, B_b, state.qdot))

    q = np.asarray(state.q, dtype=float)
    qd0 = np.asarray(state.qdot, dtype=float)
    qd_start = qd0
    frozen = np.zeros(q.shape, dtype=bool)
    w = np.asarray(state.base_omega, dtype=float)
    att = np.asarray(state.base_attitude, dtype=float)
    tau_b = np.asarray(cmd.tau_b, dtype=float)
    tau_ext = np.asarray(cmd.tau_ext, dtype=float)

    for k in range(substeps):
        qd_end = qd0 + (cmd.qdot_cmd - qd0) * ((k + 1) / substeps)
        qd_end = np.where(frozen, 0.0, qd_end)
        q_new = q + 0.5 * h * (qd_start + qd_end)
        hit = np.abs(q_new) > lim
        if np.any(hit):
            q_new = np.clip(q_new, -lim, lim)
            frozen |= hit
            qd_end = np.where(frozen, 0.0, qd_end)

        fr = chain_frames(model, q_new)
        A_b, B_b, com_b = _body_momentum_maps(model, fr)
        tau_start = np.einsum("...ij,...j->...i", R, tau_b)
        H_pred = H + h * (tau_start + tau_ext)
        w_pred = _solve_omega(A_b, B_b, R, H_pred, qd_end)
        att = geo.integrate_quat(att, 0.5 * (w + w_pred), h)
        R_new = geo.quat_to_matrix(att)
        H = H + h * (0.5 * (tau_start + np.einsum("...ij,...j->...i", R_new, tau_b)) + tau_ext)
        w = _solve_omega(A_b, B_b, R_new, H, qd_end)
        R, q, qd_start = R_new, q_new, qd_end

    out = SystemState(
        base_attitude=att,
        base_omega=w,
        base_position=com0 - np.einsum("...ij,...j->...i", R, com_b),
        q=q,
        qdot=qd_start,
        t=state.t + 1,
    )
    if check_finite and not np.all(out.is_finite()):
        raise NonFiniteState(f"non-finite state after step {state.t}")
    return out


def reaction_torque_probe(model: SystemModel, state: SystemState, qddot, h=1e-6):
    """Torque the arm motion exerts on the base, ``-(dB/dt qd + B qdd + dA/dt w)``.

    Rates of change of ``A`` and ``B`` are central differences along the
    instantaneous motion; diagnostic only, never used for stepping.
    """
    qddot = np.asarray(qddot, dtype=float)

    def advanced(s):
        att = geo.integrate_quat(state.base_attitude, state.base_omega, s)
        return replace(state, base_attitude=att, q=state.q + s * state.qdot)

    plus = momentum_decomposition(model, advanced(h))
    minus = momentum_decomposition(model, advanced(-h))
    dA = (plus.A - minus.A) / (2 * h)
    dB = (plus.B - minus.B) / (2 * h)
    B = momentum_decomposition(model, state).B
    mv = lambda M, v: np.einsum("...ij,...j->...i", M, v)  # noqa: E731
    return -(mv(dB, state.qdot) + mv(B, qddot) + mv(dA, state.base_omega))
