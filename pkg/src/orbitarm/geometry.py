"""Rotation and rigid-transform algebra.

Conventions
-----------
- Quaternions are scalar-first ``(w, x, y, z)`` and always unit length.
- Rotation matrices act on column vectors, ``v_world = R @ v_body``.
- Euler angles are ``(phi, theta, psi)`` = (roll about x, pitch about y,
  yaw about z) composed in Z-Y-X order: ``R = Rz(psi) @ Ry(theta) @ Rx(phi)``.
- The 6-d rotation encoding is column 1 followed by column 2 of ``R``.
- The 9-d pose encoding (CPR) is ``[translation, rot6d]``.

Every function broadcasts over leading batch dimensions, so ``(..., 4)``
quaternions map to ``(..., 3, 3)`` matrices and so on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GimbalLock

GIMBAL_MARGIN = 1e-6


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------- quaternions

def quat_normalize(q):
    q = normalize(q)
    # canonical hemisphere keeps round-trips comparable
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_multiply(a, b):
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_exp(rotvec):
    """Unit quaternion of the rotation vector ``rotvec`` (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x with a series fallback near zero
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle ** 2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * rotvec], axis=-1)


def integrate_quat(q, omega_world, dt):
    """Advance attitude ``q`` by a constant inertial-frame rate over ``dt``."""
    dq = quat_exp(np.asarray(omega_world) * dt)
    return quat_normalize(quat_multiply(dq, q))


def quat_log(q):
    """Rotation vector (axis * angle, angle in [0, pi]) of a unit quaternion."""
    q = quat_normalize(q)
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(n, q[..., :1])
    small = n < 1e-12
    return np.where(small, 2.0 * v, angle * v / np.where(small, 1.0, n))


def matrix_log(R):
    return quat_log(matrix_to_quat(R))


def quat_to_matrix(q):
    q = normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Shepperd's method, picking the numerically largest pivot per sample."""
    R = np.asarray(R, dtype=float)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    pivots = np.stack([tr, m00, m11, m22], axis=-1)
    which = np.argmax(pivots, axis=-1)

    cands = np.empty(R.shape[:-2] + (4, 4))
    s = np.sqrt(np.maximum(1.0 + tr, 1e-300)) * 2
    cands[..., 0, :] = np.stack([0.25 * s,
                                 (R[..., 2, 1] - R[..., 1, 2]) / s,
                                 (R[..., 0, 2] - R[..., 2, 0]) / s,
                                 (R[..., 1, 0] - R[..., 0, 1]) / s], -1)
    s = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 1e-300)) * 2
    cands[..., 1, :] = np.stack([(R[..., 2, 1] - R[..., 1, 2]) / s,
                                 0.25 * s,
                                 (R[..., 0, 1] + R[..., 1, 0]) / s,
                                 (R[..., 0, 2] + R[..., 2, 0]) / s], -1)
    s = np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 1e-300)) * 2
    cands[..., 2, :] = np.stack([(R[..., 0, 2] - R[..., 2, 0]) / s,
                                 (R[..., 0, 1] + R[..., 1, 0]) / s,
                                 0.25 * s,
                                 (R[..., 1, 2] + R[..., 2, 1]) / s], -1)
    s = np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 1e-300)) * 2
    cands[..., 3, :] = np.stack([(R[..., 1, 0] - R[..., 0, 1]) / s,
                                 (R[..., 0, 2] + R[..., 2, 0]) / s,
                                 (R[..., 1, 2] + R[..., 2, 1]) / s,
                                 0.25 * s], -1)
    q = np.take_along_axis(cands, which[..., None, None], axis=-2)[..., 0, :]
    return quat_normalize(q)


# ------------------------------------------------------------ rotation matrices

def axis_angle_matrix(axis, angle):
    """Rodrigues' formula; ``axis`` (..., 3) unit, ``angle`` (...)."""
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    K = skew(axis)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def rot_x(a):
    return axis_angle_matrix(np.array([1.0, 0.0, 0.0]), a)


def rot_y(a):
    return axis_angle_matrix(np.array([0.0, 1.0, 0.0]), a)


def rot_z(a):
    return axis_angle_matrix(np.array([0.0, 0.0, 1.0]), a)


def geodesic_angle(Ra, Rb):
    """Angle of the relative rotation ``Ra^T Rb``, in ``[0, pi]``."""
    Ra = np.asarray(Ra, dtype=float)
    Rb = np.asarray(Rb, dtype=float)
    tr = np.einsum("...ij,...ij->...", Ra, Rb)
    return np.arccos(np.clip(0.5 * (tr - 1.0), -1.0, 1.0))


def random_rotation(rng, size=None):
    """Haar-uniform rotation matrices from normalised Gaussian quaternions."""
    shape = (4,) if size is None else tuple(np.atleast_1d(size)) + (4,)
    return quat_to_matrix(normalize(rng.standard_normal(shape)))


def project_to_so3(M):
    """Nearest proper rotation in Frobenius norm (SVD polar factor)."""
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


# ----------------------------------------------------------------- euler Z-Y-X

def euler_zyx(R, check=True):
    """Return ``(phi, theta, psi)`` with ``R = Rz(psi) Ry(theta) Rx(phi)``.

    Raises GimbalLock when any ``|theta|`` is within 1e-6 of pi/2.
    """
    R = np.asarray(R, dtype=float)
    theta = -np.arcsin(np.clip(R[..., 2, 0], -1.0, 1.0))
    if check and np.any(np.abs(theta) >= np.pi / 2 - GIMBAL_MARGIN):
        raise GimbalLock("pitch within 1e-6 rad of +-pi/2")
    phi = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    psi = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    out = np.stack([phi, theta, psi], axis=-1)
    # atan2 returns -pi for the branch cut; keep the (-pi, pi] contract
    return np.where(out <= -np.pi, out + 2 * np.pi, out)


def euler_zyx_to_matrix(euler):
    euler = np.asarray(euler, dtype=float)
    phi, theta, psi = euler[..., 0], euler[..., 1], euler[..., 2]
    return rot_z(psi) @ rot_y(theta) @ rot_x(phi)


# ------------------------------------------------------------ continuous codes

def rot6d_encode(R):
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot6d_decode(v):
    """Gram-Schmidt decode of a (possibly noisy) 6-d rotation code."""
    v = np.asarray(v, dtype=float)
    a, b = v[..., :3], v[..., 3:6]
    c1 = normalize(a)
    b = b - np.sum(c1 * b, axis=-1, keepdims=True) * c1
    c2 = normalize(b)
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


@dataclass(frozen=True)
class Pose:
    """Rigid transform; arrays may carry leading batch dimensions."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_xyz_rpy(cls, xyz, rpy):
        rpy = np.asarray(rpy, dtype=float)
        return cls(euler_zyx_to_matrix(rpy), np.asarray(xyz, dtype=float))

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.translation + np.einsum("...ij,...j->...i", self.rotation, other.translation))

    def inverse(self) -> "Pose":
        Rt = np.swapaxes(self.rotation, -1, -2)
        return Pose(Rt, -np.einsum("...ij,...j->...i", Rt, self.translation))

    def apply(self, points):
        return np.einsum("...ij,...j->...i", self.rotation, points) + self.translation

    def matrix(self):
        T = np.zeros(np.shape(self.translation)[:-1] + (4, 4))
        T[..., :3, :3] = self.rotation
        T[..., :3, 3] = self.translation
        T[..., 3, 3] = 1.0
        return T


def encode_cpr(pose: Pose):
    """9-d continuous pose code: translation then the first two rotation columns."""
    return np.concatenate([np.asarray(pose.translation, dtype=float),
                           rot6d_encode(pose.rotation)], axis=-1)


def decode_cpr(v):
    v = np.asarray(v, dtype=float)
    return Pose(rot6d_decode(v[..., 3:9]), v[..., :3])
