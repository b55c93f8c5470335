"""Straight-line homogeneous-matrix forward kinematics, read from the raw model file.

Deliberately shares no code with ``orbitarm.dynamics``: it rebuilds every
transform from the YAML values with explicit 4x4 products.
"""

import math

import numpy as np
import yaml

from orbitarm.dynamics import model_path


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _hom(R, p):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p
    return T


def _origin(xyz, rpy):
    return _hom(_rz(rpy[2]) @ _ry(rpy[1]) @ _rx(rpy[0]), xyz)


def _about(axis, angle):
    x, y, z = axis
    c, s, C = math.cos(angle), math.sin(angle), 1 - math.cos(angle)
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def _quat(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def ee_transform(q, attitude=(1, 0, 0, 0), base_position=(0, 0, 0)):
    doc = yaml.safe_load(model_path().read_text())
    T = _hom(_quat(np.asarray(attitude, float)), base_position)
    T = T @ _origin(doc["mount"]["xyz"], doc["mount"]["rpy"])
    for link, angle in zip(doc["links"], q):
        T = T @ _origin(link["origin_xyz"], link["origin_rpy"])
        T = T @ _hom(_about(link["axis"], angle), np.zeros(3))
    return T @ _origin(doc["ee"]["origin_xyz"], doc["ee"]["origin_rpy"])
