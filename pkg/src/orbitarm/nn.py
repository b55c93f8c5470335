"""Small numpy network stack: tanh MLPs, Gaussian policy heads, value heads,
hand-written reverse-mode gradients, Adam and a binary checkpoint format.

Parameters live in ordered ``{name: ndarray}`` dicts.  Optimisers update the
arrays in place, so every object holding a reference sees the new values.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError, ShapeMismatch

LOG_2PI = np.log(2.0 * np.pi)
CKPT_MAGIC = b"ORBCKPT\x00"
CKPT_VERSION = 1

HIDDEN = {"m": (256, 256, 128), "b": (32, 128, 32)}
LR = {"actor": 2e-4, "critic": 1e-4}


def orthogonal(rng, shape, gain=1.0):
    a = rng.standard_normal((max(shape), min(shape)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


class MLP:
    """Fully connected net, tanh on hidden layers and a linear output."""

    def __init__(self, sizes, rng=None, out_gain=1.0, prefix=""):
        self.sizes = tuple(int(s) for s in sizes)
        self.prefix = prefix
        self.params = {}
        n = len(self.sizes) - 1
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = out_gain if i == n - 1 else 1.0
            W = np.zeros((a, b)) if rng is None else orthogonal(rng, (a, b), gain)
            self.params[f"{prefix}W{i}"] = W
            self.params[f"{prefix}b{i}"] = np.zeros(b)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def _w(self, i):
        return self.params[f"{self.prefix}W{i}"], self.params[f"{self.prefix}b{i}"]

    def forward(self, x, keep=False):
        h = np.asarray(x, dtype=float)
        if h.shape[-1] != self.sizes[0]:
            raise ShapeMismatch(f"expected input dim {self.sizes[0]}, got {h.shape[-1]}")
        acts = [h]
        for i in range(self.n_layers):
            W, b = self._w(i)
            h = h @ W + b
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if keep else h

    __call__ = forward

    def backward(self, acts, grad_out):
        """Gradients of a scalar loss given ``dL/d output``; returns ``(grads, dL/d input)``."""
        g = np.asarray(grad_out, dtype=float).reshape(-1, self.sizes[-1])
        grads = {}
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (1.0 - acts[i + 1].reshape(-1, self.sizes[i + 1]) ** 2)
            h_in = acts[i].reshape(-1, self.sizes[i])
            W, _ = self._w(i)
            grads[f"{self.prefix}W{i}"] = h_in.T @ g
            grads[f"{self.prefix}b{i}"] = g.sum(axis=0)
            g = g @ W.T
        return grads, g.reshape(np.shape(acts[0]))


def param_count(sizes):
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def log_prob(mean, log_std, action):
    """Diagonal Gaussian log-density summed over the last axis."""
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


class GaussianPolicy:
    """``a ~ N(bound * tanh(net(s)), (bound * exp(log_std))^2)``.

    Samples are returned unclipped; the environment clips at execution and
    densities are always evaluated at the unclipped value.
    """

    def __init__(self, obs_dim, act_dim, hidden, bound, rng=None, log_std_init=-0.5):
        self.net = MLP((obs_dim, *hidden, act_dim), rng, out_gain=0.01, prefix="pi.")
        self.bound = np.broadcast_to(np.asarray(bound, dtype=float), (act_dim,)).copy()
        self.params = dict(self.net.params)
        self.params["pi.log_std"] = np.full(act_dim, float(log_std_init))
        self.log_std_init = float(log_std_init)

    @property
    def obs_dim(self):
        return self.net.sizes[0]

    @property
    def act_dim(self):
        return self.net.sizes[-1]

    @property
    def hidden(self):
        return self.net.sizes[1:-1]

    def action_log_std(self):
        return self.params["pi.log_std"] + np.log(self.bound)

    def mean(self, obs, keep=False):
        raw, acts = self.net.forward(obs, keep=True)
        t = np.tanh(raw)
        mu = self.bound * t
        return (mu, (acts, t)) if keep else mu

    def log_prob(self, obs, action):
        return log_prob(self.mean(obs), self.action_log_std(), action)

    def sample(self, obs, rng):
        mu = self.mean(obs)
        std = np.exp(self.action_log_std())
        a = mu + std * rng.standard_normal(mu.shape)
        return a, log_prob(mu, self.action_log_std(), a)

    def entropy(self):
        return float(np.sum(self.action_log_std() + 0.5 * (LOG_2PI + 1.0)))

    def logp_grad(self, obs, action, weight):
        """Gradients of ``sum_i weight_i * log pi(a_i | s_i)``."""
        mu, (acts, t) = self.mean(obs, keep=True)
        ls = self.action_log_std()
        inv_var = np.exp(-2.0 * ls)
        diff = np.asarray(action) - mu
        w = np.asarray(weight)[..., None]
        g_mu = w * diff * inv_var
        g_raw = g_mu * self.bound * (1.0 - t * t)
        grads, _ = self.net.backward(acts, g_raw)
        grads["pi.log_std"] = np.sum(w * (diff * diff * inv_var - 1.0), axis=tuple(range(diff.ndim - 1)))
        return grads

    def surrogate(self, obs, action, logp_old, adv, clip_eps, ent_coef=0.0):
        """Clipped-surrogate loss (to minimise), its gradients and diagnostics."""
        logp = self.log_prob(obs, action)
        ratio = np.exp(logp - logp_old)
        clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
        obj = np.minimum(ratio * adv, clipped * adv)
        n = len(adv)
        # gradient flows only where the unclipped term is the active minimum
        active = ratio * adv <= clipped * adv
        weight = np.where(active, -ratio * adv / n, 0.0)
        grads = self.logp_grad(obs, action, weight)
        loss = -float(np.mean(obj))
        if ent_coef:
            loss -= ent_coef * self.entropy()
            grads["pi.log_std"] = grads["pi.log_std"] - ent_coef
        diag = {"ratio": float(np.mean(ratio)),
                "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip_eps))}
        return loss, grads, diag


class ValueFunction:
    def __init__(self, obs_dim, hidden, rng=None):
        self.net = MLP((obs_dim, *hidden, 1), rng, out_gain=1.0, prefix="v.")
        self.params = self.net.params

    @property
    def hidden(self):
        return self.net.sizes[1:-1]

    def value(self, obs):
        return self.net.forward(obs)[..., 0]

    def loss_grad(self, obs, returns, coef=0.5):
        v, acts = self.net.forward(obs, keep=True)
        err = v[..., 0] - returns
        loss = coef * float(np.mean(err * err))
        grads, _ = self.net.backward(acts, (2.0 * coef / len(err)) * err[..., None])
        return loss, grads


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if self.m[k].shape != np.shape(g):
                raise ShapeMismatch(f"gradient {k} has shape {np.shape(g)}, expected {self.m[k].shape}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ------------------------------------------------------------ checkpoints

def _write_tensors(fh, tensors):
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        fh.write(struct.pack("<H", len(key)) + key)
        fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_tensors(buf, off):
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + klen].decode("utf-8")
        off += klen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
        off += 8 * size
    return out, off


def save_agent(path, agent_id, policy: GaussianPolicy, critic: ValueFunction, hyper=None):
    """Checkpoint layout: magic, u32 header length, JSON header, u32 tensor
    count, then per tensor ``(u16 name length, name, u8 ndim, u32 shape..., f64 LE data)``."""
    header = {
        "format_version": CKPT_VERSION,
        "agent": agent_id,
        "obs_dim": policy.obs_dim,
        "act_dim": policy.act_dim,
        "actor_hidden": list(policy.hidden),
        "critic_hidden": list(critic.hidden),
        "bound": [float(b) for b in policy.bound],
        "hyper": hyper or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = dict(policy.params)
    tensors.update(critic.params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        _write_tensors(fh, tensors)


def load_agent(path):
    """Return ``(policy, critic, header)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise ConfigError("checkpoint", f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != CKPT_VERSION:
        raise ConfigError("checkpoint", f"unsupported format_version {header.get('format_version')}")
    tensors, _ = _read_tensors(buf, 12 + hlen)
    policy = GaussianPolicy(header["obs_dim"], header["act_dim"], header["actor_hidden"], header["bound"])
    critic = ValueFunction(header["obs_dim"], header["critic_hidden"])
    for params in (policy.params, critic.params):
        for k in params:
            if k not in tensors or tensors[k].shape != params[k].shape:
                raise ConfigError("checkpoint", f"tensor {k} missing or misshapen")
            params[k][...] = tensors[k]
    return policy, critic, header
