"""Small numpy actor-critic network with hand-written reverse mode.

A shared tanh (or relu) torso feeds a policy head (categorical logits or a
diagonal Gaussian) and a value head (scalar, fixed-fraction quantiles or a
Gaussian mixture).  ``forward`` returns a one-shot tape; ``backward`` consumes
it and returns gradients keyed like ``params``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .distcore import VARIANCE_FLOOR, DiracMixture, GaussianMixture
from .flops import record

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
CHECKPOINT_MAGIC = b"DACK"
CHECKPOINT_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    """Derivative of softplus, i.e. the logistic sigmoid."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def orthogonal(shape, gain, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarHead:
    kind = "scalar"

    @property
    def n_out(self) -> int:
        return 1

    @property
    def size(self) -> int:
        return 1


@dataclass(frozen=True)
class QuantileHead:
    """m atoms at the fixed fractions (2i - 1) / 2m."""

    m: int
    kind = "quantile"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def n_out(self) -> int:
        return self.m

    @property
    def size(self) -> int:
        return self.m

    @property
    def fractions(self) -> np.ndarray:
        return (2.0 * np.arange(1, self.m + 1) - 1.0) / (2.0 * self.m)

    def distribution(self, raw_row) -> DiracMixture:
        return DiracMixture(raw_row)


@dataclass(frozen=True)
class GmmHead:
    """Raw outputs ``[logits | means | raw variances]``, each of width K."""

    k: int
    kind = "gmm"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")

    @property
    def n_out(self) -> int:
        return 3 * self.k

    @property
    def size(self) -> int:
        return self.k

    def params(self, raw):
        k = self.k
        w = softmax(raw[..., :k])
        mu = raw[..., k:2 * k]
        var = softplus(raw[..., 2 * k:]) + VARIANCE_FLOOR
        record(elementwise=4 * w.size, special=2 * w.size)
        return w, mu, var

    def backward(self, raw, g_w, g_mu, g_var):
        """Chain (dL/dw, dL/dmu, dL/dvar) back to the raw outputs."""
        k = self.k
        w = softmax(raw[..., :k])
        g_logits = w * (g_w - np.sum(g_w * w, axis=-1, keepdims=True))
        g_raw_var = g_var * softplus_grad(raw[..., 2 * k:])
        record(madd=2 * w.size, elementwise=3 * w.size, special=w.size)
        return np.concatenate([g_logits, g_mu, g_raw_var], axis=-1)

    def distribution(self, raw_row) -> GaussianMixture:
        w, mu, var = self.params(np.asarray(raw_row, dtype=float))
        return GaussianMixture(w / w.sum(), mu, var)


def make_value_head(kind: str, size: int | None = None):
    if kind == "scalar":
        return ScalarHead()
    if kind == "quantile":
        return QuantileHead(size or 64)
    if kind == "gmm":
        return GmmHead(size or 5)
    raise ValueError(f"unknown value head {kind!r}")


# ---------------------------------------------------------------------------
# policy distributions
# ---------------------------------------------------------------------------

def categorical_logp(logits, actions):
    lp = log_softmax(logits)
    return lp[np.arange(len(actions)), actions]


def categorical_entropy(logits):
    lp = log_softmax(logits)
    return -np.sum(np.exp(lp) * lp, axis=-1)


def categorical_grads(logits, actions, g_logp, g_ent):
    """Gradient wrt logits of ``sum(g_logp * logp(a) + g_ent * entropy)``."""
    lp = log_softmax(logits)
    p = np.exp(lp)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(actions)), actions] = 1.0
    ent = -np.sum(p * lp, axis=-1, keepdims=True)
    g = g_logp[:, None] * (onehot - p)
    g += g_ent[:, None] * (-p * (lp + ent))
    return g


def gaussian_logp(mean, log_std, actions):
    std = np.exp(log_std)
    z = (actions - mean) / std
    return np.sum(-0.5 * z**2 - log_std - 0.5 * _LOG_2PI, axis=-1)


def gaussian_entropy(log_std, batch: int):
    return np.full(batch, np.sum(log_std + 0.5 * (1.0 + _LOG_2PI)))


def gaussian_grads(mean, log_std, actions, g_logp, g_ent):
    """Gradients wrt (mean (B,d), log_std (d,)) of ``sum(g_logp*logp + g_ent*entropy)``."""
    std = np.exp(log_std)
    z = (actions - mean) / std
    g_mean = g_logp[:, None] * z / std
    g_log_std = np.sum(g_logp[:, None] * (z**2 - 1.0), axis=0) + np.sum(g_ent) * np.ones_like(log_std)
    return g_mean, g_log_std


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    x: np.ndarray
    acts: list
    used: bool = False


@dataclass
class Forward:
    policy: np.ndarray  # logits (B, n) or means (B, d)
    value: np.ndarray  # raw value-head outputs (B, n_out)
    log_std: np.ndarray | None
    tape: Tape


class ActorCritic:
    """Shared torso with a policy head and a value head.

    ``action`` is ``("discrete", n)`` or ``("continuous", d)``.
    """

    def __init__(self, obs_dim: int, action: tuple, value_head, hidden=(64, 64),
                 activation: str = "tanh", rng: np.random.Generator | None = None,
                 init_log_std: float = 0.0):
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        kind, n = action
        if kind not in ("discrete", "continuous") or n < 1 or obs_dim < 1:
            raise ValueError("bad action space or observation dimension")
        self.obs_dim = int(obs_dim)
        self.action = (kind, int(n))
        self.value_head = value_head
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, np.ndarray] = {}
        sizes = (self.obs_dim,) + self.hidden
        for i in range(len(self.hidden)):
            self.params[f"W{i}"] = orthogonal((sizes[i], sizes[i + 1]), np.sqrt(2.0), rng)
            self.params[f"b{i}"] = np.zeros(sizes[i + 1])
        top = sizes[-1]
        self.params["pi_W"] = orthogonal((top, int(n)), 0.01, rng)
        self.params["pi_b"] = np.zeros(int(n))
        self.params["v_W"] = orthogonal((top, value_head.n_out), 1.0, rng)
        self.params["v_b"] = np.zeros(value_head.n_out)
        if kind == "continuous":
            self.params["log_std"] = np.full(int(n), float(init_log_std))

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def forward(self, x) -> Forward:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.obs_dim:
            raise ValueError(f"expected input dimension {self.obs_dim}, got {x.shape[1]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")
        b = x.shape[0]
        h, acts = x, []
        for i in range(len(self.hidden)):
            w = self.params[f"W{i}"]
            h = self._act(h @ w + self.params[f"b{i}"])
            record(madd=b * w.size, elementwise=b * w.shape[1], special=b * w.shape[1])
            acts.append(h)
        pol = h @ self.params["pi_W"] + self.params["pi_b"]
        val = h @ self.params["v_W"] + self.params["v_b"]
        record(madd=b * (self.params["pi_W"].size + self.params["v_W"].size),
               elementwise=b * (pol.shape[1] + val.shape[1]))
        log_std = None
        if self.action[0] == "continuous":
            log_std = np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
        return Forward(pol, val, log_std, Tape(x, acts))

    def backward(self, tape: Tape, g_policy=None, g_value=None, g_log_std=None) -> dict:
        """Gradients of a loss given its derivatives wrt the head outputs."""
        if tape.used:
            raise RuntimeError("tape already consumed; run forward again")
        tape.used = True
        b = tape.x.shape[0]
        top = tape.acts[-1] if tape.acts else tape.x
        g_policy = np.zeros((b, self.action[1])) if g_policy is None else g_policy
        g_value = np.zeros((b, self.value_head.n_out)) if g_value is None else g_value
        grads = {
            "pi_W": top.T @ g_policy, "pi_b": g_policy.sum(0),
            "v_W": top.T @ g_value, "v_b": g_value.sum(0),
        }
        gh = g_policy @ self.params["pi_W"].T + g_value @ self.params["v_W"].T
        record(madd=2 * b * (self.params["pi_W"].size + self.params["v_W"].size))
        for i in reversed(range(len(self.hidden))):
            h = tape.acts[i]
            gz = gh * (1.0 - h * h) if self.activation == "tanh" else gh * (h > 0)
            below = tape.acts[i - 1] if i > 0 else tape.x
            w = self.params[f"W{i}"]
            grads[f"W{i}"] = below.T @ gz
            grads[f"b{i}"] = gz.sum(0)
            record(madd=b * w.size, elementwise=3 * b * w.shape[1])
            if i > 0:
                gh = gz @ w.T
                record(madd=b * w.size)
        if self.action[0] == "continuous":
            g = np.zeros(self.action[1]) if g_log_std is None else np.asarray(g_log_std, float)
            raw = self.params["log_std"]
            grads["log_std"] = g * ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX))
        return {k: grads[k] for k in self.params}

    def value_distribution(self, raw_row):
        if isinstance(self.value_head, ScalarHead):
            return DiracMixture([raw_row[0]])
        return self.value_head.distribution(raw_row)

    def value_means(self, raw) -> np.ndarray:
        if isinstance(self.value_head, GmmHead):
            w, mu, _ = self.value_head.params(raw)
            return np.sum(w * mu, axis=-1)
        return raw.mean(axis=-1)

    # -- serialization ---------------------------------------------------

    def describe(self) -> dict:
        head = self.value_head
        return {
            "obs_dim": self.obs_dim,
            "action": list(self.action),
            "hidden": list(self.hidden),
            "activation": self.activation,
            "value_head": head.kind,
            "head_size": head.size,
        }

    @classmethod
    def from_description(cls, desc: dict) -> "ActorCritic":
        head = make_value_head(desc["value_head"], desc["head_size"])
        return cls(desc["obs_dim"], tuple(desc["action"]), head, desc["hidden"], desc["activation"])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class Adam:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0

    def step(self, params: dict, grads: dict) -> bool:
        """In-place bias-corrected update; returns False when skipped."""
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ValueError(f"gradient shape mismatch for {k}: {g.shape} vs {params[k].shape}")
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient; Adam step %d skipped", self.t + 1)
            return False
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            record(madd=3 * g.size, elementwise=4 * g.size, special=g.size)
        return True


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(net: ActorCritic, opt: Adam | None = None, extra: dict | None = None) -> bytes:
    """Magic, version, JSON header length, JSON header, then float64 LE arrays.

    Array order: parameters, then Adam first moments, then second moments,
    each in ``net.params`` key order.
    """
    names = list(net.params)
    has_opt = opt is not None and bool(opt.m)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "network": net.describe(),
        "arrays": [[k, list(net.params[k].shape)] for k in names],
        "optimizer": None if opt is None else {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "t": opt.t, "skipped": opt.skipped, "has_moments": has_opt,
        },
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hb)), hb]
    for k in names:
        chunks.append(np.ascontiguousarray(net.params[k], dtype="<f8").tobytes())
    if has_opt:
        for store in (opt.m, opt.v):
            for k in names:
                chunks.append(np.ascontiguousarray(store[k], dtype="<f8").tobytes())
    return b"".join(chunks)


def load_checkpoint_bytes(data: bytes):
    """Inverse of :func:`checkpoint_bytes`; returns (net, opt or None, extra)."""
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    net = ActorCritic.from_description(header["network"])
    off = 12 + hlen

    def take(shape):
        nonlocal off
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float).reshape(shape)
        off += 8 * n
        return arr

    for k, shape in header["arrays"]:
        if k not in net.params or list(net.params[k].shape) != shape:
            raise ValueError(f"checkpoint array {k} does not match the network layout")
        net.params[k] = take(shape)
    opt = None
    oh = header["optimizer"]
    if oh is not None:
        opt = Adam(lr=oh["lr"], beta1=oh["beta1"], beta2=oh["beta2"], eps=oh["eps"], t=oh["t"], skipped=oh["skipped"])
        if oh["has_moments"]:
            opt.m = {k: take(shape) for k, shape in header["arrays"]}
            opt.v = {k: take(shape) for k, shape in header["arrays"]}
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return net, opt, header["extra"]
