"""Convolutional Q-network, TD loss and Adam, written directly against numpy.

Layout: three conv blocks (conv, batch norm, ReLU), one fully connected
block (linear, batch norm, ReLU) and a linear head with one output per
action. States come in channel-last (``N x side x side x 3``) and are
transposed to channel-first internally.

Batch norm uses batch statistics in training mode and running statistics in
inference mode. Running statistics are only changed by
:func:`apply_batch_stats`, which keeps every forward pass side-effect free.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# conv1..3 and fc1 output shapes (H, W, C) / (units,) at full size
TABLE_I_CHAIN = ((32, 32, 32), (14, 14, 64), (12, 12, 64), (512,))


class QNetError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class NetworkProfile:
    input_side: int
    convs: tuple[ConvSpec, ...]
    hidden: int
    n_actions: int
    in_channels: int = 3
    dtype: str = "float64"

    def shape_chain(self) -> list[tuple[int, ...]]:
        """Activation shapes after each block, input first, Q-values last."""
        shapes = [(self.input_side, self.input_side, self.in_channels)]
        side = self.input_side
        for c in self.convs:
            side = (side + 2 * c.padding - c.kernel) // c.stride + 1
            if side < 1:
                raise QNetError(f"conv {c} collapses the {shapes[-1]} activation")
            shapes.append((side, side, c.channels))
        shapes.append((self.hidden,))
        shapes.append((self.n_actions,))
        return shapes

    @property
    def flat_features(self) -> int:
        h, w, c = self.shape_chain()[len(self.convs)]
        return h * w * c


FULL_CONVS = (ConvSpec(32, 8, 4, 2), ConvSpec(64, 6, 2, 0), ConvSpec(64, 3, 1, 0))


def full_profile(n_actions: int, dtype: str = "float64") -> NetworkProfile:
    return NetworkProfile(128, FULL_CONVS, 512, n_actions, dtype=dtype)


def reduced_profile(n_actions: int, side: int = 16, channels=(8, 16, 16), hidden: int = 64,
                    dtype: str = "float64") -> NetworkProfile:
    c1, c2, c3 = channels
    convs = (ConvSpec(c1, 3, 1, 1), ConvSpec(c2, 3, 2, 1), ConvSpec(c3, 3, 1, 0))
    return NetworkProfile(side, convs, hidden, n_actions, dtype=dtype)


@dataclass(eq=False)
class NetworkParams:
    profile: NetworkProfile
    tensors: dict[str, np.ndarray]

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if not k.endswith(("bn_mean", "bn_var"))]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.profile, {k: v.copy() for k, v in self.tensors.items()})


def param_shapes(profile: NetworkProfile) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def bn(prefix, n):
        for part in ("bn_scale", "bn_shift", "bn_mean", "bn_var"):
            shapes[f"{prefix}.{part}"] = (n,)

    c_in = profile.in_channels
    for i, c in enumerate(profile.convs, start=1):
        shapes[f"conv{i}.weight"] = (c.channels, c_in, c.kernel, c.kernel)
        shapes[f"conv{i}.bias"] = (c.channels,)
        bn(f"conv{i}", c.channels)
        c_in = c.channels
    shapes["fc1.weight"] = (profile.flat_features, profile.hidden)
    shapes["fc1.bias"] = (profile.hidden,)
    bn("fc1", profile.hidden)
    shapes["fc2.weight"] = (profile.hidden, profile.n_actions)
    shapes["fc2.bias"] = (profile.n_actions,)
    return shapes


def init_params(profile: NetworkProfile, rng: np.random.Generator) -> NetworkParams:
    """Fan-in scaled uniform weights, unit/zero batch-norm scale/shift."""
    chain = profile.shape_chain()
    if profile.input_side == 128 and profile.convs == FULL_CONVS and profile.hidden == 512:
        got = tuple(chain[1:5])
        assert got == TABLE_I_CHAIN, f"shape chain {got} != {TABLE_I_CHAIN}"
    dt = np.dtype(profile.dtype)
    t: dict[str, np.ndarray] = {}

    def bn(prefix, n):
        t[f"{prefix}.bn_scale"] = np.ones(n, dt)
        t[f"{prefix}.bn_shift"] = np.zeros(n, dt)
        t[f"{prefix}.bn_mean"] = np.zeros(n, dt)
        t[f"{prefix}.bn_var"] = np.ones(n, dt)

    c_in = profile.in_channels
    for i, c in enumerate(profile.convs, start=1):
        bound = 1.0 / math.sqrt(c_in * c.kernel * c.kernel)
        t[f"conv{i}.weight"] = rng.uniform(-bound, bound, (c.channels, c_in, c.kernel, c.kernel)).astype(dt)
        t[f"conv{i}.bias"] = rng.uniform(-bound, bound, c.channels).astype(dt)
        bn(f"conv{i}", c.channels)
        c_in = c.channels
    fan = profile.flat_features
    bound = 1.0 / math.sqrt(fan)
    t["fc1.weight"] = rng.uniform(-bound, bound, (fan, profile.hidden)).astype(dt)
    t["fc1.bias"] = rng.uniform(-bound, bound, profile.hidden).astype(dt)
    bn("fc1", profile.hidden)
    bound = 1.0 / math.sqrt(profile.hidden)
    t["fc2.weight"] = rng.uniform(-bound, bound, (profile.hidden, profile.n_actions)).astype(dt)
    t["fc2.bias"] = rng.uniform(-bound, bound, profile.n_actions).astype(dt)
    return NetworkParams(profile, t)


def zero_params(profile: NetworkProfile) -> NetworkParams:
    params = init_params(profile, np.random.default_rng(0))
    for k, v in params.tensors.items():
        if not k.endswith("bn_var"):
            v[...] = 0
    return params


# --------------------------------------------------------------------------
# Layers

def _conv_forward(x, w, b, spec: ConvSpec):
    p, s, k = spec.padding, spec.stride, spec.kernel
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]   # N,C,Ho,Wo,k,k
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))              # N,Ho,Wo,F
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return out, (win, xp.shape)


def _conv_backward(dout, w, spec: ConvSpec, cache):
    win, xp_shape = cache
    p, s, k = spec.padding, spec.stride, spec.kernel
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))           # F,C,k,k
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dout, w, axes=([1], [0]))                       # N,Ho,Wo,C,k,k
    dcols = dcols.transpose(0, 3, 1, 2, 4, 5)                            # N,C,Ho,Wo,k,k
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j]
    dx = dxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else dxp
    return dx, dw, db


def _bn_forward(x, scale, shift, mean, var, training: bool):
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if training:
        mu = x.mean(axis=axes)
        sig2 = x.var(axis=axes)
    else:
        mu, sig2 = mean, var
    inv_std = 1.0 / np.sqrt(sig2 + BN_EPS)
    xhat = (x - mu.reshape(shape)) * inv_std.reshape(shape)
    y = xhat * scale.reshape(shape) + shift.reshape(shape)
    m = x.size // x.shape[1]
    return y, (xhat, inv_std, axes, shape, m), (mu, sig2, m)


def _bn_backward(dy, scale, cache):
    xhat, inv_std, axes, shape, m = cache
    dscale = (dy * xhat).sum(axis=axes)
    dshift = dy.sum(axis=axes)
    dxhat = dy * scale.reshape(shape)
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
    return dx, dscale, dshift


def _as_input(params: NetworkParams, states) -> np.ndarray:
    prof = params.profile
    x = np.asarray(states, dtype=prof.dtype)
    if x.ndim == 3:
        x = x[None]
    expected = (prof.input_side, prof.input_side, prof.in_channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise QNetError(f"expected states of shape (N, {expected}), got {x.shape}")
    return x.transpose(0, 3, 1, 2)


def _forward(params: NetworkParams, states, training: bool):
    t = params.tensors
    prof = params.profile
    x = _as_input(params, states)
    caches, stats = [], {}
    for i, spec in enumerate(prof.convs, start=1):
        name = f"conv{i}"
        z, conv_cache = _conv_forward(x, t[f"{name}.weight"], t[f"{name}.bias"], spec)
        y, bn_cache, st = _bn_forward(z, t[f"{name}.bn_scale"], t[f"{name}.bn_shift"],
                                      t[f"{name}.bn_mean"], t[f"{name}.bn_var"], training)
        stats[name] = st
        x = np.maximum(y, 0.0)
        caches.append((conv_cache, bn_cache, y))
    conv_out_shape = x.shape
    h = x.reshape(x.shape[0], -1)
    z = h @ t["fc1.weight"] + t["fc1.bias"]
    y, bn_cache, st = _bn_forward(z, t["fc1.bn_scale"], t["fc1.bn_shift"],
                                  t["fc1.bn_mean"], t["fc1.bn_var"], training)
    stats["fc1"] = st
    a = np.maximum(y, 0.0)
    q = a @ t["fc2.weight"] + t["fc2.bias"]
    cache = dict(convs=caches, conv_out_shape=conv_out_shape, h=h, fc1_bn=bn_cache, fc1_y=y, a=a)
    return q, cache, stats


def forward(params: NetworkParams, states) -> np.ndarray:
    """Q-values (``N x n_actions``) in inference mode."""
    q, _, _ = _forward(params, states, training=False)
    return q


def activation_shapes(params: NetworkParams, states) -> list[tuple[int, ...]]:
    """Per-sample activation shapes of one inference pass, channel-last."""
    _, cache, _ = _forward(params, states, training=False)
    shapes = []
    for _, _, y in cache["convs"]:
        n, c, h, w = y.shape
        shapes.append((h, w, c))
    shapes.append(cache["a"].shape[1:])
    shapes.append((params.profile.n_actions,))
    return shapes


def _backward(params: NetworkParams, dq, cache) -> dict[str, np.ndarray]:
    t = params.tensors
    g: dict[str, np.ndarray] = {}
    g["fc2.weight"] = cache["a"].T @ dq
    g["fc2.bias"] = dq.sum(axis=0)
    da = dq @ t["fc2.weight"].T
    dy = da * (cache["fc1_y"] > 0)
    dz, g["fc1.bn_scale"], g["fc1.bn_shift"] = _bn_backward(dy, t["fc1.bn_scale"], cache["fc1_bn"])
    g["fc1.weight"] = cache["h"].T @ dz
    g["fc1.bias"] = dz.sum(axis=0)
    dx = (dz @ t["fc1.weight"].T).reshape(cache["conv_out_shape"])
    for i in range(len(params.profile.convs), 0, -1):
        name = f"conv{i}"
        conv_cache, bn_cache, y = cache["convs"][i - 1]
        dy = dx * (y > 0)
        dz, g[f"{name}.bn_scale"], g[f"{name}.bn_shift"] = _bn_backward(
            dy, t[f"{name}.bn_scale"], bn_cache)
        dx, g[f"{name}.weight"], g[f"{name}.bias"] = _conv_backward(
            dz, t[f"{name}.weight"], params.profile.convs[i - 1], conv_cache)
    return g


# --------------------------------------------------------------------------
# Targets and loss

@dataclass
class TrainBatch:
    states: np.ndarray
    action_indices: np.ndarray
    rewards: np.ndarray
    next_states: Optional[np.ndarray]
    terminal: np.ndarray

    def __post_init__(self):
        n = len(self.action_indices)
        lens = {len(self.states), len(self.rewards), len(self.terminal), n}
        if self.next_states is not None:
            lens.add(len(self.next_states))
        if len(lens) != 1:
            raise QNetError(f"train batch fields have unequal lengths: {sorted(lens)}")


def td_targets(batch: TrainBatch, target_params: NetworkParams, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise QNetError(f"gamma must lie in [0, 1], got {gamma}")
    y = np.asarray(batch.rewards, dtype=np.float64).copy()
    live = ~np.asarray(batch.terminal, dtype=bool)
    if gamma > 0 and live.any():
        if batch.next_states is None:
            raise QNetError("non-terminal experiences need next_states")
        q_next = forward(target_params, np.asarray(batch.next_states)[live])
        y[live] += gamma * q_next.max(axis=1)
    return y


def td_loss(q_pred, action_indices, targets, weights=None) -> float:
    """Mean squared TD error at the taken actions, optionally importance-weighted."""
    q_pred = np.asarray(q_pred)
    idx = np.asarray(action_indices, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(idx) != len(q_pred) or len(targets) != len(q_pred):
        raise QNetError("q_pred, action_indices and targets must have equal length")
    if idx.size and (idx.min() < 0 or idx.max() >= q_pred.shape[1]):
        raise QNetError(f"action index out of range for {q_pred.shape[1]} actions")
    resid = targets - q_pred[np.arange(len(idx)), idx]
    w = np.ones_like(resid) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(np.mean(w * resid ** 2))


def loss_and_grads(params: NetworkParams, states, action_indices, targets, weights=None):
    """Training-mode forward/backward pass.

    Returns ``(loss, grads, batch_stats, td_errors)``; ``batch_stats`` feeds
    :func:`apply_batch_stats`.
    """
    q, cache, stats = _forward(params, states, training=True)
    idx = np.asarray(action_indices, dtype=np.int64)
    loss = td_loss(q, idx, targets, weights)
    n = len(idx)
    rows = np.arange(n)
    resid = np.asarray(targets, dtype=q.dtype) - q[rows, idx]
    w = np.ones(n, dtype=q.dtype) if weights is None else np.asarray(weights, dtype=q.dtype)
    dq = np.zeros_like(q)
    dq[rows, idx] = -2.0 * w * resid / n
    return loss, _backward(params, dq, cache), stats, resid


def apply_batch_stats(params: NetworkParams, stats, momentum: float = BN_MOMENTUM) -> None:
    for name, (mu, var, m) in stats.items():
        unbiased = var * m / (m - 1) if m > 1 else var
        t = params.tensors
        t[f"{name}.bn_mean"] *= 1.0 - momentum
        t[f"{name}.bn_mean"] += momentum * mu
        t[f"{name}.bn_var"] *= 1.0 - momentum
        t[f"{name}.bn_var"] += momentum * unbiased


# --------------------------------------------------------------------------
# Optimizer

@dataclass(eq=False)
class OptimizerState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: NetworkParams, **hyper) -> "OptimizerState":
        opt = cls(**hyper)
        for k in params.trainable():
            opt.m[k] = np.zeros_like(params.tensors[k])
            opt.v[k] = np.zeros_like(params.tensors[k])
        return opt


def adam_step(params: NetworkParams, grads: dict[str, np.ndarray], opt: OptimizerState):
    """One bias-corrected Adam update, in place. Returns ``(params, opt)``."""
    for k, g in grads.items():
        if k not in opt.m:
            raise QNetError(f"no optimizer slot for {k!r}")
        if g.shape != params.tensors[k].shape:
            raise QNetError(f"gradient for {k} has shape {g.shape}, "
                            f"parameter has {params.tensors[k].shape}")
        if not np.all(np.isfinite(g)):
            raise QNetError(f"non-finite gradient for {k}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for k, g in grads.items():
        m, v = opt.m[k], opt.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.tensors[k] -= opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params, opt


def sync_target(policy: NetworkParams, target: NetworkParams) -> None:
    if policy.profile != target.profile or policy.tensors.keys() != target.tensors.keys():
        raise QNetError("policy and target networks have different architectures")
    for k, v in policy.tensors.items():
        np.copyto(target.tensors[k], v)


# --------------------------------------------------------------------------
# Checkpoints
#
# magic, u32 version, then a parameter section and an optimizer section.
# Each section: u32 tensor count, then per tensor: u32 name length, name,
# u32 ndim, ndim x u32 dims, row-major little-endian float64 data.
# Profile and optimizer scalars are stored as a length-prefixed UTF-8
# key=value header ahead of the sections.

MAGIC = b"AMPDQNET"
VERSION = 1


class CheckpointError(QNetError):
    pass


def _write_tensors(buf, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint is truncated")
    return data


def _read_tensors(buf) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(buf, 4))
        name = _read_exact(buf, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
        shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(buf, 8 * size), dtype="<f8")
        out[name] = data.reshape(shape).astype(np.float64)
    return out


def _profile_header(p: NetworkProfile) -> str:
    convs = ";".join(f"{c.channels},{c.kernel},{c.stride},{c.padding}" for c in p.convs)
    return (f"input_side={p.input_side}\nin_channels={p.in_channels}\nconvs={convs}\n"
            f"hidden={p.hidden}\nn_actions={p.n_actions}\ndtype={p.dtype}\n")


def _parse_profile(text: str) -> NetworkProfile:
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    try:
        convs = tuple(ConvSpec(*map(int, c.split(","))) for c in kv["convs"].split(";"))
        return NetworkProfile(int(kv["input_side"]), convs, int(kv["hidden"]),
                              int(kv["n_actions"]), int(kv["in_channels"]), kv["dtype"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"bad profile header: {exc}") from None


def save_checkpoint(params: NetworkParams, opt: Optional[OptimizerState], path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    header = _profile_header(params.profile).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    _write_tensors(buf, params.tensors)
    if opt is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<Q4d", opt.step, opt.learning_rate, opt.beta1, opt.beta2, opt.eps))
        _write_tensors(buf, opt.m)
        _write_tensors(buf, opt.v)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expect: Optional[NetworkProfile] = None):
    """Read ``(params, opt)``; ``opt`` is None when none was saved.

    With ``expect`` given, the stored architecture must match it exactly.
    """
    buf = io.BytesIO(Path(path).read_bytes())
    if _read_exact(buf, len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a Q-network checkpoint")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = struct.unpack("<I", _read_exact(buf, 4))
    profile = _parse_profile(_read_exact(buf, hlen).decode("utf-8"))
    if expect is not None and expect != profile:
        raise CheckpointError(f"checkpoint architecture {profile} does not match {expect}")
    tensors = _read_tensors(buf)
    shapes = param_shapes(profile)
    if list(tensors) != list(shapes):
        raise CheckpointError("checkpoint tensor names do not match its architecture")
    for k, v in tensors.items():
        if v.shape != shapes[k]:
            raise CheckpointError(f"{k}: stored shape {v.shape} != {shapes[k]}")
    dt = np.dtype(profile.dtype)
    params = NetworkParams(profile, {k: v.astype(dt) for k, v in tensors.items()})

    flag = _read_exact(buf, 1)
    opt = None
    if flag == b"\x01":
        step, lr, b1, b2, eps = struct.unpack("<Q4d", _read_exact(buf, 40))
        m, v = _read_tensors(buf), _read_tensors(buf)
        trainable = params.trainable()
        if list(m) != trainable or list(v) != trainable:
            raise CheckpointError("optimizer moments do not match the parameters")
        opt = OptimizerState(lr, b1, b2, eps, step,
                             {k: a.astype(dt) for k, a in m.items()},
                             {k: a.astype(dt) for k, a in v.items()})
    elif flag != b"\x00":
        raise CheckpointError("corrupt optimizer section flag")
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return params, opt
