"""Multi-head deep Q-network written directly in numpy.

A shared trunk of 3D convolutions (each followed by 2x2x2 max-pooling where
the spatial size allows, then a rectifier) feeds one fully connected head
per landmark task. Heads can be appended at any time without touching the
trunk or existing heads.

Tensors are channels-last internally: ``(N, X, Y, Z, C)``. Convolutions are
im2col + matmul; the im2col matrix is kept for the backward pass.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._kernels import pool_backward, pool_forward
from .errors import ConfigError, MissingHeadError, TrainingDivergenceError
from .world import N_ACTIONS, TaskId


@dataclass(frozen=True)
class NetworkArch:
    frames: int = 4
    box: tuple[int, int, int] = (15, 15, 7)
    channels: tuple[int, ...] = (8, 16, 16, 32)
    kernel: int = 3
    head_widths: tuple[int, ...] = (128, 64, N_ACTIONS)

    def spatial_shapes(self) -> list[tuple[int, int, int]]:
        """Spatial size after each conv block (conv keeps size, pool halves where >= 2)."""
        shape = tuple(self.box)
        out = []
        for _ in self.channels:
            shape = tuple(d // 2 if d >= 2 else d for d in shape)
            out.append(shape)
        return out

    @property
    def flat_width(self) -> int:
        x, y, z = self.spatial_shapes()[-1]
        return x * y * z * self.channels[-1]

    def validate(self) -> None:
        if self.kernel % 2 != 1:
            raise ConfigError("kernel size must be odd")
        if not self.head_widths or self.head_widths[-1] != N_ACTIONS:
            raise ConfigError(f"head output width must be {N_ACTIONS}")
        if len(self.box) != 3 or min(self.box) < 1 or self.frames < 1:
            raise ConfigError(f"bad input shape {self.frames}x{self.box}")
        if self.flat_width < 1:
            raise ConfigError("trunk output is empty")


@dataclass
class QNetworkParams:
    arch: NetworkArch
    trunk: list[list[np.ndarray]]
    heads: dict[TaskId, list[np.ndarray]] = field(default_factory=dict)

    @property
    def dtype(self):
        return self.trunk[0][0].dtype

    def named_tensors(self):
        """(name, array) pairs in declaration order: trunk layers, then heads in insertion order."""
        for i, (w, b) in enumerate(self.trunk):
            yield f"trunk.conv{i}.W", w
            yield f"trunk.conv{i}.b", b
        for task, layers in self.heads.items():
            for j in range(0, len(layers), 2):
                yield f"head.{task.name}.fc{j // 2}.W", layers[j]
                yield f"head.{task.name}.fc{j // 2}.b", layers[j + 1]

    def astype(self, dtype) -> "QNetworkParams":
        return QNetworkParams(
            self.arch,
            [[a.astype(dtype) for a in layer] for layer in self.trunk],
            {t: [a.astype(dtype) for a in h] for t, h in self.heads.items()},
        )


GradientSet = QNetworkParams


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _head_rng(seed: int, task: TaskId) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1 + int(task)])


def init_network(arch: NetworkArch, seed: int, tasks=(), dtype=np.float32) -> QNetworkParams:
    arch.validate()
    rng = np.random.default_rng([int(seed), 0])
    k = arch.kernel
    trunk = []
    c_in = arch.frames
    for c_out in arch.channels:
        fan_in = c_in * k**3
        trunk.append([_uniform(rng, (c_in, k, k, k, c_out), fan_in, dtype), np.zeros(c_out, dtype)])
        c_in = c_out
    params = QNetworkParams(arch, trunk)
    for t in tasks:
        add_head(params, t, seed)
    return params


def add_head(params: QNetworkParams, task: TaskId, seed: int) -> QNetworkParams:
    task = TaskId(task)
    if task in params.heads:
        raise ValueError(f"head for {task.name} already exists")
    rng = _head_rng(seed, task)
    layers = []
    width = params.arch.flat_width
    for w in params.arch.head_widths:
        layers += [_uniform(rng, (width, w), width, params.dtype), np.zeros(w, params.dtype)]
        width = w
    params.heads[task] = layers
    return params


# --- layers ---------------------------------------------------------------

def _banded_weights(w, Z):
    """Fold the z-axis of the kernel into a banded matrix.

    Returns shape (k*k*PZ*C, Z*Cout) so that one matmul against rows of
    (i, j)-shifted padded input columns produces a whole z-line of outputs.
    """
    c, k, _, _, co = w.shape
    pz = Z + k - 1
    band = np.zeros((k, k, pz, c, Z, co), dtype=w.dtype)
    wt = w.transpose(1, 2, 3, 0, 4)
    for l in range(k):
        for z in range(Z):
            band[:, :, z + l, :, z, :] = wt[:, :, l]
    return band.reshape(k * k * pz * c, Z * co)


def _conv_forward(x, w):
    n, X, Y, Z, c = x.shape
    k = w.shape[1]
    p = k // 2
    pz = Z + 2 * p
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0))).reshape(n, X + 2 * p, Y + 2 * p, pz * c)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * X * Y, k * k * pz * c)
    out = cols @ _banded_weights(w, Z)
    return out.reshape(n, X, Y, Z, -1), cols


def _conv_backward(dout, cols, w, x_shape, need_dx=True):
    n, X, Y, Z, c = x_shape
    k = w.shape[1]
    co = w.shape[-1]
    p = k // 2
    pz = Z + 2 * p
    d2 = dout.reshape(n * X * Y, Z * co)
    dband = (cols.T @ d2).reshape(k, k, pz, c, Z, co)
    dwt = np.zeros((k, k, k, c, co), dtype=dout.dtype)
    for l in range(k):
        for z in range(Z):
            dwt[:, :, l] += dband[:, :, z + l, :, z, :]
    dw = dwt.transpose(3, 0, 1, 2, 4)
    db = dout.reshape(-1, co).sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ _banded_weights(w, Z).T).reshape(n, X, Y, k, k, pz * c)
    dxp = np.zeros((n, X + 2 * p, Y + 2 * p, pz * c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + X, j:j + Y, :] += dcols[:, :, :, i, j, :]
    dxp = dxp.reshape(n, X + 2 * p, Y + 2 * p, pz, c)
    return dxp[:, p:p + X, p:p + Y, p:p + Z, :], dw, db


def _pool_factors(shape):
    return tuple(2 if d >= 2 else 1 for d in shape)


def _pool_forward(x):
    fx, fy, fz = _pool_factors(x.shape[1:4])
    return pool_forward(np.ascontiguousarray(x), fx, fy, fz)


def _pool_backward(dout, idx, x_shape):
    fx, fy, fz = _pool_factors(x_shape[1:4])
    return pool_backward(np.ascontiguousarray(dout), idx, *x_shape[1:4], fx, fy, fz)


def _to_input(frames, dtype):
    """(N, H, bx, by, bz) frame stacks -> channels-last network input."""
    x = np.asarray(frames, dtype=dtype)
    if x.ndim == 4:
        x = x[None]
    return np.ascontiguousarray(x.transpose(0, 2, 3, 4, 1))


def trunk_forward(params: QNetworkParams, x, keep=False):
    caches = []
    for w, b in params.trunk:
        conv, cols = _conv_forward(x, w)
        conv += b
        pooled, idx = _pool_forward(conv)
        act = np.maximum(pooled, 0)
        if keep:
            caches.append((x.shape, cols, conv.shape, idx, pooled))
        x = act
    return x.reshape(x.shape[0], -1), caches


def heads_forward(layers, feat, keep=False):
    acts = [feat]
    h = feat
    n = len(layers) // 2
    for j in range(n):
        h = h @ layers[2 * j] + layers[2 * j + 1]
        if j < n - 1:
            h = np.maximum(h, 0)
        acts.append(h)
    return (h, acts) if keep else h


def q_values(params: QNetworkParams, frames, tasks) -> np.ndarray:
    """Q-values for a batch of frame stacks; ``tasks`` is one TaskId or one per row."""
    x = _to_input(frames, params.dtype)
    feat, _ = trunk_forward(params, x)
    tasks = np.broadcast_to(np.asarray(tasks, dtype=np.int64), (feat.shape[0],))
    out = np.empty((feat.shape[0], N_ACTIONS), dtype=params.dtype)
    for t in np.unique(tasks):
        layers = params.heads.get(TaskId(t))
        if layers is None:
            raise MissingHeadError(f"no head for task {TaskId(t).name}")
        rows = tasks == t
        out[rows] = heads_forward(layers, feat[rows])
    return out


def forward(params: QNetworkParams, state, task: TaskId) -> np.ndarray:
    """Six action values of ``task``'s head for one AgentState (or frame stack)."""
    frames = state.frames if hasattr(state, "frames") else state
    if TaskId(task) not in params.heads:
        raise MissingHeadError(f"no head for task {TaskId(task).name}")
    return q_values(params, np.asarray(frames)[None], task)[0]


# --- loss -------------------------------------------------------------------

def huber(delta):
    a = np.abs(delta)
    return np.where(a <= 1.0, 0.5 * delta**2, a - 0.5)


def bellman_targets(target_params, frames_next, rewards, dones, tasks, gamma):
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    y = rewards.copy()
    live = ~dones
    if live.any():
        q_next = q_values(target_params, np.asarray(frames_next)[live], np.asarray(tasks)[live])
        y[live] += gamma * q_next.max(axis=1)
    return y


def loss_and_grad_arrays(params, target_params, frames, actions, rewards, frames_next, dones, tasks, gamma):
    """Mean Huber TD loss and its exact gradient for array-form batches."""
    n = len(actions)
    if n == 0:
        raise ValueError("empty batch")
    tasks = np.asarray(tasks, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    for t in np.unique(tasks):
        for p in (params, target_params):
            if TaskId(t) not in p.heads:
                raise MissingHeadError(f"no head for task {TaskId(t).name}")
    y = bellman_targets(target_params, frames_next, rewards, dones, tasks, gamma)

    x = _to_input(frames, params.dtype)
    feat, caches = trunk_forward(params, x, keep=True)
    dfeat = np.zeros_like(feat)
    grads = GradientSet(params.arch, [], {})
    loss = 0.0
    for t in np.unique(tasks):
        task = TaskId(t)
        rows = np.flatnonzero(tasks == t)
        layers = params.heads[task]
        q, acts = heads_forward(layers, feat[rows], keep=True)
        delta = q[np.arange(len(rows)), actions[rows]] - y[rows]
        loss += float(huber(delta).sum())
        dq = np.zeros_like(q)
        dq[np.arange(len(rows)), actions[rows]] = np.clip(delta, -1.0, 1.0) / n
        g = [None] * len(layers)
        dh = dq
        for j in reversed(range(len(layers) // 2)):
            g[2 * j] = acts[j].T @ dh
            g[2 * j + 1] = dh.sum(axis=0)
            dh = dh @ layers[2 * j].T
            if j > 0:
                dh = dh * (acts[j] > 0)
        dfeat[rows] = dh
        grads.heads[task] = g

    dx = dfeat.reshape(x.shape[0], *params.arch.spatial_shapes()[-1], params.arch.channels[-1])
    trunk_grads = []
    for i in reversed(range(len(params.trunk))):
        x_shape, cols, conv_shape, idx, pooled = caches[i]
        dx = dx * (pooled > 0)
        dconv = _pool_backward(dx, idx, conv_shape)
        dx, dw, db = _conv_backward(dconv, cols, params.trunk[i][0], x_shape, need_dx=i > 0)
        trunk_grads.append([dw, db])
    grads.trunk = trunk_grads[::-1]
    return loss / n, grads


def dqn_loss_and_grad(params, target_params, batch, gamma):
    """Loss and gradients for a list of Transitions carrying their frames."""
    if not batch:
        raise ValueError("empty batch")
    return loss_and_grad_arrays(
        params,
        target_params,
        np.stack([t.s.frames for t in batch]),
        [int(t.a) for t in batch],
        [t.r for t in batch],
        np.stack([t.s_next.frames for t in batch]),
        [t.done for t in batch],
        [int(t.task) for t in batch],
        gamma,
    )


# --- optimiser ----------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def optimizer_step(params: QNetworkParams, grads: GradientSet, opt_state: AdamState, lr: float):
    """One Adam update, in place. Tensors without a gradient entry are left alone."""
    grad_map = dict(grads.named_tensors())
    for name, g in grad_map.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {name}")
    for name, p in params.named_tensors():
        g = grad_map.get(name)
        if g is None:
            continue
        t = opt_state.t.get(name, 0) + 1
        m = opt_state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = opt_state.v[name]
        m *= opt_state.beta1
        m += (1 - opt_state.beta1) * g
        v *= opt_state.beta2
        v += (1 - opt_state.beta2) * g * g
        m_hat = m / (1 - opt_state.beta1**t)
        v_hat = v / (1 - opt_state.beta2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + opt_state.eps)).astype(p.dtype)
        opt_state.m[name], opt_state.v[name], opt_state.t[name] = m, v, t
    return params, opt_state


def sync_target(params: QNetworkParams) -> QNetworkParams:
    return copy.deepcopy(params)
