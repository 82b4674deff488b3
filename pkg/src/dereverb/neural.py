"""Small layer library with exact reverse-mode gradients.

Tensors are plain ``numpy`` arrays. Every layer records what it needs on
``forward`` and consumes it on ``backward``, accumulating parameter
gradients into the shared :class:`ParamStore`.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np


class ParamStore:
    """Named parameters, their gradient slots and RMSProp accumulators."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray | None] = {}
        self.state: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self.params[name] = arr
        self.grads[name] = None
        self.state[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def accumulate(self, name: str, grad: np.ndarray):
        g = self.grads[name]
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.params[name].shape:
            raise ValueError(f"gradient shape {grad.shape} != {self.params[name].shape} for {name}")
        self.grads[name] = grad.copy() if g is None else g + grad

    def zero_grad(self):
        for k in self.grads:
            self.grads[k] = None

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def assign(self, values: dict):
        """Copy values into existing parameters (name and shape must match)."""
        for name, arr in values.items():
            if name not in self.params:
                continue
            if self.params[name].shape != np.shape(arr):
                raise ValueError(f"shape mismatch for {name}: {np.shape(arr)} vs {self.params[name].shape}")
            self.params[name][...] = arr

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k, v in self.params.items():
            out.add(k, v)
            out.state[k][...] = self.state[k]
        return out


def xavier(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def he_uniform(rng, shape, fan_in):
    # variance-preserving through relu
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _sigmoid(z):
    # tanh form is overflow-free
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(z))


class Layer:
    kind = "layer"

    def __init__(self):
        self._cache = None

    def _take(self):
        if self._cache is None:
            raise RuntimeError(f"backward before forward in {self.kind} layer")
        c, self._cache = self._cache, None
        return c

    def __call__(self, x):
        return self.forward(x)


class Conv2D(Layer):
    """Stride-1 cross-correlation with zero 'same' padding on [C, H, W].

    Even kernels put the extra padding row/column after the data.
    """

    kind = "conv2d"

    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int, kh: int, kw: int, rng=None):
        super().__init__()
        if min(in_ch, out_ch, kh, kw) <= 0:
            raise ValueError("conv2d dims must be positive")
        rng = rng or np.random.default_rng(0)
        self.store, self.name = store, name
        self.in_ch, self.out_ch, self.kh, self.kw = in_ch, out_ch, kh, kw
        store.add(f"{name}/W", he_uniform(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw))
        store.add(f"{name}/b", np.zeros(out_ch))

    @property
    def pads(self):
        top, left = (self.kh - 1) // 2, (self.kw - 1) // 2
        return top, self.kh - 1 - top, left, self.kw - 1 - left

    def forward(self, x):
        x = np.asarray(x, dtype=self.store.dtype)
        if x.ndim != 3 or x.shape[0] != self.in_ch:
            raise ValueError(f"conv2d {self.name}: expected [{self.in_ch}, H, W], got {x.shape}")
        top, bottom, left, right = self.pads
        xp = np.pad(x, ((0, 0), (top, bottom), (left, right)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (self.kh, self.kw), axis=(1, 2))
        W = self.store[f"{self.name}/W"]
        out = np.tensordot(win, W, axes=([0, 3, 4], [1, 2, 3]))  # [H, W, O]
        out = np.moveaxis(out, -1, 0) + self.store[f"{self.name}/b"][:, None, None]
        self._cache = (x.shape, win)
        return out

    def backward(self, g):
        shape, win = self._take()
        W = self.store[f"{self.name}/W"]
        self.store.accumulate(f"{self.name}/W", np.tensordot(g, win, axes=([1, 2], [1, 2])))
        self.store.accumulate(f"{self.name}/b", g.sum(axis=(1, 2)))
        _, H, Wd = shape
        gp = np.pad(g, ((0, 0), (self.kh - 1, self.kh - 1), (self.kw - 1, self.kw - 1)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (self.kh, self.kw), axis=(1, 2))
        dxp = np.tensordot(gwin, W[:, :, ::-1, ::-1], axes=([0, 3, 4], [0, 2, 3]))  # [Hp, Wp, C]
        top, _, left, _ = self.pads
        return np.moveaxis(dxp, -1, 0)[:, top:top + H, left:left + Wd]


class Dense(Layer):
    """Affine map on the trailing axis."""

    kind = "fc"

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.store, self.name = store, name
        self.in_dim, self.out_dim = in_dim, out_dim
        store.add(f"{name}/W", xavier(rng, (in_dim, out_dim), in_dim, out_dim))
        store.add(f"{name}/b", np.zeros(out_dim))

    def forward(self, x):
        x = np.asarray(x, dtype=self.store.dtype)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"fc {self.name}: expected trailing dim {self.in_dim}, got {x.shape}")
        self._cache = x
        return x @ self.store[f"{self.name}/W"] + self.store[f"{self.name}/b"]

    def backward(self, g):
        x = self._take()
        x2 = x.reshape(-1, self.in_dim)
        g2 = g.reshape(-1, self.out_dim)
        self.store.accumulate(f"{self.name}/W", x2.T @ g2)
        self.store.accumulate(f"{self.name}/b", g2.sum(axis=0))
        return g @ self.store[f"{self.name}/W"].T


class LSTM(Layer):
    """Single-direction LSTM over [T, D] with gate order (i, f, g, o)."""

    kind = "lstm"

    def __init__(self, store: ParamStore, name: str, in_dim: int, units: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.store, self.name = store, name
        self.in_dim, self.units = in_dim, units
        U = units
        store.add(f"{name}/Wx", xavier(rng, (in_dim, 4 * U), in_dim, 4 * U))
        store.add(f"{name}/Wh", xavier(rng, (U, 4 * U), U, 4 * U))
        b = np.zeros(4 * U)
        b[U:2 * U] = 1.0
        store.add(f"{name}/b", b)
        self.final_state = None

    def forward(self, x, state=None):
        x = np.asarray(x, dtype=self.store.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"lstm {self.name}: expected [T, {self.in_dim}], got {x.shape}")
        T, U = x.shape[0], self.units
        dt = self.store.dtype
        Wh = self.store[f"{self.name}/Wh"]
        zx = x @ self.store[f"{self.name}/Wx"] + self.store[f"{self.name}/b"]
        # sigmoid(z) = 0.5 + 0.5 tanh(z / 2) on i, f, o; plain tanh on g
        pre = np.full(4 * U, 0.5, dtype=dt)
        pre[2 * U:3 * U] = 1.0
        add = np.full(4 * U, 0.5, dtype=dt)
        add[2 * U:3 * U] = 0.0
        h = np.zeros(U, dtype=dt) if state is None else np.asarray(state[0], dtype=dt)
        c = np.zeros(U, dtype=dt) if state is None else np.asarray(state[1], dtype=dt)
        h0, c0 = h, c
        hs = np.empty((T, U), dtype=dt)
        cs = np.empty((T, U), dtype=dt)
        gates = np.empty((T, 4 * U), dtype=dt)
        for t in range(T):
            a = np.tanh((zx[t] + h @ Wh) * pre) * pre + add
            c = a[U:2 * U] * c + a[:U] * a[2 * U:3 * U]
            h = a[3 * U:] * np.tanh(c)
            gates[t], cs[t], hs[t] = a, c, h
        self.final_state = (h.copy(), c.copy())
        self._cache = (x, h0, c0, hs, cs, gates)
        return hs

    def backward(self, g):
        x, h0, c0, hs, cs, gates = self._take()
        T, U = x.shape[0], self.units
        WhT = self.store[f"{self.name}/Wh"].T
        i, f, gg, o = (gates[:, k * U:(k + 1) * U] for k in range(4))
        tc = np.tanh(cs)
        c_prev = np.vstack([c0[None, :], cs[:-1]])
        dc_from_h = o * (1 - tc * tc)
        # d(gate pre-activation) / dc for i, f, g, and / dh for o
        via_c = np.stack([gg * i * (1 - i), c_prev * f * (1 - f), i * (1 - gg * gg)], axis=1)
        via_h = tc * o * (1 - o)
        dz = np.empty((T, 4, U), dtype=gates.dtype)
        dh_next = np.zeros(U, dtype=x.dtype)
        dc_next = np.zeros(U, dtype=x.dtype)
        for t in range(T - 1, -1, -1):
            dh = g[t] + dh_next
            dc = dc_next + dh * dc_from_h[t]
            dz[t, :3] = dc * via_c[t]
            dz[t, 3] = dh * via_h[t]
            dc_next = dc * f[t]
            dh_next = dz[t].reshape(-1) @ WhT
        dz = dz.reshape(T, 4 * U)
        h_prev = np.vstack([h0[None, :], hs[:-1]])
        self.store.accumulate(f"{self.name}/Wx", x.T @ dz)
        self.store.accumulate(f"{self.name}/Wh", h_prev.T @ dz)
        self.store.accumulate(f"{self.name}/b", dz.sum(axis=0))
        return dz @ self.store[f"{self.name}/Wx"].T


class BLSTM(Layer):
    """Bidirectional LSTM: [T, D] -> [T, 2 * units] (forward half first)."""

    kind = "blstm"

    def __init__(self, store: ParamStore, name: str, in_dim: int, units: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.name, self.in_dim, self.units = name, in_dim, units
        self.fwd = LSTM(store, f"{name}/fw", in_dim, units, rng)
        self.bwd = LSTM(store, f"{name}/bw", in_dim, units, rng)

    def forward(self, x, state=None):
        """``state`` seeds the forward direction only; the backward
        direction always starts from zeros at the end of ``x``."""
        x = np.asarray(x)
        hf = self.fwd.forward(x, state)
        hb = self.bwd.forward(x[::-1])[::-1]
        self._cache = True
        return np.concatenate([hf, hb], axis=1)

    @property
    def final_state(self):
        return self.fwd.final_state

    def backward(self, g):
        self._take()
        U = self.units
        dx = self.fwd.backward(g[:, :U])
        dx = dx + self.bwd.backward(g[::-1, U:])[::-1]
        return dx


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str):
        super().__init__()
        if fn not in ("sigmoid", "tanh", "relu"):
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x):
        if self.fn == "sigmoid":
            y = _sigmoid(np.asarray(x))
        elif self.fn == "tanh":
            y = np.tanh(x)
        else:
            y = np.maximum(x, 0)
        self._cache = (x, y)
        return y

    def backward(self, g):
        x, y = self._take()
        if self.fn == "sigmoid":
            return g * y * (1 - y)
        if self.fn == "tanh":
            return g * (1 - y * y)
        return g * (x > 0)


class Log1p(Layer):
    """Elementwise ``log(1 + x)`` compression of non-negative magnitudes."""

    kind = "log1p"

    def forward(self, x):
        x = np.asarray(x)
        self._cache = x
        return np.log1p(x)

    def backward(self, g):
        return g / (1 + self._take())


class GlobalMaxPool(Layer):
    """1-max pooling: [C, H, W] -> [C], the maximum of each feature map."""

    kind = "max_pool_1_global"

    def forward(self, x):
        x = np.asarray(x)
        flat = x.reshape(x.shape[0], -1)
        idx = np.argmax(flat, axis=1)
        self._cache = (x.shape, idx)
        return flat[np.arange(x.shape[0]), idx]

    def backward(self, g):
        shape, idx = self._take()
        out = np.zeros((shape[0], int(np.prod(shape[1:]))), dtype=np.result_type(g))
        out[np.arange(shape[0]), idx] = g
        return out.reshape(shape)


class AddChannel(Layer):
    """[T, F] -> [1, T, F]."""

    kind = "reshape"

    def forward(self, x):
        self._cache = True
        return np.asarray(x)[None]

    def backward(self, g):
        self._take()
        return g[0]


class FrameFlatten(Layer):
    """[C, T, F] -> [T, C * F], channel-major within each frame."""

    kind = "reshape"

    def forward(self, x):
        x = np.asarray(x)
        self._cache = x.shape
        return np.transpose(x, (1, 0, 2)).reshape(x.shape[1], -1)

    def backward(self, g):
        C, T, F = self._take()
        return np.transpose(g.reshape(T, C, F), (1, 0, 2))


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._cache = True
        return x

    def backward(self, g):
        self._take()
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class Concat(Layer):
    """Run branches on the same input and concatenate their outputs (axis 0)."""

    kind = "concat"

    def __init__(self, branches):
        super().__init__()
        self.branches = list(branches)

    def forward(self, x):
        outs = [b.forward(x) for b in self.branches]
        self._cache = [o.shape[0] for o in outs]
        return np.concatenate(outs, axis=0)

    def backward(self, g):
        sizes = self._take()
        dx = None
        start = 0
        for b, n in zip(self.branches, sizes):
            d = b.backward(g[start:start + n])
            dx = d if dx is None else dx + d
            start += n
        return dx


def backward(graph: Layer, loss_grad):
    """Backpropagate ``loss_grad`` through ``graph``; returns the input gradient."""
    return graph.backward(np.asarray(loss_grad))


def rmsprop_step(store: ParamStore, lr: float = 2e-4, decay: float = 0.9, eps: float = 1e-8):
    """Plain (uncentred, momentum-free) RMSProp update, then clear gradients."""
    missing = [k for k, g in store.grads.items() if g is None]
    if missing:
        raise RuntimeError(f"missing gradients for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, p in store.params.items():
        g = store.grads[name]
        acc = store.state[name]
        acc *= decay
        acc += (1 - decay) * g * g
        p -= (lr * g / np.sqrt(acc + eps)).astype(p.dtype)
    store.zero_grad()


# --- checkpoints ---------------------------------------------------------------

MAGIC = b"DRGT1"


class CheckpointError(ValueError):
    pass


def save_tensors(tensors: dict, path) -> None:
    """Write named float32 tensors in the DRGT1 layout, atomically."""
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after {count} records")
    return out


def save_params(store: ParamStore, path) -> None:
    save_tensors(store.params, path)


def load_params(path) -> ParamStore:
    store = ParamStore(np.float32)
    for name, arr in load_tensors(path).items():
        store.add(name, arr)
    return store
