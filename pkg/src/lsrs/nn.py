"""Deterministic neural-net substrate: six layer kinds with exact gradients,
a recording tape for backprop, Adam, and a warmup-cosine schedule.

Everything is plain float32 numpy. Forward passes are pure functions of
(parameters, input); a `Tape` records the ops actually executed so
`backprop` can walk them in reverse. There is no graph compiler and no
implicit broadcasting beyond an optional leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .rng import StreamKey

DTYPE = np.float32


class ShapeError(ValueError):
    pass


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: non-finite values")


def _as_batched(x, ndim):
    """Add a leading batch axis if x has `ndim` dims; returns (x, had_batch)."""
    if x.ndim == ndim:
        return x[None], False
    if x.ndim == ndim + 1:
        return x, True
    raise ShapeError(f"expected {ndim}d or {ndim + 1}d input, got {x.ndim}d")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"

    def named_params(self):
        return [(n, getattr(self, n)) for n in self._param_names]

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, grad_out):
        """Returns (grad_input, [(param_array, param_grad), ...])."""
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"
    _param_names = ("w", "b")

    def __init__(self, in_dim, out_dim, key: StreamKey, init_scale=None):
        self.in_dim, self.out_dim = in_dim, out_dim
        scale = math.sqrt(2.0 / in_dim) if init_scale is None else init_scale
        self.w = key.child("w").normals((in_dim, out_dim), scale).astype(DTYPE)
        self.b = np.zeros(out_dim, dtype=DTYPE)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"dense: input dim {x.shape[-1]} != {self.in_dim}")
        out = x @ self.w + self.b
        return out, x

    def backward(self, cache, grad_out):
        x = cache
        x2 = x.reshape(-1, self.in_dim)
        g2 = grad_out.reshape(-1, self.out_dim)
        dw = x2.T @ g2
        db = g2.sum(axis=0)
        dx = (g2 @ self.w.T).reshape(x.shape)
        return dx, [(self.w, dw), (self.b, db)]


class Conv(Layer):
    """Same-padding, stride-1 convolution; kernel size 1 or 3, channels last."""

    _param_names = ("w", "b")

    def __init__(self, ksize, cin, cout, key: StreamKey, init_scale=None):
        if ksize not in (1, 3):
            raise ValueError(f"conv kernel size {ksize} unsupported")
        self.ksize, self.cin, self.cout = ksize, cin, cout
        self.kind = f"conv{ksize}x{ksize}"
        scale = math.sqrt(2.0 / (ksize * ksize * cin)) if init_scale is None else init_scale
        self.w = key.child("w").normals((ksize, ksize, cin, cout), scale).astype(DTYPE)
        self.b = np.zeros(cout, dtype=DTYPE)

    def _patches(self, xb):
        n, h, w, _ = xb.shape
        xp = np.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
        # (n, h, w, cin, 3, 3) -> (n*h*w, 3*3*cin) matching w.reshape(9*cin, cout)
        return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
            n * h * w, 9 * self.cin
        )

    def forward(self, x):
        if x.shape[-1] != self.cin:
            raise ShapeError(f"{self.kind}: input channels {x.shape[-1]} != {self.cin}")
        xb, had_batch = _as_batched(x, 3)
        n, h, w, _ = xb.shape
        if self.ksize == 1:
            out = xb @ self.w[0, 0] + self.b
        else:
            out = (self._patches(xb) @ self.w.reshape(9 * self.cin, self.cout)).reshape(
                n, h, w, self.cout
            ) + self.b
        return (out if had_batch else out[0]), x

    def backward(self, cache, grad_out):
        x = cache
        xb, had_batch = _as_batched(x, 3)
        gb = grad_out if had_batch else grad_out[None]
        n, h, w, _ = xb.shape
        g2 = gb.reshape(-1, self.cout)
        db = g2.sum(axis=0)
        if self.ksize == 1:
            dw = (xb.reshape(-1, self.cin).T @ g2).reshape(1, 1, self.cin, self.cout)
            dx = (g2 @ self.w[0, 0].T).reshape(xb.shape)
        else:
            dw = (self._patches(xb).T @ g2).reshape(3, 3, self.cin, self.cout)
            # grad wrt input = same-pad conv of grad_out with the kernel
            # flipped spatially and transposed in/out.
            wt = self.w[::-1, ::-1].transpose(0, 1, 3, 2)
            gp = np.pad(gb, ((0, 0), (1, 1), (1, 1), (0, 0)))
            win = np.lib.stride_tricks.sliding_window_view(gp, (3, 3), axis=(1, 2))
            cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
                n * h * w, 9 * self.cout
            )
            dx = (cols @ np.ascontiguousarray(wt).reshape(9 * self.cout, self.cin)).reshape(
                xb.shape
            )
        return (dx if had_batch else dx[0]), [(self.w, dw), (self.b, db)]


class ChannelNorm(Layer):
    """Normalizes over the channel axis at each site, learnable gain/bias."""

    kind = "channel-norm"
    _param_names = ("g", "b")

    def __init__(self, channels, eps=1e-5):
        self.channels = channels
        self.eps = eps
        self.g = np.ones(channels, dtype=DTYPE)
        self.b = np.zeros(channels, dtype=DTYPE)

    def forward(self, x):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"channel-norm: channels {x.shape[-1]} != {self.channels}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        return xhat * self.g + self.b, (xhat, inv.astype(DTYPE))

    def backward(self, cache, grad_out):
        xhat, inv = cache
        dxhat = grad_out * self.g
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        axes = tuple(range(grad_out.ndim - 1))
        return dx, [(self.g, (grad_out * xhat).sum(axis=axes)), (self.b, grad_out.sum(axis=axes))]


class LeakyRelu(Layer):
    kind = "leaky-relu"
    _param_names = ()

    def __init__(self, slope=0.01):
        self.slope = slope

    def forward(self, x):
        out = np.where(x >= 0, x, x * DTYPE(self.slope))
        return out, x >= 0

    def backward(self, cache, grad_out):
        dx = np.where(cache, grad_out, grad_out * DTYPE(self.slope))
        return dx, []


class Embedding(Layer):
    kind = "embedding"
    _param_names = ("table",)

    def __init__(self, rows, dim, key: StreamKey, init_scale=0.05):
        self.rows, self.dim = rows, dim
        self.table = key.child("table").normals((rows, dim), init_scale).astype(DTYPE)

    def forward(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.rows):
            raise ShapeError(f"embedding: id out of range [0, {self.rows})")
        return self.table[ids], ids

    def backward(self, cache, grad_out):
        ids = cache
        dt = np.zeros_like(self.table)
        np.add.at(dt, ids.reshape(-1), grad_out.reshape(-1, self.dim))
        return None, [(self.table, dt)]


def apply_layer(layer: Layer, x: np.ndarray) -> np.ndarray:
    """Single pure forward application (no recording)."""
    out, _ = layer.forward(x)
    return out


# ---------------------------------------------------------------------------
# bilinear resampling (align-corners-false, channel independent)
# ---------------------------------------------------------------------------

_INTERP_CACHE: dict = {}


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    mat = _INTERP_CACHE.get((src, dst))
    if mat is None:
        mat = np.zeros((dst, src), dtype=DTYPE)
        if src == dst:
            np.fill_diagonal(mat, 1.0)
        else:
            centers = (np.arange(dst) + 0.5) * (src / dst) - 0.5
            i0 = np.floor(centers).astype(int)
            frac = (centers - i0).astype(DTYPE)
            lo = np.clip(i0, 0, src - 1)
            hi = np.clip(i0 + 1, 0, src - 1)
            for o in range(dst):
                mat[o, lo[o]] += 1.0 - frac[o]
                mat[o, hi[o]] += frac[o]
        _INTERP_CACHE[(src, dst)] = mat
    return mat


def resize_bilinear(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Channel-independent bilinear resample; exact identity at same size."""
    if h < 1 or w < 1:
        raise ShapeError(f"resize: target {h}x{w} invalid")
    xb, had_batch = _as_batched(x, 3)
    if (xb.shape[1], xb.shape[2]) == (h, w):
        out = xb.copy()
    else:
        out = _resize_batched(xb, _interp_matrix(xb.shape[1], h), _interp_matrix(xb.shape[2], w))
    return out if had_batch else out[0]


def _resize_batched(xb, rh, rw):
    y = np.matmul(rh, xb.transpose(0, 3, 1, 2))
    y = np.matmul(y, rw.T)
    return np.ascontiguousarray(y.transpose(0, 2, 3, 1))


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Max-stabilized softmax over `axis`; rows sum to 1 within 1e-6."""
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be > 0, got {temperature}")
    z = logits / DTYPE(temperature) if logits.dtype == DTYPE else logits / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# tape + backprop
# ---------------------------------------------------------------------------


class Tape:
    """Recorded forward trace. Ops executed through the tape can be replayed
    in reverse by `backprop`; anything else is invisible to differentiation."""

    def __init__(self):
        self._entries = []
        self.output = None

    def _record(self, kind, out, payload):
        self._entries.append((kind, out, payload))
        self.output = out
        return out

    def apply(self, layer: Layer, x):
        out, cache = layer.forward(x)
        return self._record("layer", out, (layer, x, cache))

    def add(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")
        return self._record("add", a + b, (a, b))

    def site_add(self, x, v):
        """x (..., H, W, C) plus per-sample channel vector v (..., C)."""
        out = x + v[..., None, None, :]
        return self._record("site_add", out, (x, v))

    def resize_half(self, x):
        xb, had_batch = _as_batched(x, 3)
        rh = _interp_matrix(xb.shape[1], xb.shape[1] // 2)
        rw = _interp_matrix(xb.shape[2], xb.shape[2] // 2)
        out = _resize_batched(xb, rh, rw)
        out = out if had_batch else out[0]
        return self._record("resize", out, (x, rh, rw))

    def flatten(self, x):
        out = x.reshape(x.shape[0], -1)
        return self._record("flatten", out, (x,))

    def concat(self, parts):
        out = np.concatenate(parts, axis=-1)
        return self._record("concat", out, (tuple(parts),))


class Gradients:
    def __init__(self):
        self._by_id = {}

    def _acc(self, arr, grad):
        key = id(arr)
        if key in self._by_id:
            self._by_id[key] = self._by_id[key] + grad
        else:
            self._by_id[key] = grad

    def of(self, arr):
        """Gradient w.r.t. a recorded tensor (zeros if it never got one)."""
        g = self._by_id.get(id(arr))
        return np.zeros_like(arr) if g is None else g

    def for_params(self, params):
        return [self.of(p) for p in params]


def backprop(tape: Tape, upstream: np.ndarray) -> Gradients:
    """Walk the recorded trace backwards from its final output."""
    if tape.output is None:
        raise ValueError("backprop: empty trace")
    if upstream.shape != tape.output.shape:
        raise ShapeError(
            f"backprop: upstream shape {upstream.shape} != output {tape.output.shape}"
        )
    grads = Gradients()
    grads._acc(tape.output, upstream.astype(DTYPE))
    for kind, out, payload in reversed(tape._entries):
        g = grads._by_id.pop(id(out), None)
        if g is None:
            continue
        if kind == "layer":
            layer, x, cache = payload
            dx, pgrads = layer.backward(cache, g)
            if dx is not None:
                grads._acc(x, dx)
            for p, pg in pgrads:
                grads._acc(p, pg)
        elif kind == "add":
            a, b = payload
            grads._acc(a, g)
            grads._acc(b, g)
        elif kind == "site_add":
            x, v = payload
            grads._acc(x, g)
            grads._acc(v, g.sum(axis=(-3, -2)))
        elif kind == "resize":
            x, rh, rw = payload
            gb, had_batch = _as_batched(g, 3)
            dx = _resize_batched(gb, np.ascontiguousarray(rh.T), np.ascontiguousarray(rw.T))
            grads._acc(x, dx if had_batch else dx[0])
        elif kind == "flatten":
            (x,) = payload
            grads._acc(x, g.reshape(x.shape))
        elif kind == "concat":
            (parts,) = payload
            off = 0
            for p in parts:
                d = p.shape[-1]
                grads._acc(p, g[..., off : off + d])
                off += d
        else:  # pragma: no cover
            raise RuntimeError(f"unknown tape entry {kind}")
    return grads


# ---------------------------------------------------------------------------
# residual block (conv3x3, conv3x3, conv1x1 + channel-norm + leaky-relu + skip)
# ---------------------------------------------------------------------------


class ResidualBlock:
    def __init__(self, cin, cout, key: StreamKey, downsample=False):
        self.downsample = downsample
        self.conv1 = Conv(3, cin, cout, key.child("conv1"))
        self.norm1 = ChannelNorm(cout)
        self.conv2 = Conv(3, cout, cout, key.child("conv2"))
        self.norm2 = ChannelNorm(cout)
        self.conv3 = Conv(1, cout, cout, key.child("conv3"))
        self.act = LeakyRelu()
        self.skip = Conv(1, cin, cout, key.child("skip")) if cin != cout else None

    def forward(self, x, tape: Tape):
        if self.downsample:
            x = tape.resize_half(x)
        h = tape.apply(self.conv1, x)
        h = tape.apply(self.act, tape.apply(self.norm1, h))
        h = tape.apply(self.conv2, h)
        h = tape.apply(self.act, tape.apply(self.norm2, h))
        h = tape.apply(self.conv3, h)
        s = tape.apply(self.skip, x) if self.skip is not None else x
        return tape.add(h, s)

    def named_params(self, prefix=""):
        out = []
        for name in ("conv1", "norm1", "conv2", "norm2", "conv3", "skip"):
            layer = getattr(self, name)
            if layer is None:
                continue
            for pn, p in layer.named_params():
                out.append((f"{prefix}{name}.{pn}", p))
        return out


# ---------------------------------------------------------------------------
# optimizer + schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_update(params, grads, state: AdamState, rate, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam, in place. Rejects non-finite grads before mutating."""
    if rate < 0:
        raise ValueError("adam: negative rate")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam: params/grads/state length mismatch")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"adam: param {i} shape {p.shape} != grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam: non-finite gradient for param {i}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (rate * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


@dataclass(frozen=True)
class LrSchedule:
    base_rate: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ValueError("schedule: base_rate must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("schedule: need 0 <= warmup_steps < total_steps")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp 0 -> base over warmup, then half-cosine decay to 0."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"lr_at: step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        if schedule.warmup_steps == 0:
            return schedule.base_rate
        return schedule.base_rate * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.base_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(path, named_params, meta=None):
    manifest = {"layers": [{"name": n, "shape": list(p.shape)} for n, p in named_params]}
    if meta:
        manifest["meta"] = meta
    write_container(path, "checkpoint", manifest, [(n, p.astype(DTYPE)) for n, p in named_params])


def load_checkpoint(path, named_params):
    """Loads in place; the file's layer manifest must match the model's."""
    manifest, arrays = read_container(path, expect_kind="checkpoint")
    expected = [{"name": n, "shape": list(p.shape)} for n, p in named_params]
    if manifest["layers"] != expected:
        raise ValueError(f"{path}: layer manifest does not match constructed model")
    for name, p in named_params:
        p[...] = arrays[name]
    return manifest.get("meta", {})
