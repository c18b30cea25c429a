"""Hand-written forward/backward kernels for the fixed conv/MLP architectures.

Every layer is a pair of functions: a forward pass that returns its output
and a :class:`TapeEntry` holding whatever the backward pass needs, and a
backward pass that maps an upstream gradient to an input gradient plus
parameter gradients.  Parameters live in a :class:`ParameterStore`, a single
flat buffer with named views, so the optimizer and serialization work on
one contiguous array.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PRED_CLAMP = 1e-7
MOMENT_FLOOR = 1e-30
MOMENT_FLUSH_EVERY = 10


class ShapeError(ValueError):
    """Raised when tensors do not fit the layer or loss they are fed to."""


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParameterStore:
    """Named parameter tensors backed by one flat array, with paired gradients.

    Iteration order is the insertion order of ``shapes``; the flat layout
    (and therefore the serialized blob) follows it.
    """

    def __init__(self, shapes: Sequence[tuple[str, tuple[int, ...]]], dtype=np.float64):
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for name, shape in shapes:
            if name in self.shapes:
                raise ValueError(f"duplicate parameter name {name!r}")
            size = int(np.prod(shape))
            self.shapes[name] = tuple(shape)
            self.offsets[name] = (pos, pos + size)
            pos += size
        self.data = np.zeros(pos, dtype=dtype)
        self.grad = np.zeros(pos, dtype=dtype)
        self._touched: set[str] = set()

    def __len__(self) -> int:
        return self.data.size

    def __iter__(self):
        return iter(self.shapes)

    def __contains__(self, name: str) -> bool:
        return name in self.shapes

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi = self.offsets[name]
        return self.data[lo:hi].reshape(self.shapes[name])

    def gradient(self, name: str) -> np.ndarray:
        lo, hi = self.offsets[name]
        return self.grad[lo:hi].reshape(self.shapes[name])

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            view = self.gradient(name)
            if g.shape != view.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {view.shape}")
            # kernels may already have written into the buffer itself
            if g.ctypes.data != view.ctypes.data:
                view += g
            self._touched.add(name)

    def fresh_gradient(self, name: str) -> np.ndarray | None:
        """The zeroed gradient view of ``name`` if nothing has been accumulated
        into it since the last reset, else None.  Kernels write products
        straight into it to skip a temporary."""
        if name in self._touched:
            return None
        return self.gradient(name)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)
        self._touched.clear()

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(list(self.shapes.items()), dtype=dtype)
        out.data[:] = self.data
        return out

    def copy(self) -> "ParameterStore":
        return self.astype(self.dtype)

    def to_blob(self) -> bytes:
        """Little-endian float32 bytes in declared parameter order."""
        return self.data.astype("<f4").tobytes()

    def load_blob(self, blob: bytes) -> None:
        arr = np.frombuffer(blob, dtype="<f4")
        if arr.size != self.data.size:
            raise ShapeError(f"blob holds {arr.size} values, store expects {self.data.size}")
        self.data[:] = arr

    def digest(self) -> str:
        return hashlib.sha256(self.to_blob()).hexdigest()


def glorot_init(store: ParameterStore, rng: np.random.Generator, skip: Sequence[str] = ()) -> None:
    """Uniform +-sqrt(6/(fan_in+fan_out)) for weights, zeros for biases.

    Names ending in ``.b`` are biases.  Dense weights are (in, out); conv and
    transposed-conv weights are (k, in, out) with fans scaled by k.
    """
    for name in store:
        view = store[name]
        if name.endswith(".b") or name in skip:
            view[...] = 0.0
            continue
        shape = store.shapes[name]
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:
            fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        view[...] = rng.uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None


def adam_step(store: ParameterStore, state: AdamState) -> None:
    """Bias-corrected Adam update in place; clears the gradients afterwards."""
    if state.first_moment is None:
        state.first_moment = np.zeros_like(store.data)
        state.second_moment = np.zeros_like(store.data)
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    t = store.data.dtype.type
    _adam_kernel(store.data, store.grad, state.first_moment, state.second_moment,
                 t(state.lr / bc1), t(1.0 / math.sqrt(bc2)), t(state.beta1), t(1.0 - state.beta1),
                 t(state.beta2), t(1.0 - state.beta2), t(state.epsilon))
    if state.step % MOMENT_FLUSH_EVERY == 0:
        # moments of parameters whose gradient vanished decay geometrically
        # and would end up subnormal, where float32 arithmetic is very slow;
        # at this size their contribution to the update is nil
        for mom in (state.first_moment, state.second_moment):
            mom[np.abs(mom) < MOMENT_FLOOR] = 0
    store._touched.clear()


@numba.njit(cache=True)
def _adam_kernel(theta, g, m, v, step_size, inv_sqrt_bc2, beta1, c1, beta2, c2, eps):  # pragma: no cover
    # one fused pass: moments, bias-corrected update, gradient reset;
    # scalars arrive in the array dtype so float32 stores stay float32
    for i in range(theta.size):
        gi = g[i]
        mi = beta1 * m[i] + c1 * gi
        vi = beta2 * v[i] + c2 * gi * gi
        m[i] = mi
        v[i] = vi
        theta[i] -= step_size * mi / (np.sqrt(vi) * inv_sqrt_bc2 + eps)
        g[i] = 0


# ---------------------------------------------------------------------------
# convolution helpers
#
# Activations are time-major: (batch, time, channels).  Conv weights are
# stored (kernel, in_channels, out_channels) so the im2col product needs no
# weight transposes; transposed-conv weights use the same layout, mapping
# their own input channels to their output channels.
# ---------------------------------------------------------------------------


def same_stride_padding(length: int, kernel: int, stride: int) -> tuple[int, int]:
    """Symmetric zero padding giving ceil(length/stride) outputs."""
    out = -(-length // stride)
    total = max((out - 1) * stride + kernel - length, 0)
    return total // 2, total - total // 2


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: tuple[int, int]) -> np.ndarray:
    # (B, L, C) -> (B, out, k*C), tap-major within a window
    B, _, C = x.shape
    xp = np.pad(x, ((0, 0), pad, (0, 0)))
    win = sliding_window_view(xp, kernel, axis=1)[:, ::stride]  # (B, out, C, k)
    out = win.shape[1]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B, out, kernel * C)


def _col2im(cols: np.ndarray, length: int, kernel: int, stride: int,
            pad: tuple[int, int]) -> np.ndarray:
    # (B, out, k*C) -> (B, L, C), summing overlapping windows; adjoint of _im2col
    B, out, kc = cols.shape
    C = kc // kernel
    padded = length + pad[0] + pad[1]
    if kernel % stride == 0 and padded == stride * (out - 1) + kernel:
        reps = kernel // stride
        xp = np.zeros((B, out + reps - 1, stride, C), dtype=cols.dtype)
        c5 = cols.reshape(B, out, reps, stride, C)
        for q in range(reps):
            xp[:, q:q + out] += c5[:, :, q]
        xp = xp.reshape(B, padded, C)
    else:
        xp = np.zeros((B, padded, C), dtype=cols.dtype)
        c4 = cols.reshape(B, out, kernel, C)
        for t in range(kernel):
            xp[:, t:t + stride * (out - 1) + 1:stride] += c4[:, :, t]
    return xp[:, pad[0]:pad[0] + length]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    kind: str
    names: tuple[str, ...]
    cache: dict[str, Any] = field(default_factory=dict)


LAYER_KINDS = ("conv1d", "conv1d_transpose", "dense", "relu", "sigmoid", "flatten", "reshape")


def layer_forward(kind: str, params: ParameterStore | None, x: np.ndarray,
                  names: tuple[str, ...] = (), **config) -> tuple[np.ndarray, TapeEntry]:
    """Run one layer.  ``names`` are the (weight, bias) keys in ``params``.

    conv1d and conv1d_transpose take (B, time, channels) inputs.  The default
    padding is :func:`same_stride_padding`, so conv1d maps time L to
    ceil(L/stride) and conv1d_transpose maps L to L*stride (or ``out_len``).
    """
    if kind == "conv1d":
        W, b = params[names[0]], params[names[1]]
        stride = config.get("stride", 2)
        k, C, F = W.shape
        if x.ndim != 3 or x.shape[2] != C:
            raise ShapeError(f"conv1d expects (B, L, {C}) input, got {x.shape}")
        pad = config.get("padding") or same_stride_padding(x.shape[1], k, stride)
        cols = _im2col(x, k, stride, pad)
        y = cols @ W.reshape(k * C, F)
        y += b
        return y, TapeEntry(kind, names, dict(cols=cols, in_len=x.shape[1], stride=stride, pad=pad))
    if kind == "conv1d_transpose":
        W, b = params[names[0]], params[names[1]]
        stride = config.get("stride", 2)
        k, Fi, C = W.shape
        if x.ndim != 3 or x.shape[2] != Fi:
            raise ShapeError(f"conv1d_transpose expects (B, L, {Fi}) input, got {x.shape}")
        out_len = config.get("out_len", x.shape[1] * stride)
        pad = config.get("padding") or same_stride_padding(out_len, k, stride)
        cols = x @ W.transpose(1, 0, 2).reshape(Fi, k * C)
        y = _col2im(cols, out_len, k, stride, pad)
        y += b
        return y, TapeEntry(kind, names, dict(x=x, stride=stride, pad=pad))
    if kind == "dense":
        W, b = params[names[0]], params[names[1]]
        if x.ndim != 2 or x.shape[1] != W.shape[0]:
            raise ShapeError(f"dense expects (B, {W.shape[0]}) input, got {x.shape}")
        return x @ W + b, TapeEntry(kind, names, dict(x=x))
    if kind == "relu":
        mask = x > 0
        return x * mask, TapeEntry(kind, (), dict(mask=mask))
    if kind == "sigmoid":
        with np.errstate(over="ignore"):
            y = 1.0 / (1.0 + np.exp(-x))
        return y, TapeEntry(kind, (), dict(y=y))
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), TapeEntry(kind, (), dict(shape=x.shape))
    if kind == "reshape":
        shape = config["shape"]
        return x.reshape((x.shape[0],) + tuple(shape)), TapeEntry(kind, (), dict(shape=x.shape))
    raise ValueError(f"unknown layer kind {kind!r}")


def layer_backward(entry: TapeEntry, dy: np.ndarray, params: ParameterStore | None = None,
                   accumulate: bool = True, input_grad: bool = True
                   ) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
    """Reverse-mode step for one tape entry.

    Returns the input gradient (None when ``input_grad`` is off) and a dict
    of parameter gradients; the latter are also added into ``params`` when
    ``accumulate`` is set.
    """
    kind, c = entry.kind, entry.cache
    if dy.shape != _out_shape(entry, dy):
        raise ShapeError(f"{kind} backward got upstream gradient of shape {dy.shape}")
    grads: dict[str, np.ndarray] = {}
    dx = None
    if kind == "conv1d":
        W = params[entry.names[0]]
        k, C, F = W.shape
        B, out, _ = dy.shape
        flat = dy.reshape(B * out, F)
        grads[entry.names[0]] = _matmul_into(params, entry.names[0], accumulate,
                                             c["cols"].reshape(B * out, k * C).T, flat)
        grads[entry.names[1]] = flat.sum(axis=0)
        if input_grad:
            dx = _col2im(dy @ W.reshape(k * C, F).T, c["in_len"], k, c["stride"], c["pad"])
    elif kind == "conv1d_transpose":
        W = params[entry.names[0]]
        k, Fi, C = W.shape
        x = c["x"]
        B, L, _ = x.shape
        dcols = _im2col(dy, k, c["stride"], c["pad"])  # (B, L, k*C)
        gW = x.reshape(B * L, Fi).T @ dcols.reshape(B * L, k * C)
        grads[entry.names[0]] = gW.reshape(Fi, k, C).transpose(1, 0, 2)
        grads[entry.names[1]] = dy.sum(axis=(0, 1))
        if input_grad:
            dx = dcols @ W.transpose(1, 0, 2).reshape(Fi, k * C).T
    elif kind == "dense":
        W = params[entry.names[0]]
        grads[entry.names[0]] = _matmul_into(params, entry.names[0], accumulate, c["x"].T, dy)
        grads[entry.names[1]] = dy.sum(axis=0)
        if input_grad:
            dx = dy @ W.T
    elif kind == "relu":
        dx = dy * c["mask"]
    elif kind == "sigmoid":
        y = c["y"]
        dx = dy * y * (1.0 - y)
    elif kind in ("flatten", "reshape"):
        dx = dy.reshape(c["shape"])
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    if accumulate and params is not None and grads:
        params.accumulate(grads)
    return dx, grads


def _matmul_into(params: ParameterStore, name: str, accumulate: bool, a: np.ndarray,
                 b: np.ndarray) -> np.ndarray:
    # a @ b shaped like parameter ``name``; lands directly in its gradient
    # buffer when that is still untouched this step
    shape = params.shapes[name]
    view = params.fresh_gradient(name) if accumulate else None
    if view is None:
        return (a @ b).reshape(shape)
    np.matmul(a, b, out=view.reshape(a.shape[0], b.shape[1]))
    return view


def _out_shape(entry: TapeEntry, dy: np.ndarray) -> tuple[int, ...]:
    # expected upstream shape where the cache pins it down; otherwise accept dy
    c = entry.cache
    if entry.kind == "relu":
        return c["mask"].shape
    if entry.kind == "sigmoid":
        return c["y"].shape
    if entry.kind == "dense":
        return dy.shape if dy.ndim != 2 else (c["x"].shape[0], dy.shape[1])
    return dy.shape


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    names: tuple[str, ...] = ()
    config: tuple[tuple[str, Any], ...] = ()


def run_forward(layers: Sequence[LayerSpec], params: ParameterStore,
                x: np.ndarray) -> tuple[np.ndarray, list[TapeEntry]]:
    tape = []
    for spec in layers:
        x, entry = layer_forward(spec.kind, params, x, spec.names, **dict(spec.config))
        tape.append(entry)
    return x, tape


def run_backward(tape: Sequence[TapeEntry], dy: np.ndarray, params: ParameterStore,
                 accumulate: bool = True, input_grad: bool = True) -> np.ndarray | None:
    for i in range(len(tape) - 1, -1, -1):
        dy, _ = layer_backward(tape[i], dy, params, accumulate=accumulate,
                               input_grad=input_grad or i > 0)
    return dy


# ---------------------------------------------------------------------------
# losses: each returns (value, gradient(s)); values are reduced at float64
# ---------------------------------------------------------------------------


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def bernoulli_nll(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed Bernoulli negative log-likelihood and its gradient wrt ``pred``.

    Predictions are clamped to [1e-7, 1-1e-7]; the gradient is zero where the
    clamp is active.
    """
    _check_same(pred, target, "bernoulli_nll")
    p = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    value = -np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p), dtype=np.float64)
    grad = (p - target) / (p * (1.0 - p))
    grad[(pred < PRED_CLAMP) | (pred > 1.0 - PRED_CLAMP)] = 0.0
    return float(value), grad


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum of squared differences and its gradient wrt ``pred``."""
    _check_same(pred, target, "mse")
    d = pred - target
    return float(np.sum(d * d, dtype=np.float64)), 2.0 * d


def gaussian_kl_prior(mean: np.ndarray, logvar: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over all entries, with gradients."""
    _check_same(mean, logvar, "gaussian_kl_prior")
    ev = np.exp(logvar)
    value = 0.5 * np.sum(mean * mean + ev - logvar - 1.0, dtype=np.float64)
    return float(value), mean.copy(), 0.5 * (ev - 1.0)


def gaussian_kl_prior_per_dim(mean: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    return 0.5 * (mean * mean + np.exp(logvar) - logvar - 1.0)


def gaussian_kl_pair(mean_a: np.ndarray, logvar_a: np.ndarray, mean_b: np.ndarray,
                     logvar_b: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """KL(a || b) between diagonal Gaussians; gradients for all four inputs."""
    for other in (logvar_a, mean_b, logvar_b):
        _check_same(mean_a, other, "gaussian_kl_pair")
    va, inv_vb = np.exp(logvar_a), np.exp(-logvar_b)
    diff = mean_a - mean_b
    ratio = (va + diff * diff) * inv_vb
    value = 0.5 * np.sum(ratio - 1.0 + logvar_b - logvar_a, dtype=np.float64)
    grads = {
        "mean_a": diff * inv_vb,
        "logvar_a": 0.5 * (va * inv_vb - 1.0),
        "mean_b": -diff * inv_vb,
        "logvar_b": 0.5 * (1.0 - ratio),
    }
    return float(value), grads


def gaussian_kl_pair_per_dim(mean_a, logvar_a, mean_b, logvar_b) -> np.ndarray:
    diff = mean_a - mean_b
    return 0.5 * ((np.exp(logvar_a) + diff * diff) * np.exp(-logvar_b) - 1.0 + logvar_b - logvar_a)


def block_softmax_nll(logits: np.ndarray, target: np.ndarray,
                      blocks: Sequence[int]) -> tuple[float, np.ndarray]:
    """Categorical cross-entropy summed over consecutive softmax blocks.

    Blocks whose target slice is all zero contribute nothing.
    """
    _check_same(logits, target, "block_softmax_nll")
    total = 0.0
    grad = np.zeros_like(logits)
    lo = 0
    for width in blocks:
        sl = slice(lo, lo + width)
        z = logits[..., sl]
        z = z - z.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        t = target[..., sl]
        total -= float(np.sum(t * logp, dtype=np.float64))
        grad[..., sl] = np.exp(logp) * t.sum(axis=-1, keepdims=True) - t
        lo += width
    return total, grad


def block_softmax(logits: np.ndarray, blocks: Sequence[int]) -> list[np.ndarray]:
    out, lo = [], 0
    for width in blocks:
        z = logits[..., lo:lo + width]
        z = np.exp(z - z.max(axis=-1, keepdims=True))
        out.append(z / z.sum(axis=-1, keepdims=True))
        lo += width
    return out
