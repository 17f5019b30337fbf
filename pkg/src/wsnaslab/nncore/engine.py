"""Tape-based reverse-mode autodiff and the micro-net primitives.

Conventions:
  * activations are (N, C, H, W) or (N, C) arrays at the tape dtype,
  * every reduction (matmul contractions, means, sums) runs in float64 and
    casts back to the tape dtype,
  * convolutions are stride 1, same padding, no bias (batch-norm follows),
  * avgpool3x3 divides by 9 including zero padding, so it stays a fixed
    linear stencil and is its own transpose in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamStore

PRIMITIVES = (
    "conv3x3",
    "conv1x1",
    "avgpool3x3",
    "identity",
    "zero",
    "linear",
    "batchnorm",
    "relu",
    "global_pool",
    "concat",
    "sum",
)


class Value:
    """A node in the computation graph: array data plus a tape position."""

    __slots__ = ("data", "tape", "idx")

    def __init__(self, data: np.ndarray, tape: "Tape", idx: int):
        self.data = data
        self.tape = tape
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


class Tape:
    """Records forward ops and replays their backward closures in reverse.

    A tape is single-use: after backward() it is consumed and any further
    forward or backward call raises.
    """

    def __init__(self, store: ParamStore | None = None, dtype=None):
        self.store = store
        self.dtype = np.dtype(dtype) if dtype is not None else (store.dtype if store else np.dtype(np.float32))
        self._backward_fns: list = []
        self._grads: dict[int, np.ndarray] = {}
        self._params: dict[str, Value] = {}
        self._next = 0
        self.consumed = False

    def _check_live(self) -> None:
        if self.consumed:
            raise RuntimeError("tape reused after consumption")

    def _new_value(self, data: np.ndarray) -> Value:
        self._check_live()
        v = Value(np.asarray(data, dtype=self.dtype), self, self._next)
        self._next += 1
        return v

    def constant(self, data: np.ndarray) -> Value:
        """A node that never receives or propagates gradient."""
        return self._new_value(data)

    def input(self, data: np.ndarray) -> Value:
        """A leaf whose gradient is retrievable via input_grad()."""
        return self._new_value(data)

    def param(self, key: str) -> Value:
        """Leaf tied to a store parameter; backward accumulates store grads."""
        self._check_live()
        if self.store is None:
            raise RuntimeError("tape has no parameter store")
        if key in self._params:
            return self._params[key]
        v = self._new_value(self.store.get(key))
        store = self.store

        def backward(grads: dict[int, np.ndarray], idx=v.idx, key=key):
            g = grads.get(idx)
            if g is not None:
                store.accumulate_grad(key, g)

        self._backward_fns.append(backward)
        self._params[key] = v
        return v

    def _record(self, out: Value, backward_fn) -> Value:
        """backward_fn(d_out) -> list of (value, grad contribution)."""

        def run(grads: dict[int, np.ndarray], idx=out.idx):
            d_out = grads.get(idx)
            if d_out is None:
                return
            for value, contrib in backward_fn(d_out):
                if contrib is None:
                    continue
                prev = grads.get(value.idx)
                if prev is None:
                    grads[value.idx] = np.asarray(contrib, dtype=self.dtype)
                else:
                    grads[value.idx] = (prev.astype(np.float64) + contrib).astype(self.dtype)

        self._backward_fns.append(run)
        return out

    def backward(self, loss: Value) -> None:
        self._check_live()
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        self._grads[loss.idx] = np.ones_like(loss.data)
        for fn in reversed(self._backward_fns):
            fn(self._grads)
        self.consumed = True

    def input_grad(self, value: Value) -> np.ndarray | None:
        return self._grads.get(value.idx)

    def param_keys(self) -> list[str]:
        """Parameters this tape's forward actually touched."""
        return list(self._params)


def _tape_of(*values: Value) -> Tape:
    tape = values[0].tape
    for v in values[1:]:
        if v.tape is not tape:
            raise ValueError("values belong to different tapes")
    tape._check_live()
    return tape


def _f64(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


# ---------------------------------------------------------------- conv ops

def _im2col3(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, C, 9, H, W) of 3x3 neighborhoods, zero padded."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w), dtype=x.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di : di + h, dj : dj + w]
            k += 1
    return cols


def _col2im3(dcols: np.ndarray) -> np.ndarray:
    """Adjoint of _im2col3: scatter-add neighborhoods back."""
    n, c, _, h, w = dcols.shape
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + h, dj : dj + w] += dcols[:, :, k]
            k += 1
    return dxp[:, :, 1 : h + 1, 1 : w + 1]


def conv3x3(x: Value, weight: Value) -> Value:
    """Stride-1 same-padding 3x3 convolution, no bias."""
    tape = _tape_of(x, weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.data.shape[2:] != (3, 3):
        raise ValueError(f"conv3x3 shapes: x {x.data.shape}, weight {weight.data.shape}")
    if weight.data.shape[1] != x.data.shape[1]:
        raise ValueError(f"conv3x3 channel mismatch: x has {x.data.shape[1]}, weight expects {weight.data.shape[1]}")
    cols = _im2col3(x.data)
    w_flat = _f64(weight.data.reshape(weight.data.shape[0], weight.data.shape[1], 9))
    out = tape._new_value(np.einsum("ock,nckhw->nohw", w_flat, _f64(cols)).astype(tape.dtype))

    def backward(d_out):
        d64 = _f64(d_out)
        d_w = np.einsum("nohw,nckhw->ock", d64, _f64(cols)).reshape(weight.data.shape)
        d_x = _col2im3(np.einsum("ock,nohw->nckhw", w_flat, d64))
        return [(weight, d_w), (x, d_x)]

    return tape._record(out, backward)


def conv1x1(x: Value, weight: Value) -> Value:
    """Pointwise convolution, no bias. weight is (C_out, C_in)."""
    tape = _tape_of(x, weight)
    if x.data.ndim != 4 or weight.data.ndim != 2:
        raise ValueError(f"conv1x1 shapes: x {x.data.shape}, weight {weight.data.shape}")
    if weight.data.shape[1] != x.data.shape[1]:
        raise ValueError(f"conv1x1 channel mismatch: x has {x.data.shape[1]}, weight expects {weight.data.shape[1]}")
    out = tape._new_value(np.einsum("oc,nchw->nohw", _f64(weight.data), _f64(x.data)).astype(tape.dtype))

    def backward(d_out):
        d64 = _f64(d_out)
        d_w = np.einsum("nohw,nchw->oc", d64, _f64(x.data))
        d_x = np.einsum("oc,nohw->nchw", _f64(weight.data), d64)
        return [(weight, d_w), (x, d_x)]

    return tape._record(out, backward)


def avgpool3x3(x: Value) -> Value:
    """3x3 mean pooling, stride 1, zero padding counted in the mean."""
    tape = _tape_of(x)
    if x.data.ndim != 4:
        raise ValueError(f"avgpool3x3 needs a 4-d input, got {x.data.shape}")

    def stencil(a: np.ndarray) -> np.ndarray:
        return (_f64(_im2col3(a)).sum(axis=2) / 9.0).astype(tape.dtype)

    out = tape._new_value(stencil(x.data))

    def backward(d_out):
        return [(x, stencil(d_out))]

    return tape._record(out, backward)


def identity_op(x: Value) -> Value:
    return x


def zero_op(x: Value) -> Value:
    """Constant zeros with the input's shape; kills gradient flow."""
    tape = _tape_of(x)
    return tape.constant(np.zeros_like(x.data))


def linear(x: Value, weight: Value, bias: Value) -> Value:
    """x (N, C) @ weight (C, K) + bias (K)."""
    tape = _tape_of(x, weight, bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(f"linear shapes: x {x.data.shape}, weight {weight.data.shape}")
    out = tape._new_value((_f64(x.data) @ _f64(weight.data) + _f64(bias.data)).astype(tape.dtype))

    def backward(d_out):
        d64 = _f64(d_out)
        return [
            (weight, _f64(x.data).T @ d64),
            (bias, d64.sum(axis=0)),
            (x, d64 @ _f64(weight.data).T),
        ]

    return tape._record(out, backward)


def relu(x: Value) -> Value:
    tape = _tape_of(x)
    mask = x.data > 0
    out = tape._new_value(np.where(mask, x.data, 0))

    def backward(d_out):
        return [(x, np.where(mask, d_out, 0))]

    return tape._record(out, backward)


def global_pool(x: Value) -> Value:
    """Spatial mean: (N, C, H, W) -> (N, C)."""
    tape = _tape_of(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_pool needs a 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = tape._new_value(_f64(x.data).mean(axis=(2, 3)).astype(tape.dtype))

    def backward(d_out):
        d_x = np.broadcast_to(_f64(d_out)[:, :, None, None] / (h * w), (n, c, h, w))
        return [(x, d_x)]

    return tape._record(out, backward)


def sum_tensors(xs: list[Value]) -> Value:
    """Elementwise sum of equal-shape tensors."""
    if not xs:
        raise ValueError("sum of no tensors")
    tape = _tape_of(*xs)
    shape = xs[0].data.shape
    for v in xs[1:]:
        if v.data.shape != shape:
            raise ValueError(f"sum shape mismatch: {shape} vs {v.data.shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for v in xs:
        acc += _f64(v.data)
    out = tape._new_value(acc.astype(tape.dtype))

    def backward(d_out):
        return [(v, d_out) for v in xs]

    return tape._record(out, backward)


def concat_channels(xs: list[Value]) -> Value:
    """Concatenate along the channel axis (axis 1)."""
    if not xs:
        raise ValueError("concat of no tensors")
    tape = _tape_of(*xs)
    out = tape._new_value(np.concatenate([v.data for v in xs], axis=1))
    widths = [v.data.shape[1] for v in xs]

    def backward(d_out):
        pieces = []
        start = 0
        for v, width in zip(xs, widths):
            pieces.append((v, d_out[:, start : start + width]))
            start += width
        return pieces

    return tape._record(out, backward)


def channel_pad(x: Value, target: int, axis: int = 1) -> Value:
    """Zero-pad along `axis` up to `target` entries."""
    tape = _tape_of(x)
    current = x.data.shape[axis]
    if current > target:
        raise ValueError(f"channel_pad cannot shrink {current} -> {target}")
    if current == target:
        return x
    pad = [(0, 0)] * x.data.ndim
    pad[axis] = (0, target - current)
    out = tape._new_value(np.pad(x.data, pad))

    def backward(d_out):
        sl = [slice(None)] * x.data.ndim
        sl[axis] = slice(0, current)
        return [(x, d_out[tuple(sl)])]

    return tape._record(out, backward)


def take_axis(x: Value, indices: np.ndarray, axis: int) -> Value:
    """Gather along an axis; backward scatter-adds."""
    tape = _tape_of(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = tape._new_value(np.take(x.data, idx, axis=axis))

    def backward(d_out):
        d_x = np.zeros(x.data.shape, dtype=np.float64)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = idx
        np.add.at(d_x, tuple(sl), _f64(d_out))
        return [(x, d_x)]

    return tape._record(out, backward)


def mix_axis(x: Value, mat: np.ndarray, axis: int) -> Value:
    """Linear map along an axis with a constant matrix (rows = outputs)."""
    tape = _tape_of(x)
    m64 = _f64(mat)
    if m64.shape[1] != x.data.shape[axis]:
        raise ValueError(f"mix_axis: matrix {m64.shape} does not match axis size {x.data.shape[axis]}")
    out_data = np.moveaxis(np.tensordot(m64, _f64(x.data), axes=([1], [axis])), 0, axis).astype(tape.dtype)
    out = tape._new_value(out_data)

    def backward(d_out):
        d_x = np.moveaxis(np.tensordot(m64.T, _f64(d_out), axes=([1], [axis])), 0, axis)
        return [(x, d_x)]

    return tape._record(out, backward)


def mul_mask(x: Value, mask: np.ndarray) -> Value:
    """Multiply by a constant mask (dropout / path gating)."""
    tape = _tape_of(x)
    m = np.asarray(mask, dtype=tape.dtype)
    out = tape._new_value(x.data * m)

    def backward(d_out):
        return [(x, d_out * m)]

    return tape._record(out, backward)


def scale_channels(x: Value, factor: float) -> Value:
    """Multiply by a scalar constant."""
    return mul_mask(x, np.asarray(factor))


def reshape(x: Value, shape: tuple[int, ...]) -> Value:
    tape = _tape_of(x)
    out = tape._new_value(x.data.reshape(shape))

    def backward(d_out):
        return [(x, d_out.reshape(x.data.shape))]

    return tape._record(out, backward)


def matmul2d(a: Value, b: Value) -> Value:
    """Plain matrix product of two 2-d Values."""
    tape = _tape_of(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul2d shapes: {a.data.shape} @ {b.data.shape}")
    out = tape._new_value((_f64(a.data) @ _f64(b.data)).astype(tape.dtype))

    def backward(d_out):
        d64 = _f64(d_out)
        return [(a, d64 @ _f64(b.data).T), (b, _f64(a.data).T @ d64)]

    return tape._record(out, backward)


def reduce_sum(x: Value) -> Value:
    """Sum of all elements (float64 accumulation), as a scalar node."""
    tape = _tape_of(x)
    out = tape._new_value(np.asarray(_f64(x.data).sum()))

    def backward(d_out):
        return [(x, np.broadcast_to(_f64(d_out), x.data.shape))]

    return tape._record(out, backward)


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float) -> np.ndarray:
    """Inverted dropout mask: 0 with probability rate, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return np.ones(shape, dtype=np.float32)
    keep = rng.random(shape) >= rate
    return keep.astype(np.float32) / np.float32(1.0 - rate)


# ---------------------------------------------------------------- batchnorm

@dataclass
class BNState:
    """One batch-normalization site backed by store entries.

    Store keys under `key`: "/scale" and "/shift" when affine, "/mean" and
    "/var" running buffers when track. `momentum` is the running-average
    keep rate: mu_hat <- momentum * mu_hat + (1 - momentum) * batch_mean.
    """

    key: str
    channels: int
    affine: bool = True
    track: bool = True
    momentum: float = 0.9
    eps: float = 1e-5

    def create_params(self, store: ParamStore) -> None:
        if self.affine:
            store.create(self.key + "/scale", (self.channels,), init="ones")
            store.create(self.key + "/shift", (self.channels,), init="zeros")
        if self.track:
            store.create(self.key + "/mean", (self.channels,), init="zeros")
            store.create(self.key + "/var", (self.channels,), init="ones")


def batchnorm(x: Value, state: BNState, train: bool, bn_mode: str = "batch") -> Value:
    """Normalize per channel.

    train=True always uses batch statistics and updates running buffers when
    the state tracks them. train=False uses batch statistics when
    bn_mode="batch" (no buffer update) or the running buffers when
    bn_mode="tracked" (requires state.track).

    When x has fewer channels than the state (dynamic slicing), the leading
    [0:C] entries of the affine/running vectors are used and updated.
    """
    tape = _tape_of(x)
    store = tape.store
    if store is None:
        raise RuntimeError("batchnorm needs a tape with a parameter store")
    if bn_mode not in ("batch", "tracked"):
        raise ValueError(f"unknown bn_mode {bn_mode!r}")
    if x.data.ndim not in (2, 4):
        raise ValueError(f"batchnorm needs a 2-d or 4-d input, got {x.data.shape}")
    c = x.data.shape[1]
    if c > state.channels:
        raise ValueError(f"batchnorm input has {c} channels, state allocates {state.channels}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    use_batch = train or bn_mode == "batch"

    if use_batch:
        if x.data.shape[0] < 2:
            raise ValueError("batch statistics need batch size >= 2")
        x64 = _f64(x.data)
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        if train and state.track:
            mu = store.get(state.key + "/mean")
            sig = store.get(state.key + "/var")
            g = state.momentum
            mu[:c] = (g * _f64(mu[:c]) + (1 - g) * mean).astype(mu.dtype)
            sig[:c] = (g * _f64(sig[:c]) + (1 - g) * var).astype(sig.dtype)
    else:
        if not state.track:
            raise ValueError(f"tracked evaluation requested but {state.key!r} tracks no statistics")
        mean = _f64(store.get(state.key + "/mean")[:c])
        var = _f64(store.get(state.key + "/var")[:c])

    shape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (_f64(x.data) - mean.reshape(shape)) * inv_std.reshape(shape)

    scale_v = shift_v = None
    if state.affine:
        scale_full = tape.param(state.key + "/scale")
        shift_full = tape.param(state.key + "/shift")
        if c < state.channels:
            scale_v = take_axis(scale_full, np.arange(c), 0)
            shift_v = take_axis(shift_full, np.arange(c), 0)
        else:
            scale_v, shift_v = scale_full, shift_full
        out_data = (x_hat * _f64(scale_v.data).reshape(shape) + _f64(shift_v.data).reshape(shape)).astype(tape.dtype)
    else:
        out_data = x_hat.astype(tape.dtype)

    out = tape._new_value(out_data)
    n_eff = int(np.prod([x.data.shape[a] for a in axes]))

    def backward(d_out):
        d64 = _f64(d_out)
        grads = []
        if state.affine:
            grads.append((scale_v, (d64 * x_hat).sum(axis=axes)))
            grads.append((shift_v, d64.sum(axis=axes)))
            d_hat = d64 * _f64(scale_v.data).reshape(shape)
        else:
            d_hat = d64
        if use_batch:
            m1 = d_hat.mean(axis=axes).reshape(shape)
            m2 = (d_hat * x_hat).mean(axis=axes).reshape(shape)
            d_x = inv_std.reshape(shape) * (d_hat - m1 - x_hat * m2)
        else:
            d_x = d_hat * inv_std.reshape(shape)
        grads.append((x, d_x))
        return grads

    return tape._record(out, backward)


# ------------------------------------------------------------------- loss

def cross_entropy(logits: Value, labels: np.ndarray) -> Value:
    """Mean softmax cross-entropy over the batch. labels are int class ids."""
    tape = _tape_of(logits)
    y = np.asarray(labels)
    n = logits.data.shape[0]
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match batch {n}")
    z = _f64(logits.data)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    loss = -log_p[np.arange(n), y].mean()
    out = tape._new_value(np.asarray(loss))
    softmax = np.exp(log_p)

    def backward(d_out):
        d = softmax.copy()
        d[np.arange(n), y] -= 1.0
        return [(logits, d * (_f64(d_out) / n))]

    return tape._record(out, backward)


# -------------------------------------------------------------- dispatcher

def apply_primitive(kind: str, x, params: dict | None = None, train: bool = True, bn_mode: str = "batch"):
    """Uniform entry point over the primitive vocabulary.

    `x` is a Value (or a list of Values for concat / sum). `params` carries
    whatever the kind needs: {"weight": Value} for convs, {"weight": Value,
    "bias": Value} for linear, {"state": BNState} for batchnorm.
    """
    params = params or {}
    if kind == "conv3x3":
        return conv3x3(x, params["weight"])
    if kind == "conv1x1":
        return conv1x1(x, params["weight"])
    if kind == "avgpool3x3":
        return avgpool3x3(x)
    if kind == "identity":
        return identity_op(x)
    if kind == "zero":
        return zero_op(x)
    if kind == "linear":
        return linear(x, params["weight"], params["bias"])
    if kind == "batchnorm":
        return batchnorm(x, params["state"], train=train, bn_mode=bn_mode)
    if kind == "relu":
        return relu(x)
    if kind == "global_pool":
        return global_pool(x)
    if kind == "concat":
        return concat_channels(list(x))
    if kind == "sum":
        return sum_tensors(list(x))
    raise ValueError(f"unknown primitive kind {kind!r}")
