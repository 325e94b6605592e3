"""Dense-tensor reverse-mode differentiation core.

Tensors wrap numpy arrays (float32 by default, float64 for verification
runs).  Operations executed inside a ``Tape`` context record enough state
for one reverse pass; outside a tape they are plain numpy computations,
which is what evaluation paths use.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """Tape misuse: reuse after backward, or loss from a different tape."""


class ValidationError(ValueError):
    """Input failed a value-level contract (non-finite, bad target, ...)."""


_CHECKED = False


def set_checked(flag):
    """Enable per-op finiteness checks (verification mode)."""
    global _CHECKED
    _CHECKED = bool(flag)


class Tensor:
    """Dense array with an optional gradient slot and tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class _Record:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class _TapeStack(threading.local):
    # per-thread stack so parallel trials never see each other's tapes
    def __init__(self):
        self.stack = []


_TAPES = _TapeStack()


class Tape:
    """Ordered record of operations; supports exactly one reverse pass."""

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.node_id is None or not (0 <= loss.node_id < len(self._records)) \
                or self._records[loss.node_id].out is not loss:
            raise TapeError("loss tensor was not produced by this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            if rec.out.grad is None:
                continue
            contribs = rec.bwd(rec.out.grad)
            for t, g in zip(rec.inputs, contribs):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=t.data.dtype, copy=True)
                else:
                    t.grad += g


def backward(tape, loss):
    """Reverse-mode accumulation for a scalar loss produced on `tape`."""
    tape.backward(loss)


def _active_tape():
    return _TAPES.stack[-1] if _TAPES.stack else None


def _emit(out_data, inputs, bwd):
    if _CHECKED and not np.all(np.isfinite(out_data)):
        raise ValidationError("non-finite value produced in checked mode")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        out.node_id = len(tape._records)
        tape._records.append(_Record(out, inputs, bwd))
    return out


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# initialization


def he_init(shape, fan_in, seed, dtype=DEFAULT_DTYPE):
    """Zero-mean normal with variance 2/fan_in, deterministic given seed."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"he_init: invalid shape {shape}")
    if fan_in < 1:
        raise ValidationError(f"he_init: fan_in must be >= 1, got {fan_in}")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    std = np.sqrt(2.0 / fan_in)
    values = rng.standard_normal(shape, dtype=np.dtype(dtype)) * np.dtype(dtype).type(std)
    return Tensor(values, requires_grad=True)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=True):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b):
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def residual_add(a, b):
    """Elementwise skip-connection sum; gradient flows to both inputs."""
    _same_shape(a, b, "residual_add")
    return add(a, b)


def sub(a, b):
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape(a, b, "mul")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c):
    c = float(c)
    return _emit(a.data * a.data.dtype.type(c), (a,), lambda g: (g * a.data.dtype.type(c),))


def sum_all(a):
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _emit(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def relu(x):
    mask = x.data > 0
    return _emit(np.where(mask, x.data, x.data.dtype.type(0)), (x,),
                 lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear layers


def dense(x, W, b):
    """y = W x + b with x a vector[in] or batch [B, in]."""
    if W.data.ndim != 2:
        raise ShapeError(f"dense: W must be 2-D, got {W.data.shape}")
    out_dim, in_dim = W.data.shape
    if b.data.shape != (out_dim,):
        raise ShapeError(f"dense: b shape {b.data.shape} != ({out_dim},)")
    if x.data.ndim == 1:
        if x.data.shape[0] != in_dim:
            raise ShapeError(f"dense: x shape {x.data.shape} incompatible with W {W.data.shape}")
        y = W.data @ x.data + b.data

        def bwd(g):
            return (W.data.T @ g, np.outer(g, x.data), g)

        return _emit(y, (x, W, b), bwd)
    if x.data.ndim == 2:
        if x.data.shape[1] != in_dim:
            raise ShapeError(f"dense: x shape {x.data.shape} incompatible with W {W.data.shape}")
        y = x.data @ W.data.T + b.data

        def bwd(g):
            return (g @ W.data, g.T @ x.data, g.sum(axis=0))

        return _emit(y, (x, W, b), bwd)
    raise ShapeError(f"dense: x must be 1-D or 2-D, got {x.data.shape}")


def bias_add(x, b):
    """Add per-channel bias b[C] along the last axis of x."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"bias_add: bias {b.data.shape} vs channels {x.data.shape}")

    def bwd(g):
        return (g, g.reshape(-1, b.data.shape[0]).sum(axis=0))

    return _emit(x.data + b.data, (x, b), bwd)


def conv2d(x, K, stride=1, pad=0):
    """Cross-correlation with zero padding over HWC maps.

    x: [H, W, Cin] or [B, H, W, Cin]; K: [k, k, Cin, Cout].  Output extents
    follow floor((H + 2 pad - k) / stride) + 1 and must be positive.
    """
    if K.data.ndim != 4 or K.data.shape[0] != K.data.shape[1]:
        raise ShapeError(f"conv2d: kernel must be [k,k,Cin,Cout], got {K.data.shape}")
    k = K.data.shape[0]
    if k not in (1, 3):
        raise ShapeError(f"conv2d: kernel size {k} not in (1, 3)")
    if stride < 1 or pad < 0:
        raise ValidationError(f"conv2d: bad stride/pad ({stride}, {pad})")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got {x.data.shape}")
    cin = x.data.shape[-1]
    if cin != K.data.shape[2]:
        raise ShapeError(f"conv2d: input channels {cin} != kernel Cin {K.data.shape[2]}")
    xd = x.data if batched else x.data[None]
    B, H, W, _ = xd.shape
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output extents ({ho}, {wo})")
    if pad:
        xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    else:
        xp = xd
    sb, sh, sw, sc = xp.strides
    patches = as_strided(
        xp,
        shape=(B, ho, wo, k, k, cin),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
    )
    out = np.tensordot(patches, K.data, axes=([3, 4, 5], [0, 1, 2]))

    def bwd(g):
        gb = g if batched else g[None]
        dx, dK = _conv2d_backward(gb, xp, patches, K.data, stride, pad, H, W, ho, wo)
        return (dx if batched else dx[0], dK)

    return _emit(out if batched else out[0], (x, K), bwd)


def _conv2d_backward(g, xp, patches, K, stride, pad, H, W, ho, wo):
    """Input/kernel gradients for conv2d (g is the batched output grad)."""
    k = K.shape[0]
    dK = np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2]))
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                np.tensordot(g, K[i, j], axes=([3], [1]))
    dx = dxp[:, pad:pad + H, pad:pad + W, :] if pad else dxp
    return dx, dK


def global_avgpool(z):
    """Mean over the spatial extent of an HWC map (or batch of maps)."""
    if z.data.ndim == 3:
        axes = (0, 1)
    elif z.data.ndim == 4:
        axes = (1, 2)
    else:
        raise ShapeError(f"global_avgpool: input must be 3-D or 4-D, got {z.data.shape}")
    h, w = z.data.shape[axes[0]], z.data.shape[axes[1]]
    out = z.data.mean(axis=axes)
    inv = z.data.dtype.type(1.0 / (h * w))

    def bwd(g):
        if z.data.ndim == 3:
            expanded = np.broadcast_to(g, (h, w) + g.shape)
        else:
            expanded = np.broadcast_to(g[:, None, None, :], z.data.shape)
        return (expanded * inv,)

    return _emit(out, (z,), bwd)


# ---------------------------------------------------------------------------
# losses


def _log_softmax(s):
    m = s.max(axis=-1, keepdims=True)
    shifted = s - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(values, temperature=1.0):
    """Plain numpy softmax helper (no gradient), max-subtraction stabilized."""
    s = np.asarray(values, dtype=np.result_type(values, np.float32)) / temperature
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target, temperature=1.0):
    """-sum_c t_c log softmax(logits/T)_c, averaged over the batch.

    `target` is a class index (int, or [B] ints) or a probability vector
    shaped like the logits; probability rows must sum to 1 within 1e-6.
    """
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    ld = logits.data
    if ld.ndim not in (1, 2):
        raise ShapeError(f"softmax_cross_entropy: logits must be 1-D or 2-D, got {ld.shape}")
    nclass = ld.shape[-1]
    batch = ld.shape[0] if ld.ndim == 2 else 1

    tgt = np.asarray(target.data if isinstance(target, Tensor) else target)
    if tgt.ndim == ld.ndim and tgt.shape == ld.shape and tgt.dtype.kind == "f":
        sums = tgt.sum(axis=-1)
        if not np.all(np.abs(sums - 1.0) <= 1e-6):
            raise ValidationError("probability target rows must sum to 1 within 1e-6")
        t = tgt.astype(ld.dtype)
    else:
        idx = np.asarray(tgt, dtype=np.int64)
        if idx.ndim != ld.ndim - 1:
            raise ShapeError(f"index target shape {idx.shape} incompatible with logits {ld.shape}")
        if np.any(idx < 0) or np.any(idx >= nclass):
            raise ValidationError("class index out of range")
        t = np.zeros_like(ld)
        if ld.ndim == 1:
            t[int(idx)] = 1.0
        else:
            t[np.arange(batch), idx] = 1.0

    T = ld.dtype.type(temperature)
    s = ld / T
    ls = _log_softmax(s)
    per = -(t * ls).sum(axis=-1)
    loss = np.asarray(per.mean(), dtype=ld.dtype)
    p = np.exp(ls)

    def bwd(g):
        dl = (p - t) / T * (g / ld.dtype.type(batch))
        return (dl,)

    return _emit(loss, (logits,), bwd)


def l2_reconstruction(z, z_hat):
    """Mean over all elements of (z - z_hat)^2."""
    _same_shape(z, z_hat, "l2_reconstruction")
    diff = z.data - z_hat.data
    n = diff.size
    loss = np.asarray((diff * diff).mean(), dtype=z.data.dtype)

    def bwd(g):
        d = diff * (z.data.dtype.type(2.0 / n) * g)
        return (d, -d)

    return _emit(loss, (z, z_hat), bwd)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamSet:
    """Named parameter groups with frozen/trainable flags.

    Every tensor belongs to exactly one group.  Frozen groups receive no
    gradient and are never touched by the optimizer.
    """

    def __init__(self):
        self.groups = {}
        self.frozen = set()

    def add_group(self, name, tensors):
        if name in self.groups:
            raise ValidationError(f"duplicate parameter group '{name}'")
        tensors = list(tensors)
        seen = {id(t) for g in self.groups.values() for t in g}
        for t in tensors:
            if id(t) in seen:
                raise ValidationError("tensor already belongs to another group")
        self.groups[name] = tensors

    def group(self, name):
        return self.groups[name]

    def freeze(self, name):
        self.frozen.add(name)
        for t in self.groups[name]:
            t.requires_grad = False

    def unfreeze(self, name):
        self.frozen.discard(name)
        for t in self.groups[name]:
            t.requires_grad = True

    def tensors(self, trainable_only=False):
        out = []
        for name, group in self.groups.items():
            if trainable_only and name in self.frozen:
                continue
            out.extend(group)
        return out

    def zero_grad(self):
        for t in self.tensors():
            t.grad = None

    def clone(self):
        """Deep copy: fresh arrays, same group names and frozen set."""
        other = ParamSet()
        for name, group in self.groups.items():
            other.add_group(name, [Tensor(t.data.copy(), requires_grad=t.requires_grad)
                                   for t in group])
        for name in self.frozen:
            other.freeze(name)
        return other

    def copy_values_from(self, name, tensors):
        """Overwrite one group's values from a list of source tensors/arrays."""
        group = self.groups[name]
        if len(group) != len(tensors):
            raise ShapeError(f"group '{name}': expected {len(group)} tensors, got {len(tensors)}")
        for dst, src in zip(group, tensors):
            arr = src.data if isinstance(src, Tensor) else np.asarray(src)
            if dst.data.shape != arr.shape:
                raise ShapeError(f"group '{name}': shape mismatch {dst.data.shape} vs {arr.shape}")
            dst.data = arr.astype(dst.data.dtype, copy=True)


class SGDMomentum:
    """SGD with momentum and weight decay.

    v <- momentum * v + (grad + weight_decay * theta); theta <- theta - lr * v.
    Velocity buffers live for the lifetime of this object, i.e. one stage.
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def step(self):
        for t in self.params.tensors(trainable_only=True):
            if t.grad is None:
                raise ValidationError("optimizer step without gradients on a trainable tensor")
            v = self._velocity.get(id(t))
            dt = t.data.dtype
            g = t.grad + dt.type(self.weight_decay) * t.data
            if v is None:
                v = np.zeros_like(t.data)
                self._velocity[id(t)] = v
            v *= dt.type(self.momentum)
            v += g
            t.data -= dt.type(self.lr) * v

    def zero_grad(self):
        self.params.zero_grad()
