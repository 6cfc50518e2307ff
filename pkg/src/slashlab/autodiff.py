"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what the slot-attention model,
its refinement kernel, and the point modules need. Operations record onto
an explicit ``Tape``; ``Tape.backward`` replays the recorded entries in
reverse, which is already a valid topological order because entries are
appended as they execute.

Precision policy: arrays are float32 by default (training) or float64
(gradient checks). ``softmax`` and ``layer_norm`` accumulate internally in
float64 regardless of the input dtype, then cast back. That keeps row
sums of attention maps and simplex-kernel sums tight enough for the
constraint tolerances, and makes the zero-variance layer-norm branch
exact.

Reductions across the "competition" axis of a softmax are performed in a
canonical (sorted) order, so permuting slots permutes outputs bitwise
exactly instead of only approximately.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """N-dimensional dense array, optionally participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar; python scalars go through scale/add_scalar so they
    # never promote the array dtype.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """Named trainable tensor, optionally carrying a constraint id.

    Constraints are enforced by reparametrization (see the model module),
    so ``check_constraint`` is a verification hook rather than a projection.
    """

    __slots__ = ("name", "constraint")

    _CHECKS = {}

    def __init__(self, data, name: str, constraint: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.constraint = constraint

    def check_constraint(self) -> bool:
        if self.constraint is None:
            return True
        try:
            check = self._CHECKS[self.constraint]
        except KeyError:
            raise ConfigError(f"unknown parameter constraint {self.constraint!r}") from None
        return check(self)

    @classmethod
    def register_constraint(cls, name: str, predicate):
        cls._CHECKS[name] = predicate

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


class _Entry:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations for one forward pass. Single use:
    build, run ``backward`` once, discard."""

    def __init__(self):
        self._entries: list[_Entry] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self):
        return len(self._entries)

    def _add(self, op, inputs, output, backward):
        self._entries.append(_Entry(op, inputs, output, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> dict:
        """Accumulate gradients of ``loss`` into every requires_grad leaf.

        Returns a map {leaf tensor: gradient array} holding this pass's
        contribution. Leaf ``.grad`` attributes are accumulated (+=), so a
        caller reusing parameters across steps must zero them explicitly.
        """
        if self._consumed:
            raise UsageError("tape already consumed; build a fresh tape per step")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise UsageError("loss tensor was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}

        for entry in reversed(self._entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            input_grads = entry.backward(g)
            for t, gi in zip(entry.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in self._produced:
                    acc = grads.get(key)
                    grads[key] = gi if acc is None else acc + gi
                else:
                    leaves[key] = t
                    acc = leaf_grads.get(key)
                    leaf_grads[key] = gi if acc is None else acc + gi

        # Leaves recorded on the tape but disconnected from the loss still
        # get a (zero) gradient so downstream consumers see uniform shapes.
        for entry in self._entries:
            for t in entry.inputs:
                if t.requires_grad and id(t) not in self._produced and id(t) not in leaves:
                    leaves[id(t)] = t
                    leaf_grads[id(t)] = np.zeros_like(t.data)

        result = {}
        for key, t in leaves.items():
            g = leaf_grads[key].astype(t.dtype, copy=False)
            if g.shape != t.data.shape:
                g = g.reshape(t.data.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
            result[t] = g
        return result


def _finalize(op, inputs, out_data, backward) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1]._add(op, tuple(inputs), out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)]

    return _finalize("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)]

    return _finalize("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return [_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)]

    return _finalize("mul", (a, b), out, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return [
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ]

    return _finalize("div", (a, b), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * x.dtype.type(c)

    def bwd(g):
        return [g * c]

    return _finalize("scale", (x,), out, bwd)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data + x.dtype.type(float(c))

    def bwd(g):
        return [g]

    return _finalize("add_scalar", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    # np.maximum, not a comparison select: NaN must propagate so numeric
    # aborts upstream can see it
    out = np.maximum(x.data, x.dtype.type(0))
    mask = x.data > 0

    def bwd(g):
        return [g * mask]

    return _finalize("relu", (x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return [g * out * (1.0 - out)]

    return _finalize("sigmoid", (x,), out, bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        return [g * (1.0 - out * out)]

    return _finalize("tanh", (x,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra / shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        return [g @ bd.T, ad.T @ g]

    return _finalize("matmul", (a, b), out, bwd)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    out = x.data.T.copy()

    def bwd(g):
        return [g.T]

    return _finalize("transpose", (x,), out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        return [g.reshape(old)]

    return _finalize("reshape", (x,), out, bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    first = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != first:
            raise ShapeError(f"stack needs equal shapes, got {first} and {t.data.shape}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _finalize("stack", tuple(tensors), out, bwd)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return [np.broadcast_to(g, x.data.shape).copy()]
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, x.data.shape).copy()]

    return _finalize("sum", (x,), out, bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return [np.broadcast_to(g / count, x.data.shape).copy()]
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g / count, x.data.shape).copy()]

    return _finalize("mean", (x,), out, bwd)


# ---------------------------------------------------------------------------
# normalizations


def _sorted_sum(a: np.ndarray, axis: int) -> np.ndarray:
    # Canonical summation order: invariant under permutation along `axis`.
    return np.sort(a, axis=axis).sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int, temperature: float = 1.0) -> Tensor:
    """exp(x/temperature) normalized to sum 1 along `axis`, max-stabilized."""
    if temperature <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    z = x.data.astype(np.float64) / temperature
    z -= z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / _sorted_sum(e, axis)
    out = s.astype(x.dtype)

    def bwd(g):
        g64 = g.astype(np.float64)
        inner = (g64 * s).sum(axis=axis, keepdims=True)
        return [((s * (g64 - inner)) / temperature).astype(x.dtype)]

    return _finalize("softmax", (x,), out, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1,
               eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance along `axis`, then elementwise affine."""
    n = x.data.shape[axis]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias must have length {n}, got "
            f"{gain.data.shape} and {bias.data.shape}")
    ax = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[ax] = n

    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=ax, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g64 = gain.data.astype(np.float64).reshape(bshape)
    out = (xhat * g64 + bias.data.astype(np.float64).reshape(bshape)).astype(x.dtype)

    def bwd(g):
        gg = g.astype(np.float64)
        dxhat = gg * g64
        m1 = dxhat.mean(axis=ax, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=ax, keepdims=True)
        dx = (inv * (dxhat - m1 - xhat * m2)).astype(x.dtype)
        reduce_axes = tuple(i for i in range(x.ndim) if i != ax)
        dgain = (gg * xhat).sum(axis=reduce_axes).astype(gain.dtype)
        dbias = gg.sum(axis=reduce_axes).astype(bias.dtype)
        return [dx, dgain, dbias]

    return _finalize("layer_norm", (x, gain, bias), out, bwd)


# ---------------------------------------------------------------------------
# convolution

def _replicate_index(h: int, w: int, pad: int) -> np.ndarray:
    """Flat source index for each cell of the edge-padded (h+2p, w+2p) grid."""
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    return (rows[:, None] * w + cols[None, :])


def _check_kernel_size(s: int):
    if s % 2 != 1:
        raise ConfigError(f"convolution kernel size must be odd, got {s}")


def conv2d_single(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-size single-channel convolution with replicate (edge) padding.

    With a kernel on the probability simplex every output is a convex
    combination of inputs, which is what makes this usable as a low-pass
    refinement on attention logits.
    """
    if x.ndim != 2:
        raise ShapeError(f"conv2d_single expects H x W input, got shape {x.shape}")
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d_single kernel must be square, got {kernel.shape}")
    s = kernel.shape[0]
    _check_kernel_size(s)
    h, w = x.shape
    p = s // 2
    idx = _replicate_index(h, w, p)
    xp = x.data.reshape(-1)[idx]
    win = sliding_window_view(xp, (s, s))                       # (H, W, s, s)
    kd = kernel.data
    out = np.tensordot(win, kd, axes=([2, 3], [0, 1]))

    def bwd(g):
        dk = np.tensordot(g, win, axes=([0, 1], [0, 1])).astype(kd.dtype)
        dxp = np.zeros_like(xp)
        for a in range(s):
            for b in range(s):
                dxp[a:a + h, b:b + w] += g * kd[a, b]
        dx = np.zeros(h * w, dtype=x.dtype)
        np.add.at(dx, idx.reshape(-1), dxp.reshape(-1))
        return [dx.reshape(h, w), dk]

    return _finalize("conv2d_single", (x, kernel), out, bwd)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           pad_mode: str = "zero") -> Tensor:
    """Multi-channel stride-1 same convolution via im2col.

    x: (H, W, Cin), kernel: (s, s, Cin, Cout), bias: (Cout,) or None.
    pad_mode is "zero" (standard CNN layers) or "replicate".
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxC and sxsxCinxCout, got {x.shape}, {kernel.shape}")
    s = kernel.shape[0]
    if kernel.shape[1] != s:
        raise ShapeError(f"conv2d kernel must be square, got {kernel.shape}")
    _check_kernel_size(s)
    if kernel.shape[2] != x.shape[2]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if pad_mode not in ("zero", "replicate"):
        raise ConfigError(f"unknown pad_mode {pad_mode!r}")
    h, w, cin = x.shape
    cout = kernel.shape[3]
    p = s // 2

    if pad_mode == "zero":
        xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    else:
        xp = np.pad(x.data, ((p, p), (p, p), (0, 0)), mode="edge")
    win = sliding_window_view(xp, (s, s), axis=(0, 1))          # (H, W, Cin, s, s)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h * w, s * s * cin)
    kmat = kernel.data.reshape(s * s * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(h, w, cout)

    def bwd(g):
        gm = g.reshape(h * w, cout)
        dk = (cols.T @ gm).reshape(kernel.data.shape).astype(kernel.dtype)
        dcols = (gm @ kmat.T).reshape(h, w, s, s, cin)
        dxp = np.zeros_like(xp)
        for a in range(s):
            for b in range(s):
                dxp[a:a + h, b:b + w, :] += dcols[:, :, a, b, :]
        if pad_mode == "zero":
            dx = dxp[p:p + h, p:p + w, :]
        else:
            idx = _replicate_index(h, w, p)
            dx = np.zeros((h * w, cin), dtype=x.dtype)
            np.add.at(dx, idx.reshape(-1), dxp.reshape(-1, cin))
            dx = dx.reshape(h, w, cin)
        grads = [dx.astype(x.dtype, copy=False), dk]
        if bias is not None:
            grads.append(gm.sum(axis=0).astype(bias.dtype))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _finalize("conv2d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# recurrent cell


class GRUParams:
    """Weights of one gated recurrent unit.

    w_* map the input (D_in -> D_hid), u_* map the state (D_hid -> D_hid).
    Candidate follows the original formulation: n = tanh(x W_h + (r * h) U_h + b_h).
    """

    __slots__ = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")

    def __init__(self, w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h):
        self.w_z, self.u_z, self.b_z = w_z, u_z, b_z
        self.w_r, self.u_r, self.b_r = w_r, u_r, b_r
        self.w_h, self.u_h, self.b_h = w_h, u_h, b_h

    def tensors(self):
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_h, self.u_h, self.b_h]


def gru_cell(state: Tensor, inp: Tensor, params: GRUParams) -> Tensor:
    """Row-wise GRU update. state: (K, D_hid), inp: (K, D_in).

    Update gate at 1 returns the previous state; at 0 the candidate.
    """
    if state.shape[0] != inp.shape[0]:
        raise ShapeError(f"gru_cell row mismatch: state {state.shape}, input {inp.shape}")
    z = sigmoid(inp @ params.w_z + state @ params.u_z + params.b_z)
    r = sigmoid(inp @ params.w_r + state @ params.u_r + params.b_r)
    n = tanh(inp @ params.w_h + mul(r, state) @ params.u_h + params.b_h)
    return mul(z, state) + mul(1.0 - z, n)
