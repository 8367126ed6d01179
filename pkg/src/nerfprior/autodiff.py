"""Reverse-mode autodiff on dense numpy arrays.

A Tape records every differentiable op in execution order; backward() walks
the records in exact reverse order with deterministic accumulation, so two
identical tapes produce bit-identical gradients.  f32 is the training dtype;
pass float64 to Tape for gradient check mode (finite differences in f32 are
too noisy for tight tolerances).

Only the ops needed by the engine exist: affine layers, a handful of
activations, hash-table row gathers, small-kernel 2d convolution for the
denoiser, and the reductions used by volumetric rendering.  There is no
general broadcasting; the few row-wise helpers (bias add, scale_rows) keep
all shapes explicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# exp() input clamp: exp(80) ~ 5.5e34 stays finite in f32, anything larger
# would overflow transmittance math.
EXP_CLAMP = 80.0

ACTIVATION_KINDS = ("relu", "softplus", "sigmoid", "exp")


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the tape (non-scalar loss, foreign tensor, ...)."""


class Tensor:
    """Dense array plus an optional handle into the recording tape."""

    __slots__ = ("data", "tape", "node_id", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int,
                 requires_grad: bool = False):
        self.data = data
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"


@dataclass
class _Record:
    out_id: int
    input_ids: tuple[int, ...]
    backward: "callable"  # (grad_out, grads: dict[int, ndarray]) -> None


class Tape:
    """Ordered op recording with reverse-order gradient accumulation."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError("tape dtype must be float32 or float64")
        self._records: list[_Record] = []
        self._needs_grad: list[bool] = []
        self._next_id = 0

    # -- construction -----------------------------------------------------

    def _new_id(self, needs_grad: bool) -> int:
        nid = self._next_id
        self._next_id += 1
        self._needs_grad.append(needs_grad)
        return nid

    def tensor(self, data, requires_grad: bool = False) -> Tensor:
        """Wrap an array as a leaf. Trainable leaves receive .grad in backward."""
        arr = np.ascontiguousarray(data, dtype=self.dtype)
        _check_finite(arr)
        return Tensor(arr, self, self._new_id(requires_grad), requires_grad)

    def constant(self, data) -> Tensor:
        return self.tensor(data, requires_grad=False)

    def _emit(self, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
        _check_finite(data)
        needs = any(self._needs_grad[t.node_id] for t in inputs)
        out = Tensor(data, self, self._new_id(needs))
        if needs:
            self._records.append(
                _Record(out.node_id, tuple(t.node_id for t in inputs), backward))
        return out

    def _own(self, *tensors: Tensor) -> None:
        for t in tensors:
            if t.tape is not self:
                raise TapeError("tensor belongs to a different tape")

    # -- backward ---------------------------------------------------------

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every tensor that needs them.

        Returns a map node_id -> gradient array and also populates .grad on
        leaves created with requires_grad=True (call grad_of for lookups).
        """
        self._own(loss)
        if loss.data.size != 1:
            raise TapeError("loss must be scalar")
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            gout = grads.get(rec.out_id)
            if gout is None:
                continue
            rec.backward(gout, grads)
        self._last_grads = grads
        return grads

    def grad_of(self, t: Tensor) -> np.ndarray:
        """Gradient for t from the last backward; zeros if it never received one."""
        self._own(t)
        g = getattr(self, "_last_grads", {}).get(t.node_id)
        if g is None:
            g = np.zeros_like(t.data)
        if t.requires_grad:
            t.grad = g
        return g


def _check_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError("non-finite value in forward computation")


def _accum(grads: dict[int, np.ndarray], nid: int, g: np.ndarray) -> None:
    cur = grads.get(nid)
    if cur is None:
        grads[nid] = g
    else:
        cur += g


# -- elementwise arithmetic ------------------------------------------------

def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a.tape._own(a, b)
    _same_shape(a, b)

    def bwd(g, grads, ai=a.node_id, bi=b.node_id):
        _accum(grads, ai, g.copy())
        _accum(grads, bi, g.copy())

    return a.tape._emit(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a.tape._own(a, b)
    _same_shape(a, b)

    def bwd(g, grads, ai=a.node_id, bi=b.node_id):
        _accum(grads, ai, g.copy())
        _accum(grads, bi, -g)

    return a.tape._emit(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a.tape._own(a, b)
    _same_shape(a, b)
    ad, bd = a.data, b.data

    def bwd(g, grads, ai=a.node_id, bi=b.node_id):
        _accum(grads, ai, g * bd)
        _accum(grads, bi, g * ad)

    return a.tape._emit(ad * bd, (a, b), bwd)


def mul_const(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g, grads, ai=a.node_id):
        _accum(grads, ai, g * c)

    return a.tape._emit(a.data * a.tape.dtype.type(c), (a,), bwd)


def add_const(a: Tensor, c: float) -> Tensor:
    def bwd(g, grads, ai=a.node_id):
        _accum(grads, ai, g.copy())

    return a.tape._emit(a.data + a.tape.dtype.type(c), (a,), bwd)


# -- affine layer ------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[B,I] @ w[I,O] + b[O]; the single place bias broadcasting happens."""
    x.tape._own(x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("affine expects x[B,I], w[I,O], b[O]")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"affine shapes do not conform: {x.data.shape} {w.data.shape} {b.data.shape}")
    xd, wd = x.data, w.data

    def bwd(g, grads, xi=x.node_id, wi=w.node_id, bi=b.node_id):
        _accum(grads, xi, g @ wd.T)
        _accum(grads, wi, xd.T @ g)
        _accum(grads, bi, g.sum(axis=0))

    return x.tape._emit(xd @ wd + b.data, (x, w, b), bwd)


# -- activations -------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g, grads, xi=x.node_id):
        _accum(grads, xi, g * mask)

    return x.tape._emit(np.where(mask, x.data, 0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # overflow-safe logistic

    def bwd(g, grads, xi=x.node_id):
        _accum(grads, xi, g * s * (1.0 - s))

    return x.tape._emit(s, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    d = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bwd(g, grads, xi=x.node_id):
        _accum(grads, xi, g * d)

    return x.tape._emit(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    """exp with the input clamped at EXP_CLAMP; clamped region has zero grad."""
    clamped = np.minimum(x.data, EXP_CLAMP)
    out = np.exp(clamped)
    mask = x.data < EXP_CLAMP

    def bwd(g, grads, xi=x.node_id):
        _accum(grads, xi, g * out * mask)

    return x.tape._emit(out, (x,), bwd)


_ACTIVATIONS = {"relu": relu, "softplus": softplus, "sigmoid": sigmoid, "exp": exp}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None
    return fn(x)


# -- gather / structure ops ---------------------------------------------------

def gather_rows(table: Tensor, indices) -> Tensor:
    """out[k] = table[indices[k]]; backward scatter-adds duplicate rows."""
    table.tape._own(table)
    if table.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2d table")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError("gather index out of range")
    tshape = table.data.shape

    def bwd(g, grads, ti=table.node_id):
        gt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(gt, idx, g)
        _accum(grads, ti, gt)

    return table.tape._emit(table.data[idx], (table,), bwd)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    tape = tensors[0].tape
    tape._own(*tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    ids = [t.node_id for t in tensors]

    def bwd(g, grads):
        for nid, piece in zip(ids, np.split(g, splits, axis=axis)):
            _accum(grads, nid, np.ascontiguousarray(piece))

    return tape._emit(np.concatenate([t.data for t in tensors], axis=axis),
                      tuple(tensors), bwd)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis."""
    xshape = x.data.shape

    def bwd(g, grads, xi=x.node_id):
        gx = np.zeros(xshape, dtype=g.dtype)
        gx[..., start:stop] = g
        _accum(grads, xi, gx)

    return x.tape._emit(np.ascontiguousarray(x.data[..., start:stop]), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    xshape = x.data.shape

    def bwd(g, grads, xi=x.node_id):
        _accum(grads, xi, g.reshape(xshape))

    return x.tape._emit(x.data.reshape(shape), (x,), bwd)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """out[..., f] = x[..., f] * s[...]; s has x's shape minus the last axis."""
    x.tape._own(x, s)
    if s.data.shape != x.data.shape[:-1]:
        raise ShapeError(
            f"scale_rows: weights {s.data.shape} vs rows {x.data.shape}")
    xd, sd = x.data, s.data[..., None]

    def bwd(g, grads, xi=x.node_id, si=s.node_id):
        _accum(grads, xi, g * sd)
        _accum(grads, si, (g * xd).sum(axis=-1))

    return x.tape._emit(xd * sd, (x, s), bwd)


# -- reductions ---------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    xshape = x.data.shape

    def bwd(g, grads, xi=x.node_id):
        _accum(grads, xi, np.full(xshape, g.item(), dtype=g.dtype))

    return x.tape._emit(np.asarray(x.data.sum(), dtype=x.tape.dtype), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    return mul_const(sum_all(x), 1.0 / x.data.size)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    xshape = x.data.shape
    n = xshape[axis]

    def bwd(g, grads, xi=x.node_id):
        _accum(grads, xi, np.ascontiguousarray(
            np.repeat(np.expand_dims(g, axis), n, axis=axis)))

    return x.tape._emit(np.ascontiguousarray(x.data.sum(axis=axis)), (x,), bwd)


def exclusive_cumsum(x: Tensor, axis: int = -1) -> Tensor:
    """out[..., i] = sum_{j < i} x[..., j] along axis."""
    c = np.cumsum(x.data, axis=axis)
    out = np.empty_like(c)
    lead = [slice(None)] * x.data.ndim
    first, rest = list(lead), list(lead)
    first[axis], rest[axis] = slice(0, 1), slice(0, -1)
    out[tuple(first)] = 0
    shifted = [slice(None)] * x.data.ndim
    shifted[axis] = slice(1, None)
    out[tuple(shifted)] = c[tuple(rest)]

    def bwd(g, grads, xi=x.node_id):
        # d/dx_j = sum_{i > j} g_i
        flip = np.flip(g, axis=axis)
        tail = np.flip(np.cumsum(flip, axis=axis), axis=axis) - g
        _accum(grads, xi, np.ascontiguousarray(tail))

    return x.tape._emit(out, (x,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    d = sub(a, b)
    return mean_all(mul(d, d))


# -- 2d convolution (denoiser only) -------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # x[B,H,W,C] -> patches[B,H,W,k*k*C] with 'same' zero padding, stride 1
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: [B,H,W,C,k,k] -> [B,H,W,k,k,C]
    win = np.moveaxis(win, 3, 5)
    b, h, w = x.shape[:3]
    return win.reshape(b, h, w, k * k * x.shape[3])


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    # adjoint of _im2col
    b, h, w, c = shape
    p = k // 2
    out = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    cols = cols.reshape(b, h, w, k, k, c)
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + h, dx:dx + w, :] += cols[:, :, :, dy, dx, :]
    return out[:, p:p + h, p:p + w, :]


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded stride-1 convolution, x[B,H,W,Cin], w[k,k,Cin,Cout], b[Cout]."""
    x.tape._own(x, w, b)
    if w.data.ndim != 4 or w.data.shape[0] != w.data.shape[1]:
        raise ShapeError("conv2d expects a square kernel [k,k,Cin,Cout]")
    if x.data.ndim != 4 or x.data.shape[3] != w.data.shape[2]:
        raise ShapeError("conv2d channel mismatch")
    k = w.data.shape[0]
    cols = _im2col(x.data, k)
    wmat = w.data.reshape(-1, w.data.shape[3])
    out = cols @ wmat + b.data
    xshape = x.data.shape
    wshape = w.data.shape

    def bwd(g, grads, xi=x.node_id, wi=w.node_id, bi=b.node_id):
        gmat = g.reshape(-1, wshape[3])
        _accum(grads, wi,
               (cols.reshape(-1, wmat.shape[0]).T @ gmat).reshape(wshape))
        _accum(grads, bi, gmat.sum(axis=0))
        _accum(grads, xi, _col2im(g @ wmat.T, xshape, k))

    return x.tape._emit(out, (x, w, b), bwd)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling; spatial extents must be even."""
    b, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2 needs even spatial extents")
    out = x.data.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bwd(g, grads, xi=x.node_id):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        _accum(grads, xi, gx)

    return x.tape._emit(np.ascontiguousarray(out), (x,), bwd)


def upsample2(x: Tensor) -> Tensor:
    """2x nearest-neighbour upsampling."""
    b, h, w, c = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bwd(g, grads, xi=x.node_id):
        gx = g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4))
        _accum(grads, xi, gx)

    return x.tape._emit(np.ascontiguousarray(out), (x,), bwd)


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam buffers for one parameter array."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float = 1e-3,
                  beta1: float = 0.9, beta2: float = 0.99,
                  eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: np.ndarray, grad: np.ndarray,
              state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One in-place bias-corrected Adam update; returns (param, state)."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError("adam_step shape mismatch")
    state.t += 1
    tmp = grad * grad
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    tmp *= 1.0 - state.beta2
    state.v += tmp
    # param -= lr * mhat / (sqrt(vhat) + eps), built in-place in tmp
    np.divide(state.v, 1.0 - state.beta2 ** state.t, out=tmp)
    np.sqrt(tmp, out=tmp)
    tmp += state.eps
    np.divide(state.m, tmp, out=tmp)
    tmp *= state.lr / (1.0 - state.beta1 ** state.t)
    param -= tmp
    return param, state


# -- finite-difference checking ------------------------------------------------

def finite_diff_check(fn, point: np.ndarray, step: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    fn takes (tape, tensor) and returns a scalar Tensor; it must be pure.
    Runs entirely in float64.  Relative error for each coordinate is
    |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)

    tape = Tape(np.float64)
    x = tape.tensor(point, requires_grad=True)
    loss = fn(tape, x)
    tape.backward(loss)
    g_ad = tape.grad_of(x).reshape(-1)

    flat = point.reshape(-1)
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        for sign, slot in ((+1, 0), (-1, 1)):
            p = flat.copy()
            p[i] += sign * step
            t = Tape(np.float64)
            val = fn(t, t.tensor(p.reshape(point.shape))).data.item()
            if not np.isfinite(val):
                raise NonFiniteError("non-finite function value in finite differences")
            if slot == 0:
                hi = val
            else:
                lo = val
        g_fd[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1e-12, np.abs(g_ad) + np.abs(g_fd))
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(g_ad - g_fd) / denom))
