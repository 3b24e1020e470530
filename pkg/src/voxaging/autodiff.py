"""Minimal deterministic tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 for gradient checking).
Every primitive records its inputs and a backward closure on the result tensor;
`backward(loss)` replays the recorded applications in reverse creation order,
which is a valid topological order because execution is eager.

No implicit broadcasting between tensors: two-tensor elementwise ops require
identical shapes, use `broadcast_to`/`reshape` explicitly. Python scalars mix
freely with tensors and never change the dtype.
"""

from __future__ import annotations

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

# When True, every primitive asserts its output is finite. Off by default
# (costs a full pass over the data); trainers check their loss explicitly.
CHECK_FINITE = False

_GRAD_ENABLED = True
_SERIAL = 0


def _next_serial() -> int:
    global _SERIAL
    _SERIAL += 1
    return _SERIAL


class no_grad:
    """Context manager that disables graph recording (eval/generation paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional array with an optional gradient slot.

    `grad` is only ever populated on leaf tensors (those with no recorded
    parents) that have `requires_grad=True`; intermediate gradients live in
    the backward pass's working buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_op", "_serial")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None
        self._op = "leaf"
        self._serial = _next_serial()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    # operator sugar (python scalars allowed, tensor-tensor requires equal shapes)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of the primitive applications a backward pass visited.

    nodes[i] = (serial, op_name, parent_serials); parents always precede
    their consumers, and no serial appears twice.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def _as_dtype_scalar(x, dtype):
    return np.asarray(x, dtype=dtype)[()]


def _make(data: np.ndarray, parents, bwd, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._serial = _next_serial()
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape} "
                         "(no implicit broadcasting; use broadcast_to/reshape)")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = _as_dtype_scalar(b, a.data.dtype)
        return _make(a.data + s, (a,), lambda g: (g,), "add_s")
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = _as_dtype_scalar(b, a.data.dtype)
        return _make(a.data - s, (a,), lambda g: (g,), "sub_s")
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = _as_dtype_scalar(b, a.data.dtype)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_s")
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = _as_dtype_scalar(b, a.data.dtype)
        return _make(a.data / s, (a,), lambda g: (g / s,), "div_s")
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),), "sqrt")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad ** p
    return _make(out, (a,), lambda g: (g * (p * ad ** (p - 1)),), "pow")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def sigmoid(a: Tensor) -> Tensor:
    # stable two-branch logistic
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * (out * (1.0 - out)),), "sigmoid")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; subgradient 1 strictly inside, 0 outside."""
    ad_ = a.data
    out = np.clip(ad_, lo, hi)
    inside = ((ad_ > lo) & (ad_ < hi)).astype(ad_.dtype)
    return _make(out, (a,), lambda g: (g * inside,), "clip")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = np.empty_like(ad)
    pos = ad >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = ad * s
    return _make(out, (a,), lambda g: (g * (s * (1.0 + ad * (1.0 - s))),), "silu")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None) -> Tensor:
    ad = a.data
    out = np.sum(ad, axis=axis)
    shape = ad.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(ad.dtype, copy=True),)
        gx = np.expand_dims(g, axis)
        return (np.broadcast_to(gx, shape).astype(ad.dtype, copy=True),)

    return _make(np.asarray(out), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    # copy so downstream BLAS sees contiguous data
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),), "permute")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    ndiff = len(shape) - len(old)
    if ndiff < 0 or any(o != 1 and o != s for o, s in zip(old, shape[ndiff:])):
        raise ValueError(f"broadcast_to: cannot broadcast {old} to {shape}")
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    summed_axes = tuple(range(ndiff)) + tuple(
        ndiff + i for i, o in enumerate(old) if o == 1 and shape[ndiff + i] != 1
    )

    def bwd(g):
        gx = np.sum(g, axis=summed_axes, keepdims=False) if summed_axes else g
        return (gx.reshape(old),)

    return _make(out, (a,), bwd, "broadcast")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(sizes))
        )

    return _make(out, tuple(tensors), bwd, "concat")


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of `table` (first axis) at integer indices `idx`."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("take_rows: integer indices required")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"take_rows: index out of range [0, {table.data.shape[0]})")
    td = table.data
    out = td[idx]

    def bwd(g):
        gt = np.zeros_like(td)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), bwd, "take_rows")


def stop_gradient(a: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._bwd = None
    out._op = "stop_gradient"
    out._serial = _next_serial()
    return out


def straight_through(cont: Tensor, quant: Tensor) -> Tensor:
    """Identity-Jacobian estimator: forward value of `quant`, gradient of `cont`."""
    return add(cont, stop_gradient(sub(quant, cont)))


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul: operands must have rank >= 2")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul: leading dims must match exactly, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, got {ad.shape} @ {bd.shape}")
    if ad.dtype != bd.dtype:
        raise ValueError(f"matmul: dtype mismatch {ad.dtype} vs {bd.dtype}")
    out = ad @ bd

    def bwd(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _make(out, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# 3-D convolution (cross-correlation, zero padding)


def _conv3d_out_shape(sp, k, stride, pad):
    return tuple((e + 2 * pad - k) // stride + 1 for e in sp)


def _im2col(xp: np.ndarray, k: int, stride: int, out_sp) -> np.ndarray:
    cin = xp.shape[0]
    h2, w2, d2 = out_sp
    cols = np.empty((cin, k, k, k, h2, w2, d2), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, i, j, l] = xp[
                    :,
                    i : i + stride * h2 : stride,
                    j : j + stride * w2 : stride,
                    l : l + stride * d2 : stride,
                ]
    return cols.reshape(cin * k * k * k, h2 * w2 * d2)


def _col2im(dcols: np.ndarray, cin: int, k: int, stride: int, padded_sp, out_sp) -> np.ndarray:
    h2, w2, d2 = out_sp
    dc = dcols.reshape(cin, k, k, k, h2, w2, d2)
    dxp = np.zeros((cin,) + tuple(padded_sp), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dxp[
                    :,
                    i : i + stride * h2 : stride,
                    j : j + stride * w2 : stride,
                    l : l + stride * d2 : stride,
                ] += dc[:, i, j, l]
    return dxp


def conv3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Channelled 3-D cross-correlation: x (Cin,H,W,D), w (Cout,Cin,k,k,k)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 5:
        raise ValueError(f"conv3d: expected x rank 4 and w rank 5, got {xd.shape}, {wd.shape}")
    cout, cin, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if wd.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"conv3d: kernel must be cubic with odd extent, got {wd.shape[2:]}")
    if xd.shape[0] != cin:
        raise ValueError(f"conv3d: input channels {xd.shape[0]} != kernel Cin {cin}")
    if xd.dtype != wd.dtype:
        raise ValueError(f"conv3d: dtype mismatch {xd.dtype} vs {wd.dtype}")
    sp = xd.shape[1:]
    out_sp = _conv3d_out_shape(sp, k, stride, pad)
    if any(e < 1 for e in out_sp):
        raise ValueError(f"conv3d: output extents {out_sp} < 1 for input {sp}, k={k}, "
                         f"stride={stride}, pad={pad}")
    if pad:
        xp = np.zeros((cin,) + tuple(e + 2 * pad for e in sp), dtype=xd.dtype)
        xp[:, pad:pad + sp[0], pad:pad + sp[1], pad:pad + sp[2]] = xd
    else:
        xp = xd
    cols = _im2col(xp, k, stride, out_sp)
    wmat = wd.reshape(cout, cin * k * k * k)
    out = (wmat @ cols).reshape((cout,) + out_sp)
    padded_sp = xp.shape[1:]

    def bwd(g):
        gmat = g.reshape(cout, -1)
        dw = (gmat @ cols.T).reshape(wd.shape)
        dcols = wmat.T @ gmat
        dxp = _col2im(dcols, cin, k, stride, padded_sp, out_sp)
        if pad:
            dx = dxp[:, pad:pad + sp[0], pad:pad + sp[1], pad:pad + sp[2]]
        else:
            dx = dxp
        return (np.ascontiguousarray(dx), dw)

    return _make(out, (x, w), bwd, "conv3d")


# ---------------------------------------------------------------------------
# trilinear resampling


def _interp_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """Row-stochastic (dst, src) matrix for 1-D linear resampling with
    half-pixel-center coordinates: source coord of output i is
    (i + 0.5) * (src/dst) - 0.5, clamped to [0, src-1]."""
    c = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    c = np.clip(c, 0.0, float(src - 1))
    lo = np.floor(c).astype(np.int64)
    t = c - lo
    hi = np.minimum(lo + 1, src - 1)
    m = np.zeros((dst, src), dtype=np.float64)
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - t)
    np.add.at(m, (rows, hi), t)
    return m.astype(dtype, copy=False)


def resample_trilinear(x: Tensor, target) -> Tensor:
    """Resample x (C,H,W,D) to (C, *target) by separable linear interpolation."""
    target = tuple(int(e) for e in target)
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"resample_trilinear: expected rank-4 (C,H,W,D), got {xd.shape}")
    if len(target) != 3 or any(e < 1 for e in target):
        raise ValueError(f"resample_trilinear: bad target {target}")
    src = xd.shape[1:]
    if tuple(src) == target:
        return _make(xd, (x,), lambda g: (g,), "resample_id")
    mats = [None, None, None]
    for ax in range(3):
        if src[ax] != target[ax]:
            mats[ax] = _interp_matrix(src[ax], target[ax], xd.dtype)

    def apply(arr, matrices):
        for ax, m in enumerate(matrices):
            if m is None:
                continue
            moved = np.moveaxis(arr, ax + 1, 1)          # (C, src_ax, rest...)
            res = np.tensordot(m, moved, axes=([1], [1]))  # (dst_ax, C, rest...)
            res = np.moveaxis(res, 1, 0)                 # (C, dst_ax, rest...)
            arr = np.ascontiguousarray(np.moveaxis(res, 1, ax + 1))
        return arr

    out = apply(xd, mats)

    def bwd(g):
        tmats = [None if m is None else np.ascontiguousarray(m.T) for m in mats]
        return (apply(g, tmats),)

    return _make(out, (x,), bwd, "resample")


# ---------------------------------------------------------------------------
# normalization, softmax, cross-entropy


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis; no learned affine."""
    xd = x.data
    if xd.shape[-1] < 1:
        raise ValueError("layer_norm: empty last axis")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    y = xc * ivar

    def bwd(g):
        gy_mean = g.mean(axis=-1, keepdims=True)
        gyy_mean = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gy_mean - y * gyy_mean) * ivar,)

    return _make(y, (x,), bwd, "layer_norm")


def masked_softmax(x: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis after adding a non-differentiable additive
    bias (0 for allowed, -inf for disallowed positions)."""
    s = x.data
    if bias is not None:
        s = s + bias
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    z = np.sum(e, axis=-1, keepdims=True)
    p = e / z

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return ((g - dot) * p,)

    return _make(p, (x,), bwd, "masked_softmax")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]; max-subtraction stabilized."""
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be (N,V), got {ld.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != ld.shape[0]:
        raise ValueError("softmax_cross_entropy: targets must be (N,)")
    if t.dtype.kind not in "iu":
        raise TypeError("softmax_cross_entropy: integer targets required")
    n, v = ld.shape
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"softmax_cross_entropy: target outside [0, {v})")
    m = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - m)
    z = e.sum(axis=1, keepdims=True)
    logp = (ld - m) - np.log(z)
    loss = -logp[np.arange(n), t].mean()

    def bwd(g):
        p = e / z
        p[np.arange(n), t] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=ld.dtype), (logits,), bwd, "softmax_ce")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> Tape:
    """Reverse-mode accumulation from a scalar loss.

    Returns the Tape of visited applications (ordered leaf-to-loss). Gradients
    land on `.grad` of leaf tensors with requires_grad=True; contributions
    from multiple consumers sum.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad (no recorded graph)")

    # collect reachable recorded nodes; creation order is a topological order
    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._serial in seen:
            continue
        seen[t._serial] = t
        for p in t._parents:
            if p.requires_grad and p._serial not in seen:
                stack.append(p)
    order = sorted(seen.values(), key=lambda t: t._serial, reverse=True)

    grads = {loss._serial: np.ones((), dtype=loss.data.dtype)}
    nodes = []
    for t in order:
        g = grads.pop(t._serial, None)
        if g is None:
            continue  # reachable upward but received no gradient
        if t._bwd is not None:
            pgrads = t._bwd(g)
            nodes.append((t._serial, t._op, tuple(p._serial for p in t._parents)))
            for p, pg in zip(t._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._serial in grads:
                    grads[p._serial] += pg
                else:
                    grads[p._serial] = pg
        elif t.requires_grad and t._parents == ():
            t.grad = g if t.grad is None else t.grad + g
    nodes.reverse()
    return Tape(nodes)
