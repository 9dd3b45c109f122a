"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Every value is a row-major float64 numpy array wrapped in a Tensor.  Ops
executed inside a `with Tape():` block append nodes to that tape; grad()
replays the nodes in reverse append order, so each node is visited exactly
once and topological order falls out of the recording order.  Elementwise
arithmetic supports equal shapes, python scalars, and trailing-axis
vectors (bias adds); there is no general broadcasting.

Conventions baked in here and relied on everywhere else:
  - |x| has subgradient 0 at exactly 0, and sqrt/L2-norm backward is
    guarded the same way, so L1/L2 losses are safe at a perfect fit.
  - bilinear_sample clamps out-of-range coordinates to the border
    (clamp-to-edge) and its coordinate gradient is 0 where clamped.
"""

import struct

import numpy as np

_TAPE_STACK = []


class TapeError(RuntimeError):
    pass


class Tape:
    """Append-only op record; also a context manager selecting itself active."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def reset(self):
        self.nodes.clear()


class no_grad:
    """Context manager: ops inside record nothing even if a tape is active."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tensor:
    __slots__ = ("data", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return "Tensor(%r, requires_grad=%r)" % (self.data, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def record(data, inputs, bwd):
    """Build the output Tensor for a primitive op and register it on the
    active tape when any input participates in the gradient graph.

    bwd(g) must return a tuple of gradient arrays (or None) aligned with
    `inputs`; it runs at most once.
    """
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(out, inputs, bwd))
    return out


def _unbroadcast(g, shape):
    # reduce a broadcasted gradient back to the operand's shape
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_elementwise(a, b):
    # equal shapes, scalar-with-tensor, a trailing-axis vector (bias), or
    # same-rank shapes differing only on size-1 axes (keepdims statistics)
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    if len(sa) == len(sb) and all(x == y or 1 in (x, y) for x, y in zip(sa, sb)):
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if big[len(big) - len(small):] == small:
        return
    raise ValueError("incompatible shapes for elementwise op: %s vs %s" % (sa, sb))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record(data, (a, b), bwd)


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record(data, (a, b), bwd)


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)
    da, db = a.data, b.data
    data = da * db

    def bwd(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return record(data, (a, b), bwd)


def divide(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)
    da, db = a.data, b.data
    data = da / db

    def bwd(g):
        return (_unbroadcast(g / db, da.shape),
                _unbroadcast(-g * da / (db * db), db.shape))

    return record(data, (a, b), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands, got %s @ %s" % (a.shape, b.shape))
    da, db = a.data, b.data
    data = da @ db

    def bwd(g):
        return g @ db.T, da.T @ g

    return record(data, (a, b), bwd)


def bmm(a, b):
    """Batched matmul: (..., m, k) @ (..., k, n) with identical batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError("bmm batch dims differ: %s vs %s" % (a.shape, b.shape))
    da, db = a.data, b.data
    data = np.matmul(da, db)

    def bwd(g):
        return (np.matmul(g, np.swapaxes(db, -1, -2)),
                np.matmul(np.swapaxes(da, -1, -2), g))

    return record(data, (a, b), bwd)


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def bwd(g):
        return (g * data,)

    return record(data, (x,), bwd)


def log(x):
    x = as_tensor(x)
    dx = x.data
    data = np.log(dx)

    def bwd(g):
        return (g / dx,)

    return record(data, (x,), bwd)


def sqrt(x):
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def bwd(g):
        # subgradient 0 at 0 rather than inf, keeps L2 losses usable at a perfect fit
        denom = np.where(data > 0.0, 2.0 * data, 1.0)
        return (np.where(data > 0.0, g / denom, 0.0),)

    return record(data, (x,), bwd)


def absolute(x):
    x = as_tensor(x)
    dx = x.data
    data = np.abs(dx)

    def bwd(g):
        return (g * np.sign(dx),)  # sign(0) = 0: subgradient at the kink

    return record(data, (x,), bwd)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)
    da, db = a.data, b.data
    data = np.maximum(da, db)

    def bwd(g):
        # ties route to b, so relu(x) = maximum(x, 0.0) has zero gradient at 0
        return (_unbroadcast(g * (da > db), da.shape),
                _unbroadcast(g * (db >= da), db.shape))

    return record(data, (a, b), bwd)


def relu(x):
    return maximum(x, 0.0)


def softplus(x):
    x = as_tensor(x)
    dx = x.data
    data = np.logaddexp(0.0, dx)

    def bwd(g):
        return (g / (1.0 + np.exp(-dx)),)

    return record(data, (x,), bwd)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.data.shape
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return record(data, (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for a in ax:
            n *= x.data.shape[a]
    return multiply(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return record(data, (x,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(data, tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.reshape(t.data.shape) for p, t in zip(parts, tensors))

    return record(data, tuple(tensors), bwd)


def take(x, key):
    """Basic slicing/integer indexing; backward scatters into zeros."""
    x = as_tensor(x)
    shape = x.data.shape
    data = x.data[key]
    if data.base is not None:
        data = data.copy()

    def bwd(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return record(data, (x,), bwd)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.data.shape
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return record(data, (x,), bwd)


def transpose(x, axes):
    x = as_tensor(x)
    data = np.transpose(x.data, axes).copy()
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv).copy(),)

    return record(data, (x,), bwd)


def stop_gradient(x):
    """A constant copy: upstream gradient flow ends here."""
    x = as_tensor(x)
    return Tensor(x.data.copy())


def mask_select(x, mask):
    """Gather elements where a boolean mask is true, as a 1-D tensor."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape:
        raise ValueError("mask shape %s != tensor shape %s" % (mask.shape, x.data.shape))
    shape = x.data.shape
    data = x.data[mask]

    def bwd(g):
        gx = np.zeros(shape)
        gx[mask] = g
        return (gx,)

    return record(data, (x,), bwd)


def apply_mask(x, mask):
    """Multiply by a constant 0/1 mask (gradients vanish on masked-out pixels)."""
    return multiply(x, Tensor(np.asarray(mask, dtype=np.float64)))


def l1_loss(pred, ref):
    """Mean absolute difference over all elements."""
    return tmean(absolute(subtract(pred, ref)))


def l2_norm(x):
    """Root-sum-square of all elements, with subgradient 0 at exactly zero."""
    return sqrt(tsum(multiply(x, x)))


def l2_loss(pred, ref):
    return l2_norm(subtract(pred, ref))


def grad(loss, leaves, return_report=False):
    """Reverse-mode gradients of a scalar `loss` w.r.t. `leaves`.

    Walks the loss's tape once, in reverse append order.  Leaves that never
    entered the tape get an exactly-zero gradient and are listed in the
    report when `return_report` is set.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise TapeError("grad() needs a scalar loss, got shape %s" % (loss.shape,))
    if loss.tape is None:
        raise TapeError("loss was not produced on an active tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(loss.tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.bwd(g)):
            if gi is None or not inp.requires_grad:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi
    out, missing = [], []
    for i, leaf in enumerate(leaves):
        g = grads.get(id(leaf))
        if g is None:
            missing.append(i)
            g = np.zeros_like(leaf.data)
        out.append(Tensor(g))
    if return_report:
        return out, {"off_tape_leaves": missing}
    return out


def identity_grid(h, w):
    """(h, w, 2) array of (row, col) pixel coordinates."""
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([rr, cc], axis=-1)


def bilinear_sample(map_t, coords):
    """Sample an H×W×C map at continuous (row, col) coordinates.

    coords has shape h×w×2.  Out-of-range coordinates clamp to the border
    (clamp-to-edge); integer coordinates reproduce map values exactly.
    Differentiable in both the map and the coordinates; the coordinate
    gradient is 0 where a coordinate was clamped.
    """
    map_t, coords = as_tensor(map_t), as_tensor(coords)
    m = map_t.data
    if m.ndim != 3:
        raise ValueError("bilinear_sample expects H×W×C map, got %s" % (m.shape,))
    if coords.data.ndim != 3 or coords.data.shape[-1] != 2:
        raise ValueError("coords must be h×w×2, got %s" % (coords.data.shape,))
    hh, ww, _ = m.shape
    cy = coords.data[..., 0]
    cx = coords.data[..., 1]
    in_y = (cy >= 0.0) & (cy <= hh - 1.0)
    in_x = (cx >= 0.0) & (cx <= ww - 1.0)
    cy = np.clip(cy, 0.0, hh - 1.0)
    cx = np.clip(cx, 0.0, ww - 1.0)
    i0 = np.minimum(np.floor(cy), hh - 2.0).astype(np.int64) if hh > 1 else np.zeros_like(cy, dtype=np.int64)
    j0 = np.minimum(np.floor(cx), ww - 2.0).astype(np.int64) if ww > 1 else np.zeros_like(cx, dtype=np.int64)
    i1 = np.minimum(i0 + 1, hh - 1)
    j1 = np.minimum(j0 + 1, ww - 1)
    fy = (cy - i0)[..., None]
    fx = (cx - j0)[..., None]
    m00 = m[i0, j0]
    m01 = m[i0, j1]
    m10 = m[i1, j0]
    m11 = m[i1, j1]
    # four-weight form: weights are exactly 0/1 at integer coords, so the
    # sample reproduces map values bit-exactly there
    data = ((1.0 - fy) * (1.0 - fx) * m00 + (1.0 - fy) * fx * m01
            + fy * (1.0 - fx) * m10 + fy * fx * m11)

    def bwd(g):
        g_map = None
        g_coords = None
        if map_t.requires_grad:
            g_map = np.zeros_like(m)
            w00 = (1.0 - fy) * (1.0 - fx) * g
            w01 = (1.0 - fy) * fx * g
            w10 = fy * (1.0 - fx) * g
            w11 = fy * fx * g
            np.add.at(g_map, (i0, j0), w00)
            np.add.at(g_map, (i0, j1), w01)
            np.add.at(g_map, (i1, j0), w10)
            np.add.at(g_map, (i1, j1), w11)
        if coords.requires_grad:
            d_fy = ((((m10 - m00) * (1.0 - fx) + (m11 - m01) * fx)) * g).sum(axis=-1)
            d_fx = ((((m01 - m00) * (1.0 - fy) + (m11 - m10) * fy)) * g).sum(axis=-1)
            g_coords = np.stack([d_fy * in_y, d_fx * in_x], axis=-1)
        return g_map, g_coords

    return record(data, (map_t, coords), bwd)


def finite_difference_check(f, x, h=1e-3, tol=1e-4):
    """Compare the tape gradient of scalar-valued f against central differences.

    x is a plain float64 array; f maps a Tensor to a scalar Tensor.  Returns a
    dict with the max relative error (normalized by the largest finite-difference
    component), a pass flag, indices where one-sided differences disagree
    (kinks, excluded from the comparison), and indices where evaluation went
    non-finite.
    """
    x = np.asarray(x, dtype=np.float64)
    with Tape():
        xt = Tensor(x, requires_grad=True)
        loss = f(xt)
        g_tape = grad(loss, [xt])[0].data
    f0 = float(f(Tensor(x)).data)
    fd = np.zeros_like(x)
    kinks = []
    failures = []
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        fp = float(f(Tensor(xp)).data)
        xm = x.copy()
        xm[idx] -= h
        fm = float(f(Tensor(xm)).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            failures.append(idx)
            it.iternext()
            continue
        fd[idx] = (fp - fm) / (2.0 * h)
        # a large second difference means the two one-sided slopes disagree:
        # a kink, where comparing against the subgradient is meaningless
        if abs(fp + fm - 2.0 * f0) / h > 50.0 * h * max(1.0, abs(f0)):
            kinks.append(idx)
        it.iternext()
    mask = np.ones(x.shape, dtype=bool)
    for idx in kinks + failures:
        mask[idx] = False
    denom = max(np.abs(fd[mask]).max() if mask.any() else 0.0, 1e-8)
    max_rel = float(np.abs((g_tape - fd)[mask]).max() / denom) if mask.any() else 0.0
    return {
        "max_rel_err": max_rel,
        "passed": max_rel <= tol and not failures,
        "kinks": kinks,
        "eval_failures": failures,
        "grad": g_tape,
        "fd": fd,
    }


# ---------------------------------------------------------------------------
# TNSR container: magic "TNSR", u32 version=1, u32 rank, rank u64 dims,
# then row-major little-endian float64 payload.

_TNSR_MAGIC = b"TNSR"


class TnsrError(IOError):
    pass


def write_tnsr(path, array):
    a = np.asarray(array, dtype=np.float64, order="C")
    with open(path, "wb") as fh:
        fh.write(_TNSR_MAGIC)
        fh.write(struct.pack("<II", 1, a.ndim))
        fh.write(struct.pack("<%dQ" % a.ndim, *a.shape))
        fh.write(a.astype("<f8", copy=False).tobytes())


def read_tnsr(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _TNSR_MAGIC:
        raise TnsrError("%s: bad magic, not a TNSR file" % path)
    if len(raw) < 12:
        raise TnsrError("%s: truncated header" % path)
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != 1:
        raise TnsrError("%s: unsupported TNSR version %d" % (path, version))
    off = 12
    if len(raw) < off + 8 * rank:
        raise TnsrError("%s: truncated dims" % path)
    dims = struct.unpack_from("<%dQ" % rank, raw, off) if rank else ()
    off += 8 * rank
    count = 1
    for d in dims:
        count *= d
    if len(raw) != off + 8 * count:
        raise TnsrError("%s: payload size mismatch (want %d doubles)" % (path, count))
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    return data.reshape(dims).astype(np.float64)
