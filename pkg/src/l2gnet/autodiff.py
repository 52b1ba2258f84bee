"""Minimal reverse-mode autodiff over dense numpy arrays.

A small tape engine: every operation returns a new Tensor holding the numpy
result plus a closure that pushes the upstream gradient to its parents.
Gradients are accumulated by walking the graph in reverse topological order.
Only the operations the model needs are provided; there is no attempt at a
general autodiff framework.

All public tensors are float64 by default (gradient checks require it); a
float32 mode exists for training throughput but is never used in tests.
"""

from __future__ import annotations

import numpy as np

# When True, every operation output is checked for NaN/Inf and an error is
# raised naming the operation. Kept on by default; training code may disable
# it for speed.
CHECK_FINITE = True

# When True, newly created op nodes never record backward closures.
_NO_GRAD = False


class no_grad:
    """Context manager: operations inside build no backward graph."""

    def __enter__(self):
        global _NO_GRAD
        self._prev = _NO_GRAD
        _NO_GRAD = True

    def __exit__(self, *exc):
        global _NO_GRAD
        _NO_GRAD = self._prev
        return False


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _check(name, arr):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{name}'")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Immutable dense array node on the tape.

    `data` is a numpy array (row-major); `grad` is filled in during
    backward() for nodes with requires_grad.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None,
                 _opname="leaf"):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._opname = _opname
        _check(_opname, self.data)

    # ---- basic introspection -------------------------------------------------

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

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._opname})"

    # ---- graph construction helpers -----------------------------------------

    @staticmethod
    def _make(data, parents, backward, opname):
        req = (not _NO_GRAD) and any(p.requires_grad for p in parents)
        if not req:
            backward = None
            parents = ()
        return Tensor(data, requires_grad=req, _parents=parents,
                      _backward=backward, _opname=opname)

    def detach(self):
        return Tensor(self.data)

    # ---- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def bw(g):
            return (_unbroadcast(g, self.data.shape),
                    _unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data

        def bw(g):
            return (_unbroadcast(g * other.data, self.data.shape),
                    _unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data

        def bw(g):
            return (_unbroadcast(g / other.data, self.data.shape),
                    _unbroadcast(-g * self.data / other.data ** 2,
                                 other.data.shape))

        return Tensor._make(out_data, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        p = float(p)
        out_data = self.data ** p

        def bw(g):
            return (g * p * self.data ** (p - 1.0),)

        return Tensor._make(out_data, (self,), bw, "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        out_data = self.data @ other.data

        def bw(g):
            return (g @ other.data.T, self.data.T @ g)

        return Tensor._make(out_data, (self, other), bw, "matmul")

    # ---- shape ops -----------------------------------------------------------

    @property
    def T(self):
        return self.transpose()

    def transpose(self, axes=None):
        out_data = np.transpose(self.data, axes)
        if axes is None:
            inv = None
        else:
            inv = np.argsort(axes)

        def bw(g):
            return (np.transpose(g, inv),)

        return Tensor._make(out_data, (self,), bw, "transpose")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        out_data = self.data.reshape(shape)

        def bw(g):
            return (g.reshape(orig),)

        return Tensor._make(out_data, (self,), bw, "reshape")

    def __getitem__(self, key):
        out_data = self.data[key]
        orig_shape = self.data.shape

        def bw(g):
            full = np.zeros(orig_shape)
            np.add.at(full, key, g)
            return (full,)

        return Tensor._make(out_data, (self,), bw, "getitem")

    # ---- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        in_shape = self.data.shape

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, in_shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, in_shape).copy(),)

        return Tensor._make(out_data, (self,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # ---- elementwise functions ----------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            return (g * out_data,)

        return Tensor._make(out_data, (self,), bw, "exp")

    def log(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            out_data = np.log(self.data)

        def bw(g):
            return (g / self.data,)

        return Tensor._make(out_data, (self,), bw, "log")

    def relu(self):
        mask = self.data > 0

        def bw(g):
            return (g * mask,)

        return Tensor._make(self.data * mask, (self,), bw, "relu")

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bw(g):
            return (g * out_data * (1.0 - out_data),)

        return Tensor._make(out_data, (self,), bw, "sigmoid")

    # ---- backward pass -------------------------------------------------------

    def backward(self):
        """Reverse-mode accumulation from a scalar node."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into .grad
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if not p.requires_grad or pg is None:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        # flush any grads that landed on leaves not via _backward=None path
        for node in topo:
            g = grads.pop(id(node), None)
            if g is not None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Parameter(Tensor):
    """Trainable leaf with a stable identifier and persistent gradient."""

    def __init__(self, value, name):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


class Rng:
    """Seeded random stream.

    Backed by numpy's Philox counter-based generator: the same 64-bit seed
    yields the same stream on every platform.
    """

    ALGORITHM = "philox4x64"

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, scale=1.0):
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low, high, shape):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, offset):
        """Independent stream derived from this seed and an integer tag."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + offset) % (1 << 63))

    def state(self):
        return self._gen.bit_generator.state

    def set_state(self, state):
        self._gen.bit_generator.state = state


# ---- free-function operations ------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out_data, tuple(tensors), bw, "concat")


def logsumexp(x, axis, keepdims=False):
    """Numerically stable log(sum(exp(x))) along `axis`."""
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    s = np.sum(np.exp(x.data - m), axis=axis, keepdims=True)
    out_full = m + np.log(s)
    out_data = out_full if keepdims else np.squeeze(out_full, axis=axis)
    soft = np.exp(x.data - out_full)

    def bw(g):
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (g2 * soft,)

    return Tensor._make(out_data, (x,), bw, "logsumexp")


def max_abs(x):
    """Largest absolute entry as a scalar tensor; gradient flows to the
    (first) attaining entry with its sign."""
    x = as_tensor(x)
    flat = x.data.reshape(-1)
    i = int(np.argmax(np.abs(flat)))
    out_data = np.array(abs(flat[i]))
    sign = 1.0 if flat[i] >= 0 else -1.0
    shape = x.data.shape

    def bw(g):
        full = np.zeros(shape)
        full.reshape(-1)[i] = sign * float(g)
        return (full,)

    return Tensor._make(out_data, (x,), bw, "max_abs")


def take_rows(x, idx):
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = x.data[idx]
    n_rows = x.data.shape[0]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(out_data, (x,), bw, "take_rows")


def pairwise_sqdist(a, b):
    """out[i, j] = sum_c (a[i, c] - b[j, c])^2, exactly nonnegative."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise_sqdist shape mismatch: {a.shape} vs {b.shape}")
    aa = np.sum(a.data ** 2, axis=1)[:, None]
    bb = np.sum(b.data ** 2, axis=1)[None, :]
    out_data = aa + bb - 2.0 * (a.data @ b.data.T)
    np.maximum(out_data, 0.0, out=out_data)  # clamp expansion-trick negatives

    def bw(g):
        ga = 2.0 * (a.data * g.sum(axis=1)[:, None] - g @ b.data)
        gb = 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data)
        return (ga, gb)

    return Tensor._make(out_data, (a, b), bw, "pairwise_sqdist")


def inv_sqrt_psd(x, eig_floor=1e-6):
    """Inverse square root of a symmetric PSD matrix.

    Eigenvalues are clamped at `eig_floor` before inversion, which keeps the
    result finite when the matrix is nearly singular. The backward rule is the
    adjoint of the Sylvester-equation linearization of Y = X^(-1/2); clamped
    eigendirections receive zero gradient through the eigenvalue.
    """
    x = as_tensor(x)
    sym = 0.5 * (x.data + x.data.T)
    try:
        lam, q = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as e:
        raise FloatingPointError(f"eigendecomposition failed: {e}") from e
    lam_c = np.maximum(lam, eig_floor)
    s = np.sqrt(lam_c)
    out_data = (q / s[None, :]) @ q.T

    def bw(g):
        gt = q.T @ (0.5 * (g + g.T)) @ q
        # adjoint of dY~ = -S^-1 dA~ S^-1 then dA~ = dX~ / (s_i + s_j)
        ga = -(gt / s[:, None]) / s[None, :]
        gx = ga / (s[:, None] + s[None, :])
        gx = q @ gx @ q.T
        return (0.5 * (gx + gx.T),)

    return Tensor._make(out_data, (x,), bw, "inv_sqrt_psd")


def straight_through(z_con, z_dis_data):
    """Forward: the quantized rows. Backward: identity into z_con."""
    z_con = as_tensor(z_con)
    if z_dis_data.shape != z_con.data.shape:
        raise ValueError("straight_through shape mismatch")

    def bw(g):
        return (g,)

    return Tensor._make(z_dis_data, (z_con,), bw, "straight_through")


# ---- convolution primitives --------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    """x: [B, C, H, W] -> cols [B, C*kh*kw, oh*ow]."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B, C, oh, ow, kh, kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of _im2col. cols: [B, C*kh*kw, oh*ow] -> [B, C, H, W]."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((b, c, hp, wp))
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:hp - pad, pad:wp - pad]
    return out


def conv2d(x, w, b, stride=1, pad=0):
    """x: [B, C, H, W], w: [F, C, kh, kw], b: [F] -> [B, F, oh, ow]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    f, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ValueError(f"conv2d channel mismatch: {x.shape} vs {w.shape}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wm = w.data.reshape(f, -1)
    out_data = (wm @ cols).reshape(x.shape[0], f, oh, ow) + \
        b.data[None, :, None, None]

    def bw(g):
        gm = g.reshape(g.shape[0], f, -1)
        gw = np.einsum("bfl,bcl->fc", gm, cols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = np.einsum("fc,bfl->bcl", wm, gm)
        gx = _col2im(gcols, x.data.shape, kh, kw, stride, pad)
        return (gx, gw, gb)

    return Tensor._make(out_data, (x, w, b), bw, "conv2d")


def conv_transpose2d(x, w, b, stride=2, pad=0):
    """x: [B, C, H, W], w: [C, F, kh, kw] -> [B, F, s(H-1)+kh-2p, ...]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    c, f, kh, kw = w.shape
    if x.shape[1] != c:
        raise ValueError(f"conv_transpose2d channel mismatch: {x.shape} vs {w.shape}")
    bsz, _, h, wd = x.shape
    oh = stride * (h - 1) + kh - 2 * pad
    ow = stride * (wd - 1) + kw - 2 * pad
    wm = w.data.reshape(c, f * kh * kw)
    xf = x.data.reshape(bsz, c, h * wd)
    cols = np.einsum("ck,bcl->bkl", wm, xf)
    out_data = _col2im(cols, (bsz, f, oh, ow), kh, kw, stride, pad) + \
        b.data[None, :, None, None]

    def bw(g):
        gcols, goh, gow = _im2col(g, kh, kw, stride, pad)
        # goh, gow == h, wd by construction
        gx = np.einsum("ck,bkl->bcl", wm, gcols).reshape(x.data.shape)
        gw = np.einsum("bcl,bkl->ck", xf, gcols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return Tensor._make(out_data, (x, w, b), bw, "conv_transpose2d")


# ---- gradient checking -------------------------------------------------------


def grad_check(fn, params, step=1e-5, tolerance=1e-4, max_probes=25, rng=None):
    """Compare analytic gradients of fn(params)->scalar with central differences.

    Probes up to `max_probes` randomly chosen entries per parameter (all
    entries when the parameter is small). Returns a dict per parameter with
    max/mean relative error and a pass flag, plus an overall "pass" entry.
    """
    if not (1e-7 <= step <= 1e-3):
        raise ValueError("step must lie in [1e-7, 1e-3]")
    rng = rng or Rng(0)
    for p in params:
        p.zero_grad()
    loss = fn()
    if not np.isfinite(loss.data):
        raise NonFiniteError("non-finite loss in grad_check")
    loss.backward()
    analytic = {id(p): p.grad.copy() for p in params}

    report = {}
    ok_all = True
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_probes:
            probes = np.arange(n)
        else:
            probes = rng._gen.choice(n, size=max_probes, replace=False)
        errs = []
        for i in probes:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("non-finite probe value in grad_check")
            num = (f_plus - f_minus) / (2.0 * step)
            ana = analytic[id(p)].reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1e-3)
            errs.append(abs(num - ana) / denom)
        max_err = float(np.max(errs)) if errs else 0.0
        mean_err = float(np.mean(errs)) if errs else 0.0
        passed = max_err < tolerance
        ok_all = ok_all and passed
        report[p.name] = {"max_rel_err": max_err, "mean_rel_err": mean_err,
                          "pass": passed}
    report["pass"] = ok_all
    return report
