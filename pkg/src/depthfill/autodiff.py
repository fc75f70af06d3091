"""Dense tensors with reverse-mode automatic differentiation.

Just enough operator coverage for small convolutional networks and the
deformable sampling used by the refinement module: elementwise math,
reductions, channel concatenation, 2-d convolution, 2x upsampling, and a
differentiable bilinear gather. Everything is computed eagerly on numpy
arrays (define-by-run); each result remembers its parents and a closure
that routes the output gradient back to them.

Arrays are float64 by default. float32 is an explicit opt-in via the
``dtype`` argument of :class:`Tensor` and is inherited by derived nodes.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64


class Tensor:
    """A dense n-d array with optional gradient tracking.

    ``data`` is immutable by convention once the tensor participates in a
    graph; only ``grad`` is mutated (by :meth:`backward`). Gradients
    accumulate additively across fan-out. A second backward over the same
    graph is rejected unless the first pass was run with
    ``retain_graph=True``, in which case repeated passes keep accumulating.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype == np.float32 else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bw = None
        self._spent = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing -------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, retain_graph: bool = False):
        """Populate ``grad`` on every gradient-requiring ancestor.

        Only scalar outputs may start a backward pass. The recorded
        operations are replayed in reverse execution order; each node is
        visited exactly once per pass.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output, got shape %r" % (self.shape,))
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if self._spent:
            raise RuntimeError(
                "backward() already ran on this graph; pass retain_graph=True "
                "to keep the graph and accumulate gradients"
            )
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._bw is not None:
                node._bw(node.grad)
                if not retain_graph:
                    node._bw = None
                    node._parents = ()
        if not retain_graph:
            self._spent = True

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)


def _toposort(root: Tensor) -> list[Tensor]:
    """Depth-first postorder over the subgraph feeding ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bw) -> Tensor:
    """Wrap an op result, recording the edge only if a parent needs grad."""
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bw = bw
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * data / b.data, b.data.shape))

    return _make(data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), bw)


def absolute(a) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * sign)

    return _make(np.abs(a.data), (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (0.5 / data))

    return _make(data, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable on both tails: exp() only ever sees non-positive arguments
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), bw)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), the positivity-enforcing output nonlinearity."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * sig)

    return _make(data, (a,), bw)


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot))

    return _make(data, (a,), bw)


# -- shape ops -----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def take_channel(a, index: int) -> Tensor:
    """Select one leading-axis slice of a 3-d (C, H, W) tensor."""
    a = as_tensor(a)
    if a.data.ndim != 3:
        raise ValueError(f"take_channel expects a (C, H, W) tensor, got shape {a.data.shape}")
    if not 0 <= index < a.data.shape[0]:
        raise ValueError(f"channel {index} out of range for shape {a.data.shape}")

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)

    return _make(a.data[index].copy(), (a,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        for t, gp in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(gp)

    return _make(data, tuple(tensors), bw)


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def bw(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(np.asarray(data), (a,), bw)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


# -- 2-d convolution -----------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCkk filters.

    Output height is (H + 2*padding - kh)//stride + 1 (same for width).
    Implemented as im2col + matmul; the saved column matrix makes the
    weight gradient a single GEMM.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and FCkk weight, got {x.data.shape} and {weight.data.shape}")
    n, c, h, w = x.data.shape
    f, cw, kh, kw = weight.data.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d needs padding >= 0 and stride >= 1")
    if bias is not None and bias.data.shape != (f,):
        raise ValueError(f"conv2d bias must have shape ({f},), got {bias.data.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError("conv2d input smaller than kernel after padding")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # N,C,OH,OW,kh,kw
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def bw(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
        if weight.requires_grad:
            weight._accumulate((gflat.T @ cols).reshape(f, c, kh, kw))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gflat.sum(axis=0))
        if x.requires_grad:
            gxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
            gmoved = gflat.reshape(n, oh, ow, f)
            for i in range(kh):
                for j in range(kw):
                    contrib = gmoved @ wmat.reshape(f, c, kh, kw)[:, :, i, j]  # N,OH,OW,C
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += contrib.transpose(
                        0, 3, 1, 2
                    )
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(gxp)

    return _make(np.ascontiguousarray(out), (x, weight) if bias is None else (x, weight, bias), bw)


# -- 2x upsampling ---------------------------------------------------------------


def upsample2x(x, mode: str = "nearest") -> Tensor:
    """Double the spatial size of an NCHW tensor."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"upsample2x expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if mode == "nearest":
        data = x.data.repeat(2, axis=2).repeat(2, axis=3)

        def bw(g):
            if x.requires_grad:
                x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

        return _make(data, (x,), bw)
    if mode == "bilinear":
        uh = _linear_upsample_matrix(h, x.data.dtype)
        uw = _linear_upsample_matrix(w, x.data.dtype)
        data = np.einsum("ih,nchw,jw->ncij", uh, x.data, uw, optimize=True)

        def bw(g):
            if x.requires_grad:
                x._accumulate(np.einsum("ih,ncij,jw->nchw", uh, g, uw, optimize=True))

        return _make(data, (x,), bw)
    raise ValueError(f"unknown upsample mode {mode!r}")


def _linear_upsample_matrix(n: int, dtype) -> np.ndarray:
    """(2n x n) matrix applying half-pixel-centered linear interpolation."""
    out = np.zeros((2 * n, n), dtype=dtype)
    src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, n - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.arange(2 * n)
    out[rows, i0] += 1.0 - frac
    out[rows, i1] += frac
    return out


# -- bilinear gather --------------------------------------------------------------


def bilinear_gather(map2d, positions) -> Tensor:
    """Sample a single-channel map at real-valued (x, y) positions.

    The value at s is sum_t G(s, t) * map[t] over the four integer
    neighbors t, with G(s, t) = max(0, 1-|sx-tx|) * max(0, 1-|sy-ty|).
    Positions are clamped to the map rectangle before sampling;
    differentiable w.r.t. both the map and the positions, with zero
    position gradient where the clamp is active.
    """
    map2d, positions = as_tensor(map2d), as_tensor(positions)
    if map2d.data.ndim != 2:
        raise ValueError(f"bilinear_gather expects a 2-d map, got shape {map2d.data.shape}")
    if positions.data.ndim != 2 or positions.data.shape[1] != 2:
        raise ValueError(f"positions must have shape (M, 2), got {positions.data.shape}")
    if not np.isfinite(positions.data).all():
        raise ValueError("bilinear_gather: positions contain NaN or inf")
    h, w = map2d.data.shape
    m = map2d.data
    px, py = positions.data[:, 0], positions.data[:, 1]
    inside_x = (px >= 0.0) & (px <= w - 1.0)
    inside_y = (py >= 0.0) & (py <= h - 1.0)
    cx = np.clip(px, 0.0, w - 1.0)
    cy = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    v00, v10 = m[y0, x0], m[y0, x1]
    v01, v11 = m[y1, x0], m[y1, x1]
    top = v00 * (1.0 - fx) + v10 * fx
    bot = v01 * (1.0 - fx) + v11 * fx
    data = top * (1.0 - fy) + bot * fy

    def bw(g):
        if map2d.requires_grad:
            gm = np.zeros_like(m)
            np.add.at(gm, (y0, x0), g * (1.0 - fx) * (1.0 - fy))
            np.add.at(gm, (y0, x1), g * fx * (1.0 - fy))
            np.add.at(gm, (y1, x0), g * (1.0 - fx) * fy)
            np.add.at(gm, (y1, x1), g * fx * fy)
            map2d._accumulate(gm)
        if positions.requires_grad:
            dx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy
            dy = bot - top
            gp = np.stack([g * dx * inside_x, g * dy * inside_y], axis=1)
            positions._accumulate(gp)

    return _make(data, (map2d, positions), bw)
