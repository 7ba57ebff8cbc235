"""Dense float64 tensors with reverse-mode differentiation, Adam, and checkpoints.

Every differentiable op records a node on the output tensor (inputs plus a
backward rule).  ``backward`` sorts the recorded graph topologically and
sweeps it once; a graph cannot be swept twice.
"""

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tsum(self) * (1.0 / self.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = out.name = out._backward = None
    out.requires_grad = out._consumed = False
    out._parents = ()
    live = tuple(p for p in parents if p.requires_grad or p._parents)
    if live:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across separate graphs; call ``zero_grad`` on
    parameters between optimizer steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already run on this graph")
    loss._consumed = True
    if not loss.requires_grad:
        return

    order, seen = [], set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        # release the rule so the graph cannot be replayed from an interior node
        node._backward = None
        node._parents = ()


# elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def sqrt(a):
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    """max(x, 0) with subgradient 0 at x == 0."""
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the clamped region passes no gradient."""
    inside = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# shape / reduction -------------------------------------------------------------

def tsum(a, axis=None):
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), bw)


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a, index):
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# image ops (C x H x W, no batch axis) -------------------------------------------

def _im2col(a, k, p):
    """(C, H, W) -> (C*k*k, H'*W') patch matrix for stride-1 correlation."""
    c = a.shape[0]
    if p:
        a = np.pad(a, ((0, 0), (p, p), (p, p)))
    if k == 1:
        return a.reshape(c, -1)
    win = sliding_window_view(a, (k, k), axis=(1, 2))  # C, H', W', k, k
    ho, wo = win.shape[1:3]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)


def conv2d(x, kernel, bias, padding=0):
    """Cross-correlation of a C_in x H x W input with a C_out x C_in x k x k kernel."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects CxHxW input and 4-d kernel, got {x.shape}, {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    k, p = kh, padding
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError("input smaller than kernel")

    cols = _im2col(x.data, k, p)
    wmat = kernel.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, ho, wo) + bias.data[:, None, None]
    need_x = x.requires_grad or bool(x._parents)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(kernel.shape)
        gb = g2.sum(axis=1)
        gx = None
        if need_x:
            # input gradient = correlation of g with the flipped, transposed kernel
            q = k - 1 - p
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
            if q >= 0:
                gx = (flipped @ _im2col(g, k, q)).reshape(c_in, h, w)
            else:
                full = (flipped @ _im2col(g, k, k - 1)).reshape(c_in, h + 2 * p, w + 2 * p)
                gx = full[:, p:p + h, p:p + w]
        return gx, gw, gb

    return _result(out, (x, kernel, bias), bw)


def avg_pool2(x):
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _result(out, (x,), bw)


def nearest_upsample2(x):
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _result(out, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),))


def concat_channels(a, b):
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"spatial mismatch in concat: {a.shape} vs {b.shape}")
    ca = a.shape[0]
    return _result(np.concatenate([a.data, b.data], axis=0), (a, b),
                   lambda g: (g[:ca], g[ca:]))


# optimizer -----------------------------------------------------------------------

class AdamState:
    """Moments and step counter for a fixed, named parameter set."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps_adam=1e-8):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps_adam = beta1, beta2, eps_adam
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params, state):
    """One bias-corrected Adam update in place; ``params`` maps name -> Tensor."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"no gradient for parameter(s): {', '.join(missing)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = p.grad
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps_adam)


# verification --------------------------------------------------------------------

def finite_difference_check(f, x, h=1e-3, coords=None):
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  ``coords`` optionally restricts
    the check to a subset of flat indices of ``x``.
    """
    x.grad = None
    x.requires_grad = True
    y = f(x)
    if not np.isfinite(y.data).all():
        raise FloatingPointError("f(x) is not finite")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f not finite at coordinate {i}")
        fd = (fp - fm) / (2 * h)
        ga = analytic.reshape(-1)[i]
        worst = max(worst, abs(ga - fd) / max(1e-8, abs(ga) + abs(fd)))
    return worst


# checkpoint container --------------------------------------------------------------

MAGIC = b"FSEED001"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays):
    """Write ``{name: ndarray}`` as the little-endian FSEED001 container."""
    buf = [MAGIC, struct.pack("<Q", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.append(struct.pack("<Q", len(raw)))
        buf.append(raw)
        buf.append(struct.pack("<Q", arr.ndim))
        buf.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_arrays(path):
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a FSEED001 checkpoint (magic {blob[:8]!r})")
    pos = 8

    def read(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", read(8))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", read(8))
        name = read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", read(8))
        shape = struct.unpack(f"<{rank}q", read(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(read(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out
