"""Dense tensors with reverse-mode automatic differentiation.

Every learned component in the tracker (fusion student, backbone, attention
projections, classifier heads) runs on these tensors.  The design is a plain
tape: each op returns a new Tensor holding its inputs and a closure that maps
the output gradient to input gradients.  ``backward`` walks the tape once in
reverse topological order.

Two precision modes exist: "test" (float64, used by all oracle and gradient
tests) and "run" (float32, used for training/tracking speed).  The mode only
affects newly created leaf tensors; ops inherit the dtype of their inputs.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .backends import active_backend

_MODES = {"test": np.float64, "run": np.float32}
_active_mode = "test"
_grad_enabled = True


def set_mode(mode: str) -> None:
    global _active_mode
    if mode not in _MODES:
        raise ValueError(f"unknown precision mode {mode!r}, expected 'test' or 'run'")
    _active_mode = mode


def get_mode() -> str:
    return _active_mode


def active_dtype():
    return _MODES[_active_mode]


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if data.size == 0:
        return
    # min/max both propagate NaN and catch the two infinities without
    # allocating a boolean mask (these run after every forward op)
    if not (np.isfinite(data.min()) and np.isfinite(data.max())):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")


class Tensor:
    """n-d value container, optionally tracking a gradient.

    ``data`` is a contiguous numpy array; ``grad`` (same shape) is populated
    by :func:`backward`.  Values are immutable by convention after creation;
    only optimizers write to ``data`` of leaf parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op", "_done")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        if op == "leaf":
            data = np.ascontiguousarray(data, dtype=active_dtype())
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._op = op
        self._done = False
        _check_finite(self.data, op)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="leaf")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the named functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Build a graph node for a custom differentiable op.

    ``backward_fn(grad_out) -> [grad per parent or None]``.  When gradients
    are globally disabled, or no parent needs one, the node is detached.
    """
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, requires_grad=False, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every tensor the scalar ``loss`` depends on.

    Each graph node is visited exactly once.  Calling backward twice on the
    same loss is an error: the tape holds no state to replay.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise RuntimeError("backward already ran on this graph; rebuild the graph first")
    loss._done = True

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is None or node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return make_op(out, (a, b), bw, "mul")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    if s == 1.0:
        return a
    out = a.data * s

    def bw(g):
        return (g * s,)

    return make_op(out, (a,), bw, "scale")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(old),)

    return make_op(out, (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    """Permute axes (defaults to full reversal, i.e. matrix transpose in 2-d)."""
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make_op(out, (a,), bw, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return make_op(out, tuple(tensors), bw, "concat")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return make_op(out, (a,), bw, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        return (g * out * (1.0 - out),)

    return make_op(out, (a,), bw, "sigmoid")


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max subtraction before exponentiation)."""
    a = as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return make_op(out, (a,), bw, "softmax")


def dropout(a, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout with an explicitly seeded mask; identity when not training."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {p}")
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    out = a.data * mask

    def bw(g):
        return (g * mask,)

    return make_op(out, (a,), bw, "dropout")


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def tsum(a) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum())
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).astype(g.dtype),)

    return make_op(out, (a,), bw, "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    out = np.asarray(a.data.mean())
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g / n, shape).astype(g.dtype),)

    return make_op(out, (a,), bw, "mean")


def l1_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred.data - target.data
    out = np.asarray(np.abs(diff).mean())
    n = diff.size

    def bw(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return make_op(out, (pred, target), bw, "l1_loss")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean())
    n = diff.size

    def bw(g):
        s = 2.0 * diff * (g / n)
        return s, -s

    return make_op(out, (pred, target), bw, "mse_loss")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax of ``logits`` [N,K]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"expected logits [N,K] and labels [N], got {logits.shape} / {labels.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    out = np.asarray(-logp[np.arange(n), labels].mean())
    probs = np.exp(logp)

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return make_op(out, (logits,), bw, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# linear algebra and spatial kernels
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return make_op(out, (a, b), bw, "matmul")


def linear(x, w, b) -> Tensor:
    """x [N,in] @ w [in,out] + b [out]."""
    return add(matmul(x, w), b)


def conv2d(x, w, b=None, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Dilated 2-d cross-correlation: x [N,C,H,W], w [K,C,kh,kw], b [K]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects x [N,C,H,W] and w [K,C,kh,kw], got {x.shape} / {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    if w.shape[2] < 1 or w.shape[3] < 1 or dilation < 1 or stride < 1:
        raise ValueError("conv2d needs kernel dims >= 1, stride >= 1 and dilation >= 1")
    kh, kw = w.shape[2], w.shape[3]
    h_out = (x.shape[2] + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    w_out = (x.shape[3] + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(
            f"conv2d output would be {h_out}x{w_out} for input {x.shape} and kernel {w.shape} "
            f"(stride={stride}, dilation={dilation}, padding={padding})"
        )
    backend = active_backend()
    out = backend.conv2d_forward(x.data, w.data, stride, dilation, padding)
    x_shape, w_shape = x.shape, w.shape
    xd, wd = x.data, w.data

    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ValueError(f"conv2d bias must have shape ({w.shape[0]},), got {b.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bw(g):
        g = np.ascontiguousarray(g)
        gx = backend.conv2d_backward_input(g, wd, x_shape, stride, dilation, padding)
        gw = backend.conv2d_backward_weight(g, xd, w_shape, stride, dilation, padding)
        if len(parents) == 3:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return make_op(out, tuple(parents), bw, "conv2d")


def max_pool2d(x, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; ties route the gradient to the first maximum."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"max_pool2d expects [N,C,H,W], got {x.shape}")
    if stride is None:
        stride = kernel
    n, c, h, w = x.shape
    h_out = (h - kernel) // stride + 1
    w_out = (w - kernel) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"max_pool2d output would be empty for input {x.shape}")
    view = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]  # [N,C,H',W',k,k]
    flat = view.reshape(n, c, h_out, w_out, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        ni, ci, hi, wi = np.indices((n, c, h_out, w_out))
        src_h = hi * stride + idx // kernel
        src_w = wi * stride + idx % kernel
        np.add.at(gx, (ni, ci, src_h, src_w), g)
        return (gx,)

    return make_op(out, (x,), bw, "max_pool2d")


def roi_align(feat, boxes, out_size: int = 3, samples: int = 2) -> Tensor:
    """Average bilinear pooling of ``boxes`` [n,4] (x,y,w,h in feature coords).

    Returns [n, C, out_size, out_size].  Sample coordinates are clamped to
    the feature borders, so boxes may overhang the map.
    """
    feat = as_tensor(feat)
    if feat.ndim != 3:
        raise ValueError(f"roi_align expects feat [C,H,W], got {feat.shape}")
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=feat.dtype).reshape(-1, 4))
    if np.any(boxes[:, 2] <= 0) or np.any(boxes[:, 3] <= 0):
        raise ValueError("roi_align boxes need positive width and height")
    backend = active_backend()
    out = backend.roi_align_forward(feat.data, boxes, out_size, samples)
    feat_shape = feat.shape

    def bw(g):
        gf = backend.roi_align_backward(np.ascontiguousarray(g), boxes, feat_shape, out_size, samples)
        return (gf,)

    return make_op(out, (feat,), bw, "roi_align")
