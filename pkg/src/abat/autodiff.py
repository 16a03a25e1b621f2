"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``grad`` topologically sorts the recorded graph from a
scalar output and visits each node exactly once.

Activations follow the (batch, feature maps, channels, time) layout used by
the EEG classifiers in :mod:`abat.models`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


class GradientError(RuntimeError):
    """Raised for invalid gradient requests or non-finite values."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise GradientError(f"{where}: non-finite values")


class Tensor:
    """A float64 array that may take part in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if requires_grad or name is not None:
            _check_finite(arr, f"leaf {name or 'tensor'}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every differentiable leaf."""
        leaves = [n for n in _topo_order(self) if n.is_leaf and n.requires_grad]
        for leaf, g in zip(leaves, grad(self, leaves)):
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    out.op = op
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def grad(output: Tensor, wrt: Iterable[Tensor], seed: np.ndarray | None = None) -> list[np.ndarray]:
    """Reverse-mode gradients of ``output`` with respect to each tensor in ``wrt``.

    ``output`` must be a scalar unless ``seed`` (the upstream gradient) is given.
    Leaves not reached by the graph get a zero gradient.
    """
    wrt = list(wrt)
    for t in wrt:
        if not t.requires_grad:
            raise GradientError(f"gradient requested for non-differentiable tensor {t.name or t.op}")
    if seed is None:
        if output.data.size != 1:
            raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
        seed = np.ones_like(output.data)
    elif seed.shape != output.shape:
        raise ShapeError(f"grad: seed shape {seed.shape} != output shape {output.shape}")
    _check_finite(output.data, f"output of {output.op}")

    grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=np.float64)}
    for node in reversed(_topo_order(output)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else g)
    return out


# ---------------------------------------------------------------- elementwise


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: expected matching shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def safe_log(a: Tensor, floor: float = 1e-6) -> Tensor:
    """Natural log of ``max(a, floor)``; zero gradient where clamped."""
    clamped = np.maximum(a.data, floor)
    live = a.data > floor
    return _node(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),), "log")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    return _node(out, (a,), lambda g: (np.where(x > 0, g, g * (neg + alpha)),), "elu")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], a.data.size // a.shape[0]))


# ---------------------------------------------------------------- dense


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        if a.data.ndim == 2 and b.data.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.data.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        if b.data.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        return g * b.data, g * a.data

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def bias_add(a: Tensor, bias: Tensor, axis: int = 1) -> Tensor:
    """Add a per-feature bias along ``axis``; the only broadcasting op."""
    if bias.data.ndim != 1 or a.shape[axis] != bias.shape[0]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match axis {axis} of {a.shape}")
    view = [1] * a.data.ndim
    view[axis] = -1
    reduce_axes = tuple(i for i in range(a.data.ndim) if i != axis)
    return _node(
        a.data + bias.data.reshape(view),
        (a, bias),
        lambda g: (g, g.sum(axis=reduce_axes)),
        "bias_add",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T (+ bias)`` for x of shape (batch, in) and weight (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = _node(
        x.data @ weight.data.T,
        (x, weight),
        lambda g: (g @ weight.data, g.T @ x.data),
        "linear",
    )
    return out if bias is None else bias_add(out, bias, axis=1)


# ---------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(n, c, h, w) -> (n * ho * wo, c * kh * kw) patch matrix."""
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _grad_input_offsets(g: np.ndarray, w: np.ndarray, xshape) -> np.ndarray:
    """Input gradient of an ungrouped valid correlation, one kernel offset at a time."""
    n, c, h, width = xshape
    cout, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
    gx = np.zeros((c, n, h, width))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + ho, j : j + wo] += (w[:, :, i, j].T @ gt).reshape(c, n, ho, wo)
    return gx.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1) -> Tensor:
    """Stride-1 valid cross-correlation over (channel, time) with grouping.

    Args:
        x: (batch, in_maps, H, W).
        weight: (out_maps, in_maps // groups, kh, kw).
        bias: optional (out_maps,).
        groups: in/out maps are split into this many independent groups;
            ``groups == in_maps`` gives a depthwise convolution.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups or cout % groups or cg != cin // groups:
        raise ShapeError(
            f"conv2d: weight {weight.shape} with groups={groups} does not fit input maps {cin}"
        )
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than input {(h, w)}")
    xd, wd = x.data, weight.data
    og = cout // groups
    ho, wo = h - kh + 1, w - kw + 1

    if kh == h and kw == 1:
        # kernel spans every row: one (grouped) matrix product per sample
        xm = xd.reshape(n, groups, cg * h, w)
        wm = wd.reshape(groups, og, cg * h)
        out = np.matmul(wm, xm).reshape(n, cout, 1, w)

        def backward(g):
            gm = g.reshape(n, groups, og, w)
            gx = np.matmul(wm.transpose(0, 2, 1), gm).reshape(xd.shape) if x.requires_grad else None
            gw = None
            if weight.requires_grad:
                gw = np.matmul(gm, xm.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wd.shape)
            return gx, gw

    elif groups == 1:
        cols = _im2col(xd, kh, kw)
        wm = wd.reshape(cout, -1)
        out = (cols @ wm.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

        def backward(g):
            gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            gx = _grad_input_offsets(g, wd, xd.shape) if x.requires_grad else None
            gw = (gm.T @ cols).reshape(wd.shape) if weight.requires_grad else None
            return gx, gw

    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3)).reshape(n, groups, cg, ho, wo, kh, kw)
        wg = wd.reshape(groups, og, cg, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", win, wg).reshape(n, cout, ho, wo)

        def backward(g):
            gg = g.reshape(n, groups, og, ho, wo)
            gx = gw = None
            if x.requires_grad:
                gxg = np.zeros((n, groups, cg, h, w))
                for i in range(kh):
                    for j in range(kw):
                        gxg[..., i : i + ho, j : j + wo] += np.einsum("ngohw,goc->ngchw", gg, wg[..., i, j])
                gx = gxg.reshape(xd.shape)
            if weight.requires_grad:
                gw = np.einsum("ngohw,ngchwij->gocij", gg, win).reshape(wd.shape)
            return gx, gw

    out = _node(out, (x, weight), backward, "conv2d")
    return out if bias is None else bias_add(out, bias, axis=1)


def pad_time(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last (time) axis."""
    if left < 0 or right < 0:
        raise ShapeError(f"pad_time: negative padding ({left}, {right})")
    if left == right == 0:
        return x
    widths = [(0, 0)] * (x.data.ndim - 1) + [(left, right)]
    stop = x.shape[-1] + left
    return _node(np.pad(x.data, widths), (x,), lambda g: (g[..., left:stop],), "pad_time")


# ---------------------------------------------------------------- pooling


def _pool_out(op: str, length: int, size: int, stride: int) -> int:
    if size < 1 or stride < 1:
        raise ShapeError(f"{op}: size and stride must be positive, got {size}, {stride}")
    if size > length:
        raise ShapeError(f"{op}: window {size} longer than time axis {length}")
    return (length - size) // stride + 1


def avg_pool_time(x: Tensor, size: int, stride: int | None = None) -> Tensor:
    stride = stride or size
    length = x.shape[-1]
    wo = _pool_out("avg_pool_time", length, size, stride)
    win = sliding_window_view(x.data, size, axis=-1)[..., ::stride, :][..., :wo, :]
    span = stride * (wo - 1) + 1

    def backward(g):
        gx = np.zeros(x.shape)
        share = g / size
        for j in range(size):
            gx[..., j : j + span : stride] += share
        return (gx,)

    return _node(win.mean(axis=-1), (x,), backward, "avg_pool_time")


def max_pool_time(x: Tensor, size: int, stride: int | None = None) -> Tensor:
    """Max over time windows; ties route the gradient to the first maximum."""
    stride = stride or size
    length = x.shape[-1]
    wo = _pool_out("max_pool_time", length, size, stride)
    win = sliding_window_view(x.data, size, axis=-1)[..., ::stride, :][..., :wo, :]
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape)
        idx = arg + stride * np.arange(wo)
        np.add.at(gx.reshape(-1, length), (np.arange(gx.size // length)[:, None], idx.reshape(-1, wo)), g.reshape(-1, wo))
        return (gx,)

    return _node(out, (x,), backward, "max_pool_time")


# ---------------------------------------------------------------- normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-feature-map normalization over every axis except axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as in the usual convention); in eval
    mode the running buffers are used and the op is affine.
    """
    axes = (0,) + tuple(range(2, x.data.ndim))
    view = [1] * x.data.ndim
    view[1] = -1
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: affine params {gamma.shape} do not match maps of {x.shape}")
    xd = x.data
    if training:
        count = xd.size // xd.shape[1]
        if count < 2:
            raise ShapeError("batch_norm: training mode needs more than one value per map")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    a = (gamma.data * inv).reshape(view)
    if not training:
        b = (beta.data - mu * gamma.data * inv).reshape(view)

        def backward_eval(g):
            gx = g * a if x.requires_grad else None
            ggamma = gbeta = None
            if gamma.requires_grad or beta.requires_grad:
                xhat = (xd - mu.reshape(view)) * inv.reshape(view)
                ggamma, gbeta = (g * xhat).sum(axis=axes), g.sum(axis=axes)
            return gx, ggamma, gbeta

        return _node(xd * a + b, (x, gamma, beta), backward_eval, "batch_norm")

    xhat = (xd - mu.reshape(view)) * inv.reshape(view)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)
    m = xd.size // xd.shape[1]

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            gx = a * (g - (gbeta / m).reshape(view) - xhat * (ggamma / m).reshape(view))
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), backward, "batch_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity outside training or at rate 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise GradientError("dropout: training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of (batch, classes) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"cross_entropy: labels outside [0, {logits.shape[1]})")
    logp = log_softmax(logits.data)
    rows = np.arange(labels.size)
    per = -logp[rows, labels]
    if reduction == "mean":
        value, factor = per.mean(), 1.0 / labels.size
    elif reduction == "sum":
        value, factor = per.sum(), 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) * factor),)

    return _node(np.asarray(value), (logits,), backward, "cross_entropy")
