"""Minimal dense-tensor reverse-mode automatic differentiation.

Everything is float64 and numpy-backed. A Tensor remembers the tape node
that produced it; calling ``backward()`` on a scalar loss walks the graph
in reverse topological order and accumulates gradients into every tensor
with ``requires_grad`` set. Repeated backward calls accumulate additively
until ``zero_grad()``.

Only first-order gradients are supported and the op set is exactly what
the networks in this package need: conv2d, avg_pool, batch_norm, relu,
element/shape ops, matmul, softmax and cross-entropy.
"""

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_counter = itertools.count()


class Tensor:
    """A dense float64 array plus its place on the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name",
                 "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self.name = name
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar (thin wrappers over the module-level ops) --------
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scalar_mul(_lift(other), -1.0))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        tag = self.name or f"node{self.node_id}"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(out_data, parents, grad_fn):
    """Register one tape node.

    ``grad_fn(grad_out) -> tuple`` must return one gradient array per
    parent, aligned with ``parents``. Used by every op here and by layers
    in other modules that need custom backward rules.
    """
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def backward(loss):
    """Accumulate d(loss)/d(tensor) into every requires_grad tensor."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")

    # Iterative post-order DFS; recursion would overflow on deep graphs.
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))

    # Pass-local gradient buffers keep repeated backward calls additive
    # without double-counting intermediate nodes.
    buffers = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = buffers.pop(node.node_id, None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            buf = buffers.get(parent.node_id)
            if buf is None:
                buffers[parent.node_id] = pg.copy() if pg.base is not None else pg
            else:
                buf += pg


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------
# element and shape ops
# ---------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(out, (a, b), grad_fn)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op(out, (a, b), grad_fn)


def scalar_mul(t, c):
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return make_op(t.data * c, (t,), grad_fn)


def relu(t):
    mask = t.data > 0.0

    def grad_fn(g):
        return (g * mask,)

    return make_op(np.where(mask, t.data, 0.0), (t,), grad_fn)


def concat(tensors, axis=1):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ValueError(
                f"concat axis={axis}: shape {t.shape} incompatible with {ref}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(out, tuple(tensors), grad_fn)


def reshape(t, shape):
    old = t.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return make_op(t.data.reshape(shape), (t,), grad_fn)


def transpose(t, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return make_op(t.data.transpose(axes), (t,), grad_fn)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return make_op(a.data @ b.data, (a, b), grad_fn)


def tensor_sum(t, axis=None, keepdims=False):
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, t.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, t.shape).copy(),)

    return make_op(out, (t,), grad_fn)


def tensor_mean(t, axis=None, keepdims=False):
    if axis is None:
        count = t.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([t.data.shape[ax] for ax in axes]))
    return scalar_mul(tensor_sum(t, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(t, axis=-1):
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return make_op(p, (t,), grad_fn)


def cross_entropy(logits, labels, reduction="mean"):
    """-log softmax(logits)[label], per row of a [N, C] logits tensor.

    ``reduction`` is "mean", "sum" or "none".
    """
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(
            f"cross_entropy labels shape {labels.shape} does not match "
            f"logits {logits.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = int(np.argmax((labels < 0) | (labels >= c)))
        raise ValueError(
            f"cross_entropy label {labels[bad]} at row {bad} outside [0, {c})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    losses = lse - logits.data[np.arange(n), labels]

    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    jac = p - onehot  # d loss_i / d logits_i

    if reduction == "none":
        def grad_fn(g):
            return (jac * g[:, None],)
        return make_op(losses, (logits,), grad_fn)
    if reduction == "sum":
        def grad_fn(g):
            return (jac * g,)
        return make_op(losses.sum(), (logits,), grad_fn)
    if reduction == "mean":
        def grad_fn(g):
            return (jac * (g / n),)
        return make_op(losses.sum() / n, (logits,), grad_fn)
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------

def _pad_amounts(k, padding):
    if padding == "same":
        if k % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel extent, got {k}")
        return (k - 1) // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """2-D convolution (cross-correlation) over [N, C, H, W].

    ``kernel`` is [K, C, kh, kw]; ``padding`` is "same" (odd kernels only)
    or "valid". Differentiable w.r.t. input, kernel and bias.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if c != ck:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {c} channels, "
            f"kernel {kernel.shape} expects {ck}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({k},)")
    stride = int(stride)
    if stride < 1:
        raise ValueError("stride must be positive")
    ph, pw = _pad_amounts(kh, padding), _pad_amounts(kw, padding)
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    kmat = kernel.data.reshape(k, c * kh * kw)

    def im2col(arr):
        win = sliding_window_view(arr, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)

    out = (im2col(xp) @ kmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        cols = im2col(xp)  # recomputed to avoid holding the big buffer
        dkernel = (gmat.T @ cols).reshape(k, c, kh, kw)
        dwin = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dwin[..., i, j]
        dx = dxp[:, :, ph:ph + h, pw:pw + w]
        if bias is not None:
            return dx, dkernel, g.sum(axis=(0, 2, 3))
        return dx, dkernel

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out, parents, grad_fn)


def avg_pool(x, window, stride=1, border="count_valid", padding="same"):
    """Average pooling over [N, C, H, W].

    ``border="count_valid"`` divides each window by its number of
    in-bounds cells; ``"zero_pad"`` always divides by wh*ww. "same"
    padding pads by window-1 in total (left-biased for even windows) so
    stride 1 preserves the spatial shape; "valid" does not pad.
    """
    wh, ww = int(window[0]), int(window[1])
    if wh < 1 or ww < 1:
        raise ValueError(f"avg_pool window must be positive, got {(wh, ww)}")
    if border not in ("count_valid", "zero_pad"):
        raise ValueError(f"unknown border mode {border!r}")
    n, c, h, w = x.shape
    stride = int(stride)
    if padding == "same":
        pt, pl = (wh - 1) // 2, (ww - 1) // 2
        pb, pr = wh - 1 - pt, ww - 1 - pl
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if wh > h + pt + pb or ww > w + pl + pr:
        raise ValueError(
            f"avg_pool window {(wh, ww)} exceeds padded extent of input {x.shape}")
    ho = (h + pt + pb - wh) // stride + 1
    wo = (w + pl + pr - ww) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    sums = sliding_window_view(xp, (wh, ww), axis=(2, 3))[:, :, ::stride, ::stride]
    sums = sums.sum(axis=(4, 5))
    if border == "zero_pad":
        div = np.full((ho, wo), float(wh * ww))
    else:
        ones = np.pad(np.ones((h, w)), ((pt, pb), (pl, pr)))
        div = sliding_window_view(ones, (wh, ww))[::stride, ::stride].sum(axis=(2, 3))
        if (div == 0).any():
            raise ValueError("avg_pool window with no in-bounds cells")
    out = sums / div

    def grad_fn(g):
        gd = g / div
        dxp = np.zeros_like(xp)
        for i in range(wh):
            for j in range(ww):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gd
        return (dxp[:, :, pt:pt + h, pl:pl + w],)

    return make_op(out, (x,), grad_fn)


class BatchNormState:
    """Per-channel batch-norm parameters and running statistics.

    ``gamma``/``beta`` are trainable tensors; running statistics start
    uninitialized and are first populated by a train-mode forward pass.
    """

    def __init__(self, channels, momentum=0.1, epsilon_num=1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0,1), got {momentum}")
        self.channels = int(channels)
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = None
        self.running_var = None
        self.momentum = float(momentum)
        self.epsilon_num = float(epsilon_num)
        self.mode = "train"

    @property
    def initialized(self):
        return self.running_mean is not None


def batch_norm(x, state):
    """Batch normalization over [N, C, H, W] with per-channel statistics.

    Train mode normalizes with batch statistics (biased variance) and
    updates the running estimates by exponential moving average; eval
    mode is a deterministic affine map using the running estimates.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ValueError(
            f"batch_norm state has {state.channels} channels, input has {c}")
    gamma, beta = state.gamma, state.beta
    eps = state.epsilon_num
    axes = (0, 2, 3)

    if state.mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError(f"batch_norm train mode needs N*H*W >= 2, got {m}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state.running_mean is None:
            state.running_mean = mean.copy()
            state.running_var = var.copy()
        else:
            mom = state.momentum
            state.running_mean = (1 - mom) * state.running_mean + mom * mean
            state.running_var = (1 - mom) * state.running_var + mom * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

        def grad_fn(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            gm = g.mean(axis=axes).reshape(1, c, 1, 1)
            gxm = (g * xhat).mean(axis=axes).reshape(1, c, 1, 1)
            dx = (gamma.data.reshape(1, c, 1, 1) * inv_std.reshape(1, c, 1, 1)
                  * (g - gm - xhat * gxm))
            return dx, dgamma, dbeta

        return make_op(out, (x, gamma, beta), grad_fn)

    if state.mode == "eval":
        if not state.initialized:
            raise ValueError(
                "batch_norm eval mode with uninitialized running statistics")
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = ((x.data - state.running_mean.reshape(1, c, 1, 1))
                * inv_std.reshape(1, c, 1, 1))
        out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

        def grad_fn(g):
            dx = g * (gamma.data * inv_std).reshape(1, c, 1, 1)
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_op(out, (x, gamma, beta), grad_fn)

    raise ValueError(f"unknown batch_norm mode {state.mode!r}")
