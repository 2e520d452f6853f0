"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Just enough machinery to train small transformers: numpy arrays wrapped in a
Tensor that records, per produced node, its parents and a backward closure.
Calling backward() replays those closures in reverse topological order, which
is equivalent to walking a recorded tape backwards. Gradients accumulate
across uses of a tensor, so residual connections work without special cases.

Precision follows the data you put in: float64 for gradient-check builds,
float32 for training runs. All randomness lives outside this module.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_erf_vec = np.vectorize(math.erf)

# Stack of active MAC counters; matmul/linear report into all of them.
_mac_counters: list["MacCounter"] = []


class MacCounter:
    """Counts multiply-accumulates of every matmul/linear run inside `with`.

    Only matrix products are tallied; softmax, layernorm, GELU, bias adds and
    elementwise scaling contribute no MACs, matching the cost model in
    metrics.count_flops.
    """

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _mac_counters.append(self)
        return self

    def __exit__(self, *exc):
        _mac_counters.remove(self)
        return False


def _record_macs(n):
    for c in _mac_counters:
        c.total += n


def _unbroadcast(grad, shape):
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus the gradient record needed for reverse mode.

    `data` may alias external storage (supernet slices); in-place writes to
    the underlying buffer are visible through the tensor, which is what lets
    an optimizer step on a subnet view write straight into the weight store.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Run reverse-mode accumulation from this node.

        Without an explicit seed gradient the node must be scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)

        order = []
        seen = set()
        stack = [(self, False)]
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

        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _as_tensor(x, like=None):
    """Coerce to Tensor; bare scalars adopt `like`'s dtype to avoid upcasts."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.data.dtype:
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- elementwise / structural ops ------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _make(-a.data, (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return _make(out_data, (a,), backward)


def broadcast_to(a, shape):
    a = _as_tensor(a)
    out_data = np.broadcast_to(a.data, shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))

    return _make(out_data, (a,), backward)


def getitem(a, key):
    """Basic (slice/int) indexing with scatter-add backward."""
    a = _as_tensor(a)
    out_data = a.data[key]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            a.accumulate_grad(full)

    return _make(out_data, (a,), backward)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + size)
                t.accumulate_grad(g[tuple(idx)])
            start += size

    return _make(out_data, tensors, backward)


def tsum(a):
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward)


def tmean(a):
    a = _as_tensor(a)
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype))

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), backward)


# -- matrix products ---------------------------------------------------------


def matmul(a, b):
    """Matrix product, 2-D or batched with broadcastable batch dims.

    Backward accumulates dA = dC @ B^T and dB = A^T @ dC (batch dims summed
    back down when they were broadcast).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}"
        )
    out_data = a.data @ b.data
    m, k = a.data.shape[-2], a.data.shape[-1]
    n = b.data.shape[-1]
    batch = int(np.prod(out_data.shape[:-2], dtype=np.int64)) if out_data.ndim > 2 else 1
    _record_macs(batch * m * k * n)

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def linear(x, w, b=None):
    """y = x @ w.T (+ b) for x of shape (..., in), w of shape (out, in)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.shape[-1] != w.data.shape[-1]:
        raise ShapeError(
            f"linear input width {x.data.shape} does not match weight {w.data.shape}"
        )
    out_features, in_features = w.data.shape
    out_data = x.data @ w.data.T
    if b is not None:
        b = _as_tensor(b)
        out_data = out_data + b.data
    rows = x.data.size // in_features
    _record_macs(rows * in_features * out_features)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, out_features)
        if x.requires_grad:
            x.accumulate_grad((g2 @ w.data).reshape(x.data.shape))
        if w.requires_grad:
            w.accumulate_grad(g2.T @ x.data.reshape(-1, in_features))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0))

    return _make(out_data, parents, backward)


# -- nonlinearities ----------------------------------------------------------


def softmax_rows(x):
    """Row-stable softmax over the last axis.

    Each output row is nonnegative and sums to 1; the per-row max is
    subtracted first so large inputs cannot overflow. NaN inputs propagate
    NaN, by design.
    """
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x.accumulate_grad(y * (g - dot))

    return _make(y, (x,), backward)


def layernorm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layernorm eps must be > 0, got {eps}")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, xhat.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv_std * (gh - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), backward)


def gelu(x, form="tanh"):
    """GELU activation; `form` is "tanh" (default) or "erf".

    The chosen form is part of a model's identity and gets serialized with
    its checkpoints.
    """
    x = _as_tensor(x)
    v = x.data
    if form == "tanh":
        inner = _SQRT_2_OVER_PI * (v + _GELU_CUBIC * v**3)
        t = np.tanh(inner)
        out_data = 0.5 * v * (1.0 + t)

        def backward(g):
            if x.requires_grad:
                d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * v * v)
                deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner
                x.accumulate_grad(g * deriv)

    elif form == "erf":
        erf_part = _erf_vec(v * _INV_SQRT2).astype(v.dtype)
        out_data = 0.5 * v * (1.0 + erf_part)

        def backward(g):
            if x.requires_grad:
                pdf = np.exp(-0.5 * v * v) * _INV_SQRT_2PI
                deriv = 0.5 * (1.0 + erf_part) + v * pdf
                x.accumulate_grad(g * deriv)

    else:
        raise ValueError(f"unknown GELU form {form!r} (expected 'tanh' or 'erf')")

    return _make(out_data, (x,), backward)


def cross_entropy(logits, labels, smoothing=0.0):
    """Mean label-smoothed negative log-likelihood over the batch.

    With smoothing s, the target distribution is (1-s)*onehot + s/C;
    smoothing 0 is plain cross-entropy.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.data.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, num_classes = logits.data.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")

    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse

    target = np.full_like(z, smoothing / num_classes)
    target[np.arange(batch), labels] += 1.0 - smoothing
    loss = -(target * logp).sum(axis=-1).mean()

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            logits.accumulate_grad((p - target) * (g / batch))

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# -- optimizer ---------------------------------------------------------------


class AdamW:
    """AdamW with per-element moment state, so slice-restricted updates only
    ever touch the moments of the elements they update.

    Each element carries its own step count; bias correction therefore treats
    an element that has received k gradients exactly like step k of a scalar
    Adam, regardless of what the rest of the tensor has been doing. Decoupled
    weight decay is applied only to elements updated this step.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {}

    def _slot(self, name, param):
        slot = self.state.get(name)
        if slot is None:
            slot = {
                "m": np.zeros_like(param),
                "v": np.zeros_like(param),
                "t": np.zeros(param.shape, dtype=np.float32),
            }
            self.state[name] = slot
        return slot

    def step(self, updates, lr=None):
        """Apply one step to every (name, param, region, grad, decay) record.

        `param` is the full backing array, `region` a tuple of slices into
        it, `grad` an array matching the region, `decay` whether decoupled
        weight decay applies to this slot.
        """
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        for name, param, region, grad, decay in updates:
            slot = self._slot(name, param)
            m, v, t = slot["m"][region], slot["v"][region], slot["t"][region]
            t += 1.0
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            slot["m"][region] = m
            slot["v"][region] = v
            slot["t"][region] = t
            # bias correction in float64: step counts are small integers but
            # beta powers need more precision than float32 carries
            t64 = t.astype(np.float64)
            m_hat = m / (1.0 - b1**t64)
            v_hat = v / (1.0 - b2**t64)
            upd = m_hat / (np.sqrt(v_hat) + self.eps)
            if decay and self.weight_decay:
                upd = upd + self.weight_decay * param[region]
            param[region] -= (lr * upd).astype(param.dtype, copy=False)
