"""Minimal reverse-mode autodiff over dense numpy arrays.

A dynamic tape is rebuilt on every forward pass: each op returns a Tensor
holding its parents and a closure that routes output gradients backward.
float32 is the working precision; every op also runs in float64 (dtype
follows the inputs), which is what the finite-difference checker uses.
Reductions are sequential numpy reductions, so results do not depend on
thread counts; matmul is delegated to BLAS (pin threads for bit-exact runs).
"""

from __future__ import annotations

import numpy as np

from . import kernels

_DEBUG_FINITE = False
_NO_GRAD = False
MASK_FILL = -1e9  # additive logit bias for masked attention slots


def set_debug(flag: bool) -> None:
    """Enable per-op finiteness assertions (slow; tests only)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = flag


class no_grad:
    """Context manager suppressing tape construction (inference paths)."""

    def __enter__(self):
        global _NO_GRAD
        self._prev = _NO_GRAD
        _NO_GRAD = True

    def __exit__(self, *exc):
        global _NO_GRAD
        _NO_GRAD = self._prev
        return False


class Tensor:
    """Dense array plus optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add to the gradient buffer; `owned` marks arrays safe to adopt."""
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
            owned = True
        if self.grad is None:
            self.grad = g if owned and g.shape == self.data.shape else np.array(
                np.broadcast_to(g, self.data.shape)
            )
        else:
            self.grad += g

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def permute(self, *axes):
        return permute(self, axes if len(axes) > 1 else axes[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    out = Tensor(data)
    if not _NO_GRAD and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
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
# Primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a.accumulate(ga, owned=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            b.accumulate(gb, owned=gb is not g)

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a.accumulate(ga, owned=ga is not g)
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def smul(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.data.dtype.type(s)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * s, owned=True)

    return _make(a.data * s, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(_unbroadcast(gb, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    return permute(a, axes)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def slice_(a, key) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g
            a.accumulate(full, owned=True)

    return _make(a.data[key], (a,), backward)


def index_select(a, indices) -> Tensor:
    """Gather rows along axis 0 by an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(indices)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a.accumulate(full, owned=True)

    return _make(a.data[idx], (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return smul(sum_(a, axis, keepdims), 1.0 / float(count))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * out_data, owned=True)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g / a.data, owned=True)

    return _make(np.log(a.data), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(-a.data)
    out_data += 1.0
    np.reciprocal(out_data, out=out_data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * out_data * (1.0 - out_data), owned=True)

    return _make(out_data, (a,), backward)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = np.exp(-a.data)
    sig += 1.0
    np.reciprocal(sig, out=sig)
    out_data = a.data * sig

    def backward(g):
        if a.requires_grad:
            inner = 1.0 - sig
            inner *= a.data
            inner += 1.0
            inner *= sig
            inner = inner * g
            a.accumulate(inner, owned=True)

    return _make(out_data, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std

    def backward(g):
        if not a.requires_grad:
            return
        n = a.shape[-1]
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * normed).mean(axis=-1, keepdims=True)
        a.accumulate((g - g_mean - normed * gy_mean) * inv_std, owned=True)

    return _make(normed, (a,), backward)


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, with an optional additive logit bias.

    Raises if any row is fully suppressed (max logit below the mask fill);
    callers must keep at least one unmasked slot per row.
    """
    a = as_tensor(a)
    if mask is not None and np.any(mask.max(axis=-1) <= MASK_FILL / 2):
        raise ValueError("softmax row has every slot masked")
    logits = a.data if mask is None else a.data + mask
    top = logits.max(axis=-1, keepdims=True)
    shifted = np.exp(logits - top)
    out_data = shifted
    out_data /= shifted.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            a.accumulate(out_data * (g - inner), owned=True)

    return _make(out_data, (a,), backward)


def grid_sample(features, coords) -> Tensor:
    """Bilinear sample of (B, H, W, C) maps at (B, P, 2) texel coordinates.

    Border-clamped. Differentiable w.r.t. both the maps and the coordinates
    (clamped samples have zero coordinate gradient).
    """
    features, coords = as_tensor(features), as_tensor(coords)
    cdata = coords.data
    if cdata.dtype != features.dtype:
        cdata = cdata.astype(features.dtype)
    xs = np.ascontiguousarray(cdata[..., 0])
    ys = np.ascontiguousarray(cdata[..., 1])
    feat = np.ascontiguousarray(features.data)
    out_data = kernels.bilinear_gather(feat, xs, ys)

    def backward(g):
        g = np.ascontiguousarray(g)
        if features.requires_grad:
            if not features._parents and features.grad is not None \
                    and features.grad.flags.c_contiguous:
                kernels.bilinear_scatter(features.grad, xs, ys, g)
            else:
                dfeat = np.zeros_like(feat)
                kernels.bilinear_scatter(dfeat, xs, ys, g)
                features.accumulate(dfeat, owned=True)
        if coords.requires_grad:
            dx, dy = kernels.bilinear_coord_grad(feat, xs, ys, g)
            coords.accumulate(np.stack([dx, dy], axis=-1), owned=True)

    return _make(out_data, (features, coords), backward)


# ---------------------------------------------------------------------------
# Backward driver
# ---------------------------------------------------------------------------

def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Reverse-accumulate gradients from `root` through the tape."""
    if not root.requires_grad:
        raise ValueError("root does not require gradients")
    if seed is None:
        if root.data.size != 1:
            raise ValueError("non-scalar root needs an explicit seed gradient")
        seed = np.ones_like(root.data)

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    root.accumulate(seed.astype(root.dtype))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:  # intermediate grads are not kept
                node.grad = None


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.moments = [
            (np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params
        ]
        self.zero_grad()

    def zero_grad(self) -> None:
        """Reset gradients in place, keeping the buffers allocated."""
        for p in self.params:
            if p.grad is None or p.grad.shape != p.data.shape:
                p.grad = np.zeros_like(p.data)
            else:
                p.grad.fill(0)

    def step(self) -> None:
        """One update; parameters with no gradient this step see g = 0."""
        self.t += 1
        for p, (m, v) in zip(self.params, self.moments):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if grad.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {p.name or 'param'}")
            kernels.adam_update(
                p.data.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                self.lr, self.beta1, self.beta2, self.eps, self.t,
            )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for i, (m, v) in enumerate(self.moments):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checker
# ---------------------------------------------------------------------------

def grad_check(fn, inputs: list[np.ndarray], h: float | None = None,
               max_entries: int = 512, dtype=np.float64) -> float:
    """Max relative error between tape and central-difference gradients.

    `fn` maps a list of Tensors to a scalar Tensor; it is evaluated at
    `dtype` (float64 unless asked otherwise; a float32 probe needs the
    larger default step). Inputs larger than `max_entries` are probed on a
    deterministic stride of entries. Relative error uses
    |a - b| / max(1e-8, |a| + |b|).
    """
    if h is None:
        h = 1e-4 if np.dtype(dtype) == np.float64 else 1e-2
    params = [Tensor(np.asarray(x, dtype=dtype), requires_grad=True) for x in inputs]
    out = fn(params)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        n = flat.size
        stride = max(1, n // max_entries)
        for j in range(0, n, stride):
            orig = flat[j]
            flat[j] = orig + h
            x_hi = float(flat[j])  # the step actually realized at this dtype
            hi = fn([Tensor(q.data) for q in params]).item()
            flat[j] = orig - h
            x_lo = float(flat[j])
            lo = fn([Tensor(q.data) for q in params]).item()
            flat[j] = orig
            numeric = (hi - lo) / (x_hi - x_lo)
            if not np.isfinite(numeric):
                raise FloatingPointError("non-finite finite-difference probe")
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
