"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Just enough machinery to train the toy focus network: elementwise arithmetic,
matmul, (transposed/dilated) 2-D convolution over NCHW batches, softmax,
sigmoid, relu, concat, tiling, bilinear (outer-product) pooling with its
normalizations, and an Adam optimizer.  The computation graph is recorded
implicitly through parent links; ``backward`` replays it in reverse
topological order and accumulates gradients additively.

Training arithmetic is float32; gradient-check oracles feed float64 inputs and
every op preserves its input dtype.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import NotScalar, ShapeMismatch

FFCK_MAGIC = b"FFCK"


class Tensor:
    """Dense n-dimensional array with a gradient slot and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=np.result_type(self.data, np.float32))
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


def tensor(data, requires_grad=False, dtype=np.float32, name=""):
    """Leaf tensor constructor, float32 by default."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively: calling backward twice without zeroing
    doubles every gradient.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward is None:
            # leaf
            node.accumulate_grad(g)
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                if parent._backward is None and not parent._parents:
                    parent.accumulate_grad(pg)
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# --- elementwise and shape ops ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def back(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return Tensor(out_data, parents=(a, b), backward=back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def back(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return Tensor(out_data, parents=(a, b), backward=back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def back(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return Tensor(out_data, parents=(a, b), backward=back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        return ((a, g * c),)

    return Tensor(a.data * c, parents=(a,), backward=back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        return ((a, g * mask),)

    return Tensor(a.data * mask, parents=(a,), backward=back)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        return ((a, g * y * (1.0 - y)),)

    return Tensor(y, parents=(a,), backward=back)


def signed_sqrt(a: Tensor, eps: float = 1e-8) -> Tensor:
    root = np.sqrt(np.abs(a.data))
    y = np.sign(a.data) * root

    def back(g):
        return ((a, g * 0.5 / np.maximum(root, eps)),)

    return Tensor(y, parents=(a,), backward=back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((a, y * (g - dot)),)

    return Tensor(y, parents=(a,), backward=back)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.maximum(np.sqrt((a.data**2).sum(axis=axis, keepdims=True)), eps)
    y = a.data / norm

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((a, (g - y * dot) / norm),)

    return Tensor(y, parents=(a,), backward=back)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        return ((a, g.reshape(a.shape)),)

    return Tensor(a.data.reshape(shape), parents=(a,), backward=back)


def tile(a: Tensor, axis: int, n: int) -> Tensor:
    """Repeat a length-1 axis n times."""
    if a.shape[axis] != 1:
        raise ShapeMismatch(f"tile needs axis {axis} of size 1, got shape {a.shape}")
    reps = [1] * a.data.ndim
    reps[axis] = n

    def back(g):
        return ((a, g.sum(axis=axis, keepdims=True)),)

    return Tensor(np.tile(a.data, reps), parents=(a,), backward=back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, pieces))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tensors, backward=back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def back(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return ((a, ga),)

    return Tensor(a.data[index].copy(), parents=(a,), backward=back)


def tensor_sum(a: Tensor) -> Tensor:
    def back(g):
        return ((a, np.full(a.shape, g, dtype=a.data.dtype)),)

    return Tensor(a.data.sum(), parents=(a,), backward=back)


def mean_pool(a: Tensor, axis) -> Tensor:
    """Mean over one or more axes (kept out of the shape)."""
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def back(g):
        ge = np.expand_dims(g, axes)
        return ((a, np.broadcast_to(ge, a.shape) / count),)

    return Tensor(a.data.mean(axis=axes), parents=(a,), backward=back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def back(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return Tensor(a.data @ b.data, parents=(a, b), backward=back)


# --- convolution ------------------------------------------------------------


def _conv_out_size(size, k, stride, dilation, padding):
    eff = (k - 1) * dilation + 1
    return (size + 2 * padding - eff) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution over an NCHW batch; weight is (OC, IC, KH, KW)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input/weight, got {x.shape} and {w.shape}")
    n, ic, h, wd = x.shape
    oc, wic, kh, kw = w.shape
    if wic != ic:
        raise ShapeMismatch(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    oh = _conv_out_size(h, kh, stride, dilation, padding)
    ow = _conv_out_size(wd, kw, stride, dilation, padding)
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, ic, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            ys = i * dilation
            xs = j * dilation
            cols[:, :, i, j] = xp[:, :, ys : ys + (oh - 1) * stride + 1 : stride, xs : xs + (ow - 1) * stride + 1 : stride]
    cols2 = cols.reshape(n, ic * kh * kw, oh * ow)
    wm = w.data.reshape(oc, ic * kh * kw)
    out = np.matmul(wm, cols2).reshape(n, oc, oh, ow)
    if b is not None:
        out = out + b.data.reshape(1, oc, 1, 1)

    def back(g):
        gm = g.reshape(n, oc, oh * ow)
        dw = np.matmul(gm, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(wm.T, gm).reshape(n, ic, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                ys = i * dilation
                xs = j * dilation
                dxp[:, :, ys : ys + (oh - 1) * stride + 1 : stride, xs : xs + (ow - 1) * stride + 1 : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding : padding + h, padding : padding + wd]
        grads = [(x, dx), (w, dw)]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=back)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed 2-D convolution; weight is (IC, OC, KH, KW).

    Output spatial size is (H - 1) * stride - 2 * padding + KH.  With the
    default 4x4 kernel, stride 2, padding 1 this exactly doubles resolution.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"transposed_conv2d expects 4-D input/weight, got {x.shape} and {w.shape}")
    n, ic, h, wd = x.shape
    wic, oc, kh, kw = w.shape
    if wic != ic:
        raise ShapeMismatch(f"transposed_conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    hf = (h - 1) * stride + kh
    wf = (wd - 1) * stride + kw
    oh = hf - 2 * padding
    ow = wf - 2 * padding
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"transposed_conv2d output would be empty for input {x.shape}")

    full = np.zeros((n, oc, hf, wf), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + (h - 1) * stride + 1 : stride, j : j + (wd - 1) * stride + 1 : stride] += np.einsum(
                "nchw,co->nohw", x.data, w.data[:, :, i, j], optimize=True
            )
    out = full[:, :, padding : padding + oh, padding : padding + ow]
    if b is not None:
        out = out + b.data.reshape(1, oc, 1, 1)

    def back(g):
        gfull = np.zeros((n, oc, hf, wf), dtype=g.dtype)
        gfull[:, :, padding : padding + oh, padding : padding + ow] = g
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                gslice = gfull[:, :, i : i + (h - 1) * stride + 1 : stride, j : j + (wd - 1) * stride + 1 : stride]
                dx += np.einsum("nohw,co->nchw", gslice, w.data[:, :, i, j], optimize=True)
                dw[:, :, i, j] = np.einsum("nchw,nohw->co", x.data, gslice, optimize=True)
        grads = [(x, dx), (w, dw)]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=back)


def outer_product_pool(x: Tensor) -> Tensor:
    """Bilinear pooling: per sample, B = V V^T over flattened space, then the
    mean over B's second axis, giving one value per channel."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"outer_product_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    m = x.data.reshape(n, c, h * w)
    bmat = np.matmul(m, m.transpose(0, 2, 1))
    pooled = bmat.mean(axis=2)

    def back(g):
        # d/dM of mean_j (M M^T)[i, j] splits symmetrically over both factors
        db = (g[:, :, None] + g[:, None, :]) / c
        dm = np.matmul(db, m)
        return ((x, dm.reshape(x.shape)),)

    return Tensor(pooled, parents=(x,), backward=back)


def apply_loss(x: Tensor, fn) -> Tensor:
    """Splice a numpy loss with analytic gradient into the graph.

    ``fn`` maps x.data to (scalar value, gradient array of x's shape).
    """
    value, grad = fn(x.data)
    grad = np.asarray(grad)
    if grad.shape != x.data.shape:
        raise ShapeMismatch(f"loss gradient shape {grad.shape} vs input {x.shape}")

    def back(g):
        return ((x, grad * g),)

    return Tensor(np.asarray(value, dtype=np.float64), parents=(x,), backward=back)


# --- optimizer --------------------------------------------------------------


class Adam:
    """Adam with bias correction; defaults follow the training recipe."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional single Adam update.

    ``state`` is (t, [m...], [v...]) or None for a fresh start; returns
    (updated params, updated state) without mutating the inputs.
    """
    if state is None:
        state = (0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    t, ms, vs = state
    t += 1
    new_params, new_ms, new_vs = [], [], []
    for p, g, m, v in zip(params, grads, ms, vs):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_ms.append(m)
        new_vs.append(v)
    return new_params, (t, new_ms, new_vs)


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(path, named_params: dict) -> None:
    """Write named float32 arrays: "FFCK", then per entry a u32 name length,
    UTF-8 name, u32 rank, u32 dims, and f32 data, all little-endian."""
    with open(path, "wb") as f:
        f.write(FFCK_MAGIC)
        for name, value in named_params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = arr.astype("<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    out = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FFCK_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            out[name] = data.copy()
    return out
