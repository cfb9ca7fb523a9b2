"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a float64 numpy array. Operations build a computation graph:
every result produced from at least one grad-requiring input keeps references
to its parents and a vector-Jacobian rule. backward() linearizes the graph
reachable from a scalar loss into a Tape (topological order) and accumulates
gradients into leaf tensors.

Broadcasting is deliberately restricted to bias-add and scalar multiplication;
everything else demands exact shapes so each backward rule stays small enough
to verify against finite differences.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError

DTYPE = np.float64


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh formulation is overflow-free and a single ufunc pass
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Tensor:
    """Dense n-d array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op_name")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._op_name = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, tape: "Tape | None" = None) -> None:
        backward(self, tape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op_name}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, smul(other, -1.0))

    def __neg__(self) -> "Tensor":
        return smul(self, -1.0)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return smul(self, float(other))

    def __truediv__(self, other) -> "Tensor":
        return smul(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, name: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
        out._op_name = name
    else:
        out._parents = ()
        out._vjp = None
        out._op_name = name
    return out


class Tape:
    """Topologically ordered list of recorded operations.

    Each entry is the output tensor of one operation, holding references to
    its input tensors and the backward rule. Parents always precede children,
    so reverse iteration is a valid reverse-mode sweep.
    """

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    def __len__(self) -> int:
        return len(self.ops)

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        """Linearize the graph reachable from root in topological order."""
        ops: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                ops.append(node)
                continue
            if id(node) in visited or not node._parents:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._parents:
                    stack.append((p, False))
        return cls(ops)


def backward(loss: Tensor, tape: Tape | None = None,
             leaves: Sequence[Tensor] | None = None) -> None:
    """Populate gradients of every grad-requiring leaf reachable from loss.

    When `leaves` is given, any listed leaf left untouched by the sweep gets
    an explicit zero gradient. Gradients accumulate into existing .grad
    buffers; call zero_grad between steps.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if tape is None:
        tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}

    if not tape.ops and loss.requires_grad:
        # loss is itself a leaf
        g = grads[id(loss)]
        loss.grad = g.copy() if loss.grad is None else loss.grad + g
    for node in reversed(tape.ops):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        partials = node._vjp(g)
        for parent, pg in zip(node._parents, partials):
            if pg is None:
                continue
            if parent._parents:
                k = id(parent)
                prev = grads.get(k)
                grads[k] = pg if prev is None else prev + pg
            elif parent.requires_grad:
                # vjp outputs may be shared between parents; copy on first sink
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    if leaves is not None:
        for t in leaves:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a trailing-axis bias vector for b."""
    if a.shape == b.shape:
        def vjp(g):
            return g, g
        return _make(a.data + b.data, (a, b), vjp, "add")
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.data.ndim - 1))

        def vjp(g):
            return g, g.sum(axis=lead) if lead else g
        return _make(a.data + b.data, (a, b), vjp, "add_bias")
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors in one graph node."""
    if not tensors:
        raise DimensionError("add_n: empty input")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"add_n: shape {t.shape} differs from {shape}")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data

    def vjp(g):
        return tuple(g for _ in tensors)
    return _make(total, tuple(tensors), vjp, "add_n")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad
    return _make(ad * bd, (a, b), vjp, "mul")


def smul(x: Tensor, c: float) -> Tensor:
    def vjp(g):
        return (g * c,)
    return _make(x.data * c, (x,), vjp, "smul")


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar (0-d) tensor."""
    if s.data.shape != ():
        raise DimensionError(f"scale: scalar expected, got shape {s.shape}")
    xd, sd = x.data, float(s.data)

    def vjp(g):
        return g * sd, np.asarray((g * xd).sum(), dtype=DTYPE)
    return _make(xd * sd, (x, s), vjp, "scale")


def index_scalar(v: Tensor, i: int) -> Tensor:
    """Extract element i of a vector as a 0-d tensor."""
    if v.data.ndim != 1:
        raise DimensionError(f"index_scalar: vector expected, got shape {v.shape}")

    def vjp(g):
        gv = np.zeros_like(v.data)
        gv[i] = g
        return (gv,)
    return _make(np.asarray(v.data[i], dtype=DTYPE), (v,), vjp, "index_scalar")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g
    return _make(ad @ bd, (a, b), vjp, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b with a broadcast bias row."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} vs width {w.shape[1]}")
    xd, wd = x.data, w.data

    def vjp(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)
    return _make(xd @ wd + b.data, (x, w, b), vjp, "affine")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: 2-d tensor expected, got shape {x.shape}")

    def vjp(g):
        return (g.T,)
    return _make(x.data.T, (x,), vjp, "transpose")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape

    def vjp(g):
        return (g.reshape(old),)
    return _make(x.data.reshape(shape), (x,), vjp, "reshape")


def col_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis."""
    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)
    return _make(np.ascontiguousarray(x.data[..., start:stop]), (x,), vjp, "col_slice")


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.shape[-1] for p in parts]

    def vjp(g):
        out, ofs = [], 0
        for w in widths:
            out.append(np.ascontiguousarray(g[..., ofs:ofs + w]))
            ofs += w
        return tuple(out)
    return _make(np.concatenate([p.data for p in parts], axis=-1),
                 tuple(parts), vjp, "concat_last")


def stack0(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise DimensionError(f"stack0: shape {p.shape} differs from {shape}")

    def vjp(g):
        return tuple(g[i] for i in range(len(parts)))
    return _make(np.stack([p.data for p in parts], axis=0), tuple(parts), vjp, "stack0")


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows by index; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)
    return _make(x.data[idx], (x,), vjp, "take_rows")


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full_like(x.data, float(g)),)
    return _make(np.asarray(x.data.sum(), dtype=DTYPE), (x,), vjp, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def vjp(g):
        return (np.full_like(x.data, float(g) / n),)
    return _make(np.asarray(x.data.mean(), dtype=DTYPE), (x,), vjp, "mean_all")


def mean_axis0(x: Tensor) -> Tensor:
    """Mean over the leading axis: [T, d] -> [d]."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_axis0: 2-d tensor expected, got shape {x.shape}")
    t = x.shape[0]

    def vjp(g):
        return (np.broadcast_to(g / t, x.data.shape).copy(),)
    return _make(x.data.mean(axis=0), (x,), vjp, "mean_axis0")


def segment_mean(x: Tensor, n: int) -> Tensor:
    """Adaptive average pooling of [T, d] into n equal time segments."""
    if x.data.ndim != 2:
        raise DimensionError(f"segment_mean: 2-d tensor expected, got shape {x.shape}")
    t = x.shape[0]
    if t < n:
        raise DimensionError(f"segment_mean: cannot pool {t} frames into {n} segments")
    bounds = [(i * t // n, (i + 1) * t // n) for i in range(n)]
    out = np.stack([x.data[s:e].mean(axis=0) for s, e in bounds])

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i, (s, e) in enumerate(bounds):
            gx[s:e] += g[i] / (e - s)
        return (gx,)
    return _make(out, (x,), vjp, "segment_mean")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at the kink

    def vjp(g):
        return (g * mask,)
    return _make(np.where(mask, x.data, 0.0), (x,), vjp, "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def vjp(g):
        return (g * s * (1.0 - s),)
    return _make(s, (x,), vjp, "sigmoid")


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def vjp(g):
        return (g * (s + out * (1.0 - s)),)
    return _make(out, (x,), vjp, "swish")


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: value half times sigmoid(gate half)."""
    d2 = x.shape[-1]
    if d2 % 2 != 0:
        raise DimensionError(f"glu: last dimension must be even, got {d2}")
    d = d2 // 2
    val = x.data[..., :d]
    gate = _sigmoid(x.data[..., d:])

    def vjp(g):
        gx = np.empty_like(x.data)
        gx[..., :d] = g * gate
        gx[..., d:] = g * val * gate * (1.0 - gate)
        return (gx,)
    return _make(val * gate, (x,), vjp, "glu")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by the per-slice max."""
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax: empty last axis in shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)
    return _make(y, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each slice along the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise DimensionError(f"layer_norm: eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(x.data.ndim - 1))

    def vjp(g):
        gxhat = g * gamma.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        ggamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbeta = g.sum(axis=lead) if lead else g
        return gx, ggamma, gbeta
    return _make(gamma.data * xhat + beta.data, (x, gamma, beta), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 2-d cross-correlation: [C_in,H,W] -> [C_out,H,W]."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d: need x[C,H,W] and kernel[Co,Ci,kh,kw], got {x.shape}/{kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d: {x.shape[0]} input channels vs kernel {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")
    _, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    out = np.empty((c_out, h, w), dtype=DTYPE)
    out[:] = bias.data[:, None, None]
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(kernel.data[:, :, i, j], xp[:, i:i + h, j:j + w], axes=1)

    def vjp(g):
        gb = g.sum(axis=(1, 2))
        gk = np.zeros_like(kernel.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + h, j:j + w]
                gk[:, :, i, j] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
                gxp[:, i:i + h, j:j + w] += np.tensordot(kernel.data[:, :, i, j].T, g, axes=1)
        gx = gxp[:, ph:ph + h, pw:pw + w]
        return gx, gk, gb
    return _make(out, (x, kernel, bias), vjp, "conv2d")


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel same-padded 1-d convolution: [T,d] with a k-tap kernel per channel."""
    if x.data.ndim != 2 or kernel.data.ndim != 2:
        raise DimensionError(
            f"depthwise_conv1d: need x[T,d] and kernel[d,k], got {x.shape}/{kernel.shape}")
    t, d = x.shape
    dk, k = kernel.shape
    if dk != d:
        raise DimensionError(f"depthwise_conv1d: {d} channels vs kernel {dk}")
    if k % 2 == 0:
        raise DimensionError(f"depthwise_conv1d: kernel width must be odd, got {k}")
    p = k // 2
    xp = np.pad(x.data, ((p, p), (0, 0)))
    out = np.zeros((t, d), dtype=DTYPE)
    for j in range(k):
        out += xp[j:j + t] * kernel.data[:, j]

    def vjp(g):
        gk = np.empty_like(kernel.data)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gk[:, j] = (g * xp[j:j + t]).sum(axis=0)
            gxp[j:j + t] += g * kernel.data[:, j]
        return gxp[p:p + t], gk
    return _make(out, (x, kernel), vjp, "depthwise_conv1d")


def conv1d_strided(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Strided dense 1-d convolution over time: [T,d_in] -> [ceil(T/stride),d_out].

    Kernel layout [d_out, d_in, k] with k odd; padding k//2 on both ends.
    """
    if x.data.ndim != 2 or kernel.data.ndim != 3:
        raise DimensionError(
            f"conv1d_strided: need x[T,d] and kernel[do,di,k], got {x.shape}/{kernel.shape}")
    t, d_in = x.shape
    d_out, d_in_k, k = kernel.shape
    if d_in_k != d_in:
        raise DimensionError(f"conv1d_strided: {d_in} channels vs kernel {d_in_k}")
    if k % 2 == 0:
        raise DimensionError(f"conv1d_strided: kernel width must be odd, got {k}")
    if bias.shape != (d_out,):
        raise DimensionError(f"conv1d_strided: bias must have shape ({d_out},)")
    p = k // 2
    t_out = (t + 2 * p - k) // stride + 1
    xp = np.pad(x.data, ((p, p), (0, 0)))
    out = np.empty((t_out, d_out), dtype=DTYPE)
    out[:] = bias.data
    taps = [xp[j:j + stride * (t_out - 1) + 1:stride] for j in range(k)]
    for j in range(k):
        out += taps[j] @ kernel.data[:, :, j].T

    def vjp(g):
        gb = g.sum(axis=0)
        gk = np.empty_like(kernel.data)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gk[:, :, j] = g.T @ taps[j]
            gxp[j:j + stride * (t_out - 1) + 1:stride] += g @ kernel.data[:, :, j]
        return gxp[p:p + t], gk, gb
    return _make(out, (x, kernel, bias), vjp, "conv1d_strided")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [B,C], got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: labels must have shape ({b},), got {labels.shape}")
    bad = np.nonzero((labels < 0) | (labels >= c))[0]
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {c})")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    picked = logits.data[np.arange(b), labels]
    loss = (lse - picked).mean()

    def vjp(g):
        p = np.exp(logits.data - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(b), labels] -= 1.0
        return (p * (float(g) / b),)
    return _make(np.asarray(loss, dtype=DTYPE), (logits,), vjp, "cross_entropy")
