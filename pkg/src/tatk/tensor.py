"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the toolkit lives in a :class:`Tensor`: a C-contiguous
float64 array plus, when gradients are enabled, a record of the operation
that produced it (input references and a backward rule). The record graph
is rebuilt on every forward pass; :meth:`Tensor.backward` walks it once in
reverse topological order and accumulates ``dLoss/dLeaf`` into every leaf
that requires a gradient.

Width is fixed at 64-bit project-wide. Broadcasting is limited to scalars;
binary ops otherwise demand equal shapes.
"""

from __future__ import annotations

import numpy as np

from tatk import kernels


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Raised on invalid use of the autodiff graph (repeat/detached backward)."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends recording of backward rules."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_f64(data) -> np.ndarray:
    # ascontiguousarray alone would promote 0-d scalars to shape (1,)
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A new leaf sharing no graph history (data is copied)."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every grad-enabled leaf.

        ``self`` must be a scalar produced by recorded operations (or a
        grad-enabled leaf). Calling backward twice on the same node is an
        error: the graph is single-use by design.
        """
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this tensor; rebuild the graph")
        if not self.requires_grad:
            raise GraphError("backward on a tensor detached from any recorded computation")
        order = self._topo_order()
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
        self._consumed = True

    def _topo_order(self) -> list["Tensor"]:
        # iterative post-order: parents precede children in the result
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _require_same_shape("add", self, other)
            out = _record(self.data + other.data, (self, other))
            if out._backward_fn is _PENDING:
                def bwd(g, a=self, b=other):
                    if a.requires_grad:
                        a._accumulate(g)
                    if b.requires_grad:
                        b._accumulate(g)
                out._backward_fn = bwd
            return out
        c = float(other)
        out = _record(self.data + c, (self,))
        if out._backward_fn is _PENDING:
            def bwd(g, a=self):
                a._accumulate(g)
            out._backward_fn = bwd
        return out

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _require_same_shape("sub", self, other)
            out = _record(self.data - other.data, (self, other))
            if out._backward_fn is _PENDING:
                def bwd(g, a=self, b=other):
                    if a.requires_grad:
                        a._accumulate(g)
                    if b.requires_grad:
                        b._accumulate(-g)
                out._backward_fn = bwd
            return out
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _require_same_shape("mul", self, other)
            out = _record(self.data * other.data, (self, other))
            if out._backward_fn is _PENDING:
                def bwd(g, a=self, b=other):
                    if a.requires_grad:
                        a._accumulate(g * b.data)
                    if b.requires_grad:
                        b._accumulate(g * a.data)
                out._backward_fn = bwd
            return out
        c = float(other)
        out = _record(self.data * c, (self,))
        if out._backward_fn is _PENDING:
            def bwd(g, a=self, k=c):
                a._accumulate(g * k)
            out._backward_fn = bwd
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self) -> "Tensor":
        """Elementwise absolute value; the subgradient at 0 is 0."""
        out = _record(np.abs(self.data), (self,))
        if out._backward_fn is _PENDING:
            def bwd(g, a=self):
                a._accumulate(g * np.sign(a.data))
            out._backward_fn = bwd
        return out

    def relu(self) -> "Tensor":
        """Elementwise max(x, 0); the subgradient at 0 is 0."""
        out = _record(np.maximum(self.data, 0.0), (self,))
        if out._backward_fn is _PENDING:
            def bwd(g, a=self):
                a._accumulate(g * (a.data > 0.0))
            out._backward_fn = bwd
        return out

    def reshape(self, shape) -> "Tensor":
        out = _record(self.data.reshape(shape), (self,))
        if out._backward_fn is _PENDING:
            def bwd(g, a=self):
                a._accumulate(np.ascontiguousarray(g).reshape(a.shape))
            out._backward_fn = bwd
        return out

    def sum(self) -> "Tensor":
        """Full reduction to a scalar tensor."""
        out = _record(np.asarray(self.data.sum()), (self,))
        if out._backward_fn is _PENDING:
            def bwd(g, a=self):
                a._accumulate(np.broadcast_to(g, a.shape))
            out._backward_fn = bwd
        return out

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# sentinel marking outputs that participate in the graph and still need
# their backward closure attached
_PENDING = object()


def _record(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = _PENDING
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the standard dA = g @ B^T, dB = A^T @ g rules."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    out = _record(a.data @ b.data, (a, b))
    if out._backward_fn is _PENDING:
        def bwd(g, A=a, B=b):
            if A.requires_grad:
                A._accumulate(g @ B.data.T)
            if B.requires_grad:
                B._accumulate(A.data.T @ g)
        out._backward_fn = bwd
    return out


PAD_MODES = ("none", "zero", "replicate")


def pad2d(x: Tensor, pad: tuple[int, int], mode: str) -> Tensor:
    """Pad the two trailing spatial axes by (ph, pw) on each side."""
    if mode not in PAD_MODES:
        raise ValueError(f"unknown padding mode {mode!r}; expected one of {PAD_MODES}")
    ph, pw = pad
    if mode == "none" or (ph == 0 and pw == 0):
        return x
    if x.ndim != 4:
        raise ShapeError(f"pad2d expects a (b,c,h,w) tensor, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if mode == "zero":
        data = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        out = _record(data, (x,))
        if out._backward_fn is _PENDING:
            def bwd(g, a=x, ph=ph, pw=pw, h=h, w=w):
                a._accumulate(g[:, :, ph : ph + h, pw : pw + w])
            out._backward_fn = bwd
        return out
    # replicate: clamp row/col indices to the border
    rows = np.clip(np.arange(-ph, h + ph), 0, h - 1)
    cols = np.clip(np.arange(-pw, w + pw), 0, w - 1)
    data = np.ascontiguousarray(x.data[:, :, rows[:, None], cols[None, :]])
    out = _record(data, (x,))
    if out._backward_fn is _PENDING:
        def bwd(g, a=x, rows=rows, cols=cols):
            gx = np.zeros_like(a.data)
            np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
            a._accumulate(gx)
        out._backward_fn = bwd
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "none",
           pad: tuple[int, int] | None = None) -> Tensor:
    """2-D cross-correlation of a (b,ci,h,w) batch with a (co,ci,kh,kw) kernel.

    ``padding`` selects the mode applied to the input before the valid
    convolution; the default amount, kh//2 by kw//2, preserves spatial size
    at stride 1. Gradients are implemented for both input and kernel.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D tensors, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape[1]} != kernel channels {kernel.shape[1]}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kh, kw = kernel.shape[2], kernel.shape[3]
    if padding != "none":
        if pad is None:
            pad = (kh // 2, kw // 2)
        x = pad2d(x, pad, padding)
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(
            f"conv2d: kernel {(kh, kw)} larger than padded input {x.shape[2:]}"
        )
    return _conv2d_valid(x, kernel, stride)


def _conv2d_valid(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    data = kernels.conv2d_forward(x.data, kernel.data, stride)
    out = _record(data, (x, kernel))
    if out._backward_fn is _PENDING:
        def bwd(g, a=x, k=kernel, s=stride):
            g = np.ascontiguousarray(g)
            if a.requires_grad:
                a._accumulate(
                    kernels.conv2d_backward_input(g, k.data, s, a.shape[2], a.shape[3])
                )
            if k.requires_grad:
                k._accumulate(
                    kernels.conv2d_backward_kernel(g, a.data, s, k.shape[2], k.shape[3])
                )
        out._backward_fn = bwd
    return out


def max_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k-by-k max pooling; ties route the gradient to the
    first maximum in row-major window order."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects a (b,c,h,w) tensor, got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: spatial dims {(h, w)} not divisible by {k}")
    oh, ow = h // k, w // k
    windows = (
        x.data.reshape(b, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, k * k)
    )
    idx = windows.argmax(axis=-1)
    data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = _record(np.ascontiguousarray(data), (x,))
    if out._backward_fn is _PENDING:
        def bwd(g, a=x, idx=idx, b=b, c=c, oh=oh, ow=ow, k=k):
            scat = np.zeros((b, c, oh, ow, k * k))
            np.put_along_axis(scat, idx[..., None], g[..., None], axis=-1)
            ga = scat.reshape(b, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(a.shape)
            a._accumulate(np.ascontiguousarray(ga))
        out._backward_fn = bwd
    return out


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilized by max subtraction."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _record(p, (x,))
    if out._backward_fn is _PENDING:
        def bwd(g, a=x, p=p):
            a._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))
        out._backward_fn = bwd
    return out


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log(probs[i, labels[i]])."""
    labels = np.asarray(labels)
    n, n_classes = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range [0, {n_classes})")
    picked = probs.data[np.arange(n), labels]
    data = np.asarray(-np.log(picked).mean())
    out = _record(data, (probs,))
    if out._backward_fn is _PENDING:
        def bwd(g, a=probs, labels=labels, picked=picked, n=n):
            ga = np.zeros_like(a.data)
            ga[np.arange(n), labels] = -g / (n * picked)
            a._accumulate(ga)
        out._backward_fn = bwd
    return out


def take_per_row(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select x[i, idx[i]] for each row i, yielding a length-b vector."""
    idx = np.asarray(idx)
    n, n_cols = x.shape
    if idx.shape != (n,):
        raise ShapeError(f"index shape {idx.shape} does not match batch {n}")
    if idx.min() < 0 or idx.max() >= n_cols:
        raise ValueError(f"index out of range [0, {n_cols})")
    out = _record(x.data[np.arange(n), idx].copy(), (x,))
    if out._backward_fn is _PENDING:
        def bwd(g, a=x, idx=idx, n=n):
            ga = np.zeros_like(a.data)
            ga[np.arange(n), idx] = g
            a._accumulate(ga)
        out._backward_fn = bwd
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias: (b,C)+(C,) or (b,c,h,w)+(c,)."""
    if bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias shape {bias.shape} incompatible with input {x.shape}")
    view = bias.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    out = _record(x.data + view, (x, bias))
    if out._backward_fn is _PENDING:
        def bwd(g, a=x, b=bias):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                axes = (0,) + tuple(range(2, g.ndim))
                b._accumulate(g.sum(axis=axes))
        out._backward_fn = bwd
    return out


def flip_hw(x: Tensor, axis: int) -> Tensor:
    """Reverse one spatial axis (2 = vertical flip, 3 = horizontal flip)."""
    if axis not in (2, 3):
        raise ValueError(f"flip axis must be 2 or 3, got {axis}")
    out = _record(np.ascontiguousarray(np.flip(x.data, axis=axis)), (x,))
    if out._backward_fn is _PENDING:
        def bwd(g, a=x, axis=axis):
            a._accumulate(np.flip(g, axis=axis))
        out._backward_fn = bwd
    return out


def rot90_hw(x: Tensor, quarters: int) -> Tensor:
    """Rotate the spatial plane by quarters*90 degrees counter-clockwise."""
    q = quarters % 4
    out = _record(np.ascontiguousarray(np.rot90(x.data, q, axes=(2, 3))), (x,))
    if out._backward_fn is _PENDING:
        def bwd(g, a=x, q=q):
            a._accumulate(np.ascontiguousarray(np.rot90(g, -q, axes=(2, 3))))
        out._backward_fn = bwd
    return out


def permute_rows(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder the batch axis by a permutation."""
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(x.shape[0])):
        raise ValueError("perm is not a permutation of the batch indices")
    out = _record(np.ascontiguousarray(x.data[perm]), (x,))
    if out._backward_fn is _PENDING:
        def bwd(g, a=x, perm=perm):
            ga = np.zeros_like(a.data)
            ga[perm] = g
            a._accumulate(ga)
        out._backward_fn = bwd
    return out


def linear_resample(x: Tensor, tap_idx: np.ndarray, tap_w: np.ndarray) -> Tensor:
    """Per-image sparse linear resampling of the spatial plane.

    Output pixel p of image n is sum_k tap_w[n,p,k] * flat(x[n])[tap_idx[n,p,k]],
    shared across channels. This one primitive realizes flips, rotations,
    affine warps, rescaling and erasing, each as a fixed tap table, so
    gradients through every geometric augmentation are exact.
    """
    if x.ndim != 4:
        raise ShapeError(f"linear_resample expects a (b,c,h,w) tensor, got {x.shape}")
    b, c, h, w = x.shape
    n_pix = h * w
    if tap_idx.shape[:2] != (b, n_pix) or tap_idx.shape != tap_w.shape:
        raise ShapeError(
            f"tap tables {tap_idx.shape}/{tap_w.shape} do not match batch {(b, n_pix)}"
        )
    n_taps = tap_idx.shape[2]
    flat = x.data.reshape(b, c, n_pix)
    gathered = np.take_along_axis(
        flat, tap_idx.reshape(b, 1, n_pix * n_taps), axis=2
    ).reshape(b, c, n_pix, n_taps)
    data = (gathered * tap_w[:, None, :, :]).sum(axis=-1).reshape(b, c, h, w)
    out = _record(np.ascontiguousarray(data), (x,))
    if out._backward_fn is _PENDING:
        def bwd(g, a=x, tap_idx=tap_idx, tap_w=tap_w, b=b, c=c, n_pix=n_pix, n_taps=n_taps):
            vals = g.reshape(b, c, n_pix, 1) * tap_w[:, None, :, :]
            ga = np.zeros((b, c, n_pix))
            n_ix = np.arange(b)[:, None, None, None]
            c_ix = np.arange(c)[None, :, None, None]
            f_ix = tap_idx[:, None, :, :]
            np.add.at(ga, (n_ix, c_ix, f_ix), vals)
            a._accumulate(ga.reshape(a.shape))
        out._backward_fn = bwd
    return out


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Concatenate along the batch axis."""
    if not parts:
        raise ValueError("concat_rows needs at least one tensor")
    base = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != base:
            raise ShapeError(f"concat_rows: trailing shapes differ: {p.shape[1:]} vs {base}")
    data = np.concatenate([p.data for p in parts], axis=0)
    out = _record(data, tuple(parts))
    if out._backward_fn is _PENDING:
        sizes = [p.shape[0] for p in parts]
        def bwd(g, parts=tuple(parts), sizes=sizes):
            start = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    p._accumulate(g[start : start + n])
                start += n
        out._backward_fn = bwd
    return out
