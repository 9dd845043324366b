"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine covers exactly the operation set the pose regressor needs:
elementwise arithmetic with broadcasting, matmul, reductions, clipped
activations, 2-D (depthwise) convolution, and the spatial/channel pooling
reductions used by the attention head. Tensors are immutable once they
participate in a graph; a backward pass walks the recorded closures in
reverse topological order exactly once per node.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (forward values only) inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if g != s:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 ndarray plus an optional position in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._prev = _prev
        self._backward: Callable[[], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    @staticmethod
    def _result(data: np.ndarray, prev: Sequence["Tensor"]) -> "Tensor":
        tracked = tuple(p for p in prev if p.requires_grad)
        if _grad_enabled and tracked:
            out = Tensor(data, requires_grad=True, _prev=tracked)
        else:
            out = Tensor(data)
        return out

    # -- basic properties -----------------------------------------------------

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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _add_grad(self, grad: np.ndarray) -> None:
        # copy on first contribution: closures may hand us views of out.grad
        if self.grad is None:
            self.grad = np.array(grad)
        else:
            self.grad += grad

    # -- elementwise arithmetic (numpy broadcasting rules) ---------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        out = Tensor._result(self.data + other.data, (self, other))
        if out.requires_grad:
            def backward():
                if self.requires_grad:
                    self._add_grad(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._add_grad(_unbroadcast(out.grad, other.data.shape))
            out._backward = backward
        return out

    def __radd__(self, other) -> "Tensor":
        return self.__add__(other)

    def __neg__(self) -> "Tensor":
        out = Tensor._result(-self.data, (self,))
        if out.requires_grad:
            def backward():
                self._add_grad(-out.grad)
            out._backward = backward
        return out

    def __sub__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        out = Tensor._result(self.data - other.data, (self, other))
        if out.requires_grad:
            def backward():
                if self.requires_grad:
                    self._add_grad(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._add_grad(_unbroadcast(-out.grad, other.data.shape))
            out._backward = backward
        return out

    def __rsub__(self, other) -> "Tensor":
        return Tensor._wrap(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        out = Tensor._result(self.data * other.data, (self, other))
        if out.requires_grad:
            def backward():
                if self.requires_grad:
                    self._add_grad(_unbroadcast(out.grad * other.data, self.data.shape))
                if other.requires_grad:
                    other._add_grad(_unbroadcast(out.grad * self.data, other.data.shape))
            out._backward = backward
        return out

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        out = Tensor._result(self.data / other.data, (self, other))
        if out.requires_grad:
            def backward():
                if self.requires_grad:
                    self._add_grad(_unbroadcast(out.grad / other.data, self.data.shape))
                if other.requires_grad:
                    g = -out.grad * self.data / (other.data * other.data)
                    other._add_grad(_unbroadcast(g, other.data.shape))
            out._backward = backward
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._wrap(other).__truediv__(self)

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise ContractError("only scalar exponents are supported")
        out = Tensor._result(self.data ** exponent, (self,))
        if out.requires_grad:
            def backward():
                self._add_grad(out.grad * exponent * self.data ** (exponent - 1))
            out._backward = backward
        return out

    # -- transcendental -------------------------------------------------------

    def exp(self) -> "Tensor":
        out = Tensor._result(np.exp(self.data), (self,))
        if out.requires_grad:
            def backward():
                self._add_grad(out.grad * out.data)
            out._backward = backward
        return out

    def sqrt(self) -> "Tensor":
        out = Tensor._result(np.sqrt(self.data), (self,))
        if out.requires_grad:
            def backward():
                # subgradient stand-in at 0 keeps zero-residual norms finite
                denom = np.maximum(out.data, 1e-150)
                self._add_grad(out.grad * 0.5 / denom)
            out._backward = backward
        return out

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        out = Tensor._result(self.data.reshape(*shape), (self,))
        if out.requires_grad:
            def backward():
                self._add_grad(out.grad.reshape(self.data.shape))
            out._backward = backward
        return out

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"T expects a 2-D tensor, got shape {self.shape}")
        out = Tensor._result(self.data.T.copy(), (self,))
        if out.requires_grad:
            def backward():
                self._add_grad(out.grad.T)
            out._backward = backward
        return out

    def __getitem__(self, index) -> "Tensor":
        out = Tensor._result(self.data[index].copy(), (self,))
        if out.requires_grad:
            def backward():
                full = np.zeros_like(self.data)
                np.add.at(full, index, out.grad)
                self._add_grad(full)
            out._backward = backward
        return out

    @staticmethod
    def concat(parts: Sequence["Tensor"], axis: int = 0) -> "Tensor":
        parts = [Tensor._wrap(p) for p in parts]
        out = Tensor._result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
        if out.requires_grad:
            sizes = [p.data.shape[axis] for p in parts]
            def backward():
                start = 0
                for p, size in zip(parts, sizes):
                    if p.requires_grad:
                        sl = [slice(None)] * out.grad.ndim
                        sl[axis] = slice(start, start + size)
                        p._add_grad(out.grad[tuple(sl)])
                    start += size
            out._backward = backward
        return out

    @staticmethod
    def stack(parts: Sequence["Tensor"], axis: int = 0) -> "Tensor":
        parts = [Tensor._wrap(p) for p in parts]
        out = Tensor._result(np.stack([p.data for p in parts], axis=axis), tuple(parts))
        if out.requires_grad:
            def backward():
                slices = np.moveaxis(out.grad, axis, 0)
                for p, g in zip(parts, slices):
                    if p.requires_grad:
                        p._add_grad(g)
            out._backward = backward
        return out

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def backward():
                g = out.grad
                if not keepdims and axis is not None:
                    g = np.expand_dims(g, axis)
                self._add_grad(np.broadcast_to(g, self.data.shape).copy())
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        out_data = self.data.max(axis=axis, keepdims=keepdims)
        out = Tensor._result(out_data, (self,))
        if out.requires_grad:
            def backward():
                expanded = out_data if keepdims else np.expand_dims(out_data, axis)
                mask = (self.data == expanded)
                count = mask.sum(axis=axis, keepdims=True)
                g = out.grad if keepdims else np.expand_dims(out.grad, axis)
                self._add_grad(mask * (g / count))
            out._backward = backward
        return out

    # -- linear algebra ---------------------------------------------------------

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeError(
                f"matmul expects 2-D operands, got {self.shape} @ {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(
                f"matmul inner extents disagree: {self.shape} @ {other.shape}")
        out = Tensor._result(self.data @ other.data, (self, other))
        if out.requires_grad:
            def backward():
                if self.requires_grad:
                    self._add_grad(out.grad @ other.data.T)
                if other.requires_grad:
                    other._add_grad(self.data.T @ out.grad)
            out._backward = backward
        return out

    # -- activations ------------------------------------------------------------

    def relu(self) -> "Tensor":
        out = Tensor._result(np.maximum(self.data, 0.0), (self,))
        if out.requires_grad:
            mask = self.data > 0.0
            def backward():
                self._add_grad(out.grad * mask)
            out._backward = backward
        return out

    def relu6(self) -> "Tensor":
        # subgradient 0 on both kinks: pass-through strictly inside (0, 6)
        out = Tensor._result(np.clip(self.data, 0.0, 6.0), (self,))
        if out.requires_grad:
            mask = (self.data > 0.0) & (self.data < 6.0)
            def backward():
                self._add_grad(out.grad * mask)
            out._backward = backward
        return out

    # -- backward pass ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar loss through the recorded graph."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax; the shift constant is detached from the graph."""
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def relu6(x: Tensor) -> Tensor:
    return x.relu6()


def _hard_sigmoid_data(x: np.ndarray) -> np.ndarray:
    return np.clip(x + 3.0, 0.0, 6.0) * (1.0 / 6.0)


def h_sigmoid(x: Tensor) -> Tensor:
    """Elementwise relu6(x + 3) / 6, fused into one graph node."""
    gate = _hard_sigmoid_data(x.data)
    out = Tensor._result(gate, (x,))
    if out.requires_grad:
        mask = (x.data > -3.0) & (x.data < 3.0)
        def backward():
            x._add_grad(out.grad * (mask * (1.0 / 6.0)))
        out._backward = backward
    return out


def h_swish(x: Tensor) -> Tensor:
    """Elementwise x * h_sigmoid(x); the gate shares h_sigmoid's rounding path."""
    gate = _hard_sigmoid_data(x.data)
    out = Tensor._result(x.data * gate, (x,))
    if out.requires_grad:
        inner = (x.data > -3.0) & (x.data < 3.0)
        def backward():
            x._add_grad(out.grad * (gate + x.data * (inner * (1.0 / 6.0))))
        out._backward = backward
    return out


# -- dense and convolution kernels ---------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map per row: x[N, D_in] @ w[D_in, D_out] + b[D_out]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"dense expects 2-D x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"dense extents disagree: x {x.shape} vs w {w.shape}")
    return x @ w + b


def _normalize_image(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")


def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x[(N,)C_in,H,W] with w[C_out,C_in,k,k] plus bias.

    Output spatial extents follow floor((H + 2*padding - k) / stride) + 1.
    """
    x4, squeeze = _normalize_image(x)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weight must be [C_out,C_in,k,k], got {w.shape}")
    n, c_in, h, wd = x4.shape
    c_out, c_in_w, k, _ = w.shape
    if c_in != c_in_w:
        raise ShapeError(
            f"conv2d channel mismatch: input has C_in={c_in} (shape {tuple(x.shape)}) "
            f"but weight expects C_in={c_in_w} (shape {tuple(w.shape)})")
    if padding < 0 or stride < 1:
        raise ContractError("conv2d requires padding >= 0 and stride >= 1")
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise ShapeError(
            f"kernel {k} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}")
    h_out = _conv_out_extent(h, k, stride, padding)
    w_out = _conv_out_extent(wd, k, stride, padding)

    if k == 1 and padding == 0:
        xs = x4.data[:, :, ::stride, ::stride]
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c_in)      # (N*Ho*Wo, C_in)
    else:
        xp = np.pad(x4.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride]            # (N, C, Ho, Wo, k, k)
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c_in * k * k)
    w_mat = w.data.reshape(c_out, -1)
    out_data = (cols @ w_mat.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    out_data = out_data + b.data.reshape(1, c_out, 1, 1)

    out = Tensor._result(out_data, (x4, w, b))
    if out.requires_grad:
        def backward():
            g = out.grad                                       # (N, C_out, Ho, Wo)
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
            if b.requires_grad:
                b._add_grad(g2.sum(axis=0))
            if w.requires_grad:
                w._add_grad((g2.T @ cols).reshape(w.data.shape))
            if x4.requires_grad:
                gcols = g2 @ w_mat                             # (N*Ho*Wo, C_in*k*k)
                if k == 1 and padding == 0:
                    gx = np.zeros_like(x4.data)
                    gx[:, :, ::stride, ::stride] = (
                        gcols.reshape(n, h_out, w_out, c_in).transpose(0, 3, 1, 2))
                else:
                    gk = gcols.reshape(n, h_out, w_out, c_in, k, k)
                    gk = gk.transpose(0, 3, 4, 5, 1, 2)        # (N, C, k, k, Ho, Wo)
                    gp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding))
                    for i in range(k):
                        for j in range(k):
                            gp[:, :, i:i + stride * h_out:stride,
                               j:j + stride * w_out:stride] += gk[:, :, i, j]
                    gx = gp[:, :, padding:padding + h, padding:padding + wd]
                x4._add_grad(gx)
        out._backward = backward
    return out.reshape(c_out, h_out, w_out) if squeeze else out


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor,
                     stride: int = 1, padding: int = 1) -> Tensor:
    """Per-channel 2-D convolution: x[(N,)C,H,W] with w[C,k,k] plus bias[C]."""
    x4, squeeze = _normalize_image(x)
    if w.ndim != 3 or w.shape[1] != w.shape[2]:
        raise ShapeError(f"depthwise weight must be [C,k,k], got {w.shape}")
    n, c, h, wd = x4.shape
    c_w, k, _ = w.shape
    if c != c_w:
        raise ShapeError(
            f"depthwise channel mismatch: input C={c} (shape {tuple(x.shape)}) "
            f"but weight has C={c_w} (shape {tuple(w.shape)})")
    if padding < 0 or stride < 1:
        raise ContractError("depthwise_conv2d requires padding >= 0 and stride >= 1")
    h_out = _conv_out_extent(h, k, stride, padding)
    w_out = _conv_out_extent(wd, k, stride, padding)

    xp = np.pad(x4.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_data = np.broadcast_to(b.data.reshape(1, c, 1, 1),
                               (n, c, h_out, w_out)).copy()
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
            out_data += patch * w.data[:, i, j].reshape(1, c, 1, 1)

    out = Tensor._result(out_data, (x4, w, b))
    if out.requires_grad:
        def backward():
            g = out.grad
            if b.requires_grad:
                b._add_grad(g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for i in range(k):
                    for j in range(k):
                        patch = xp[:, :, i:i + stride * h_out:stride,
                                   j:j + stride * w_out:stride]
                        gw[:, i, j] = (g * patch).sum(axis=(0, 2, 3))
                w._add_grad(gw)
            if x4.requires_grad:
                gp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
                for i in range(k):
                    for j in range(k):
                        gp[:, :, i:i + stride * h_out:stride,
                           j:j + stride * w_out:stride] += g * w.data[:, i, j].reshape(1, c, 1, 1)
                x4._add_grad(gp[:, :, padding:padding + h, padding:padding + wd])
        out._backward = backward
    return out.reshape(c, h_out, w_out) if squeeze else out


# -- pooling ---------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [(N,)C,H,W] -> [(N,)C]."""
    x4, squeeze = _normalize_image(x)
    out = x4.mean(axis=(2, 3))
    return out.reshape(x4.shape[1]) if squeeze else out


def spatial_channel_max_pool(x: Tensor) -> Tensor:
    """Per-location channel maximum, flattened row-major: [(N,)C,H,W] -> [(N,)H*W]."""
    x4, squeeze = _normalize_image(x)
    n, _, h, w = x4.shape
    out = x4.max(axis=1).reshape(n, h * w)
    return out.reshape(h * w) if squeeze else out


def spatial_channel_avg_pool(x: Tensor) -> Tensor:
    """Per-location channel mean, flattened row-major: [(N,)C,H,W] -> [(N,)H*W]."""
    x4, squeeze = _normalize_image(x)
    n, _, h, w = x4.shape
    out = x4.mean(axis=1).reshape(n, h * w)
    return out.reshape(h * w) if squeeze else out


# -- gradient utilities -----------------------------------------------------------


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def gradients(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward from a scalar loss and return gradients keyed like params."""
    zero_grads(params.values())
    loss.backward()
    return {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for name, p in params.items()}


def finite_diff_check(f: Callable[[], Tensor], params: Mapping[str, Tensor],
                      step: float = 1e-5, sample_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of f() against central finite differences.

    Returns the maximum relative error over all checked parameter entries,
    with relative error |a - n| / max(|a|, |n|, 1e-8). When sample_per_param
    is given, only that many randomly chosen entries per parameter are probed.
    """
    analytic = gradients(f(), params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        indices = range(flat.size)
        if sample_per_param is not None and flat.size > sample_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            indices = rng.choice(flat.size, size=sample_per_param, replace=False)
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + step
            with no_grad():
                upper = f().item()
            flat[idx] = original - step
            with no_grad():
                lower = f().item()
            flat[idx] = original
            numeric = (upper - lower) / (2.0 * step)
            a = analytic[name].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
