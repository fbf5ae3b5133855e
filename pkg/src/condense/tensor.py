"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient. Operations record
backward closures; Tensor.backward() runs them in reverse topological
order. Only float32 and float64 are supported and operands must agree,
so silent promotion never hides a precision bug.

Convolutions lower to matrix multiplies: a strided-slice im2col for
spatial kernels, and a direct batched GEMM for the 1x1 stride-1 case
that dominates this architecture.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

# Global switch consulted by every op when deciding whether to record
# backward closures. Toggled by the no_grad context manager.
_grad_enabled = True

_malloc_tuned = False


def tune_allocator() -> bool:
    """Raise glibc's mmap and trim thresholds so large scratch buffers
    (im2col workspaces run to tens of MB) are served from the reusable
    heap instead of being mmap'd and unmapped on every step. Without
    this, page-fault churn adds roughly 20% to each training step.

    Idempotent; returns False when libc is unavailable (non-glibc
    platforms), which only costs speed, never correctness.
    """
    global _malloc_tuned
    if _malloc_tuned:
        return True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        m_mmap_threshold, m_trim_threshold = -3, -1
        ok = libc.mallopt(m_mmap_threshold, ctypes.c_int(1 << 30)) == 1
        ok = libc.mallopt(m_trim_threshold, ctypes.c_int(1 << 30)) == 1 and ok
    except OSError:
        return False
    _malloc_tuned = ok
    return ok


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_float(arr: np.ndarray) -> np.ndarray:
    if arr.dtype not in _FLOAT_DTYPES:
        return arr.astype(np.float64)
    return arr


def _check_same_dtype(*tensors: "Tensor") -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes in one op: {sorted(str(d) for d in dtypes)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        self.data = _check_float(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()

    # -- graph bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, free_graph: bool = True):
        """Backpropagate from a scalar.

        free_graph tears the graph down afterwards: backward closures,
        parent links, and intermediate gradients are dropped so the
        (large) saved activations free immediately instead of waiting on
        cycle collection. Leaf gradients survive. Pass False only when a
        test needs to inspect the graph after the fact.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar output, got shape {self.data.shape}"
            )
        # Iterative topo sort; graphs reuse nodes (dense connectivity), so
        # guard with a visited set keyed by identity.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        if free_graph:
            for node in topo:
                if node._prev:
                    node._backward = None
                    node._prev = ()
                    node.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def sum(self):
        return tensor_sum(self)

    def item(self) -> float:
        return float(self.data.reshape(()))


def _track(out: Tensor, prev: tuple[Tensor, ...], backward) -> Tensor:
    """Attach a backward closure if grad mode is on and any input needs it."""
    if _grad_enabled and any(t.requires_grad for t in prev):
        out.requires_grad = True
        out._prev = prev
        out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray, shared: bool = False):
    """Accumulate g into t.grad.

    shared=True means g aliases memory owned elsewhere (a view or a
    pass-through of the upstream gradient) and must be copied before it
    can be stored as a mutable accumulator.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if shared else g
    else:
        t.grad += g


# -- elementwise and reduction ops ----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def backward():
        _acc(a, out.grad, shared=True)
        _acc(b, out.grad, shared=True)

    return _track(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)

    def backward():
        _acc(a, out.grad * b.data)
        _acc(b, out.grad * a.data)

    return _track(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def backward():
        _acc(a, out.grad * c)

    return _track(out, (a,), backward)


def shift(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c)

    def backward():
        _acc(a, out.grad, shared=True)

    return _track(out, (a,), backward)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array (no gradient into c).

    This is how binary masks are applied to weights: the mask is data,
    not a parameter, but the product must stay differentiable in a.
    """
    if a.data.shape != c.shape:
        raise ShapeError(f"mul_const: shapes {a.data.shape} vs {c.shape}")
    out = Tensor(a.data * c)

    def backward():
        _acc(a, out.grad * c)

    return _track(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def backward():
        # out.grad is fully accumulated by now and torn down afterwards,
        # so the buffer can be masked in place and donated downstream.
        g = out.grad
        np.multiply(g, out.data > 0, out=g)
        _acc(a, g)

    return _track(out, (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def backward():
        _acc(a, np.broadcast_to(out.grad, a.data.shape), shared=True)

    return _track(out, (a,), backward)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty list")
    _check_same_dtype(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, out.grad[tuple(sl)], shared=True)

    return _track(out, tuple(tensors), backward)


# -- linear algebra --------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x [N, I] @ weight.T [I, O] (+ bias [O]) -> [N, O]."""
    tensors = (x, weight) if bias is None else (x, weight, bias)
    _check_same_dtype(*tensors)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"linear: x {x.data.shape} and weight {weight.data.shape} must be 2-d"
        )
    n, i = x.data.shape
    o, i2 = weight.data.shape
    if i != i2:
        raise ShapeError(f"linear: input width {i} vs weight width {i2}")
    y = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (o,):
            raise ShapeError(f"linear: bias shape {bias.data.shape}, expected ({o},)")
        y = y + bias.data
    out = Tensor(y)

    def backward():
        _acc(x, out.grad @ weight.data)
        _acc(weight, out.grad.T @ x.data)
        if bias is not None:
            _acc(bias, out.grad.sum(axis=0))

    return _track(out, tensors, backward)


# -- convolutions ----------------------------------------------------------


def _conv_checks(x: Tensor, w: Tensor, groups: int, stride: int, padding: int):
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv: x {x.data.shape} and w {w.data.shape} must be 4-d [N,C,H,W] / [O,C/G,kh,kw]"
        )
    n, cin, h, wdim = x.data.shape
    cout, cg, kh, kw = w.data.shape
    if groups < 1:
        raise ShapeError(f"conv: groups must be >= 1, got {groups}")
    if cin % groups or cout % groups:
        raise ShapeError(
            f"conv: groups={groups} must divide in={cin} and out={cout}"
        )
    if cg != cin // groups:
        raise ShapeError(
            f"conv: weight expects {cg} channels per group, input provides {cin // groups}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv: bad stride={stride} or padding={padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdim + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{wdim + 2 * padding}"
        )
    return n, cin, h, wdim, cout, cg, kh, kw, ho, wo


def _conv1x1_s1(x: Tensor, w: Tensor, groups: int) -> Tensor:
    """1x1 stride-1 pad-0 path: a batched GEMM per group, no im2col."""
    n, cin, h, wdim = x.data.shape
    cout = w.data.shape[0]
    cg = cin // groups
    og = cout // groups
    p = h * wdim
    xr = x.data.reshape(n, cin, p)
    w2 = w.data.reshape(cout, cg)
    if groups == 1:
        y = np.matmul(w2, xr)  # [O,C] @ [N,C,P] -> [N,O,P]
    else:
        y = np.empty((n, cout, p), dtype=x.data.dtype)
        for g in range(groups):
            y[:, g * og:(g + 1) * og] = np.matmul(
                w2[g * og:(g + 1) * og], xr[:, g * cg:(g + 1) * cg]
            )
    out = Tensor(y.reshape(n, cout, h, wdim))

    def backward():
        go = out.grad.reshape(n, cout, p)
        if x.requires_grad:
            dx = np.empty_like(xr)
            for g in range(groups):
                dx[:, g * cg:(g + 1) * cg] = np.matmul(
                    w2[g * og:(g + 1) * og].T, go[:, g * og:(g + 1) * og]
                )
            _acc(x, dx.reshape(x.data.shape))
        if w.requires_grad:
            dw = np.empty_like(w2)
            for g in range(groups):
                prods = np.matmul(go[:, g * og:(g + 1) * og],
                                  xr[:, g * cg:(g + 1) * cg].transpose(0, 2, 1))
                np.sum(prods, axis=0, out=dw[g * og:(g + 1) * og])
            _acc(w, dw.reshape(w.data.shape))

    return _track(out, (x, w), backward)


def group_conv2d(x: Tensor, w: Tensor, groups: int = 1, stride: int = 1,
                 padding: int = 0) -> Tensor:
    """2-d cross-correlation with filter groups.

    x: [N, Cin, H, W], w: [Cout, Cin/groups, kh, kw]. Group g maps input
    channels [g*Cin/G, (g+1)*Cin/G) to output channels [g*Cout/G,
    (g+1)*Cout/G). groups=1 is a standard dense convolution.
    """
    _check_same_dtype(x, w)
    (n, cin, h, wdim, cout, cg, kh, kw, ho, wo) = _conv_checks(
        x, w, groups, stride, padding
    )
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _conv1x1_s1(x, w, groups)

    og = cout // groups
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    p = ho * wo
    kk = kh * kw
    # cols[n, c, i, j, y, x] = padded input at (y*stride+i, x*stride+j).
    # Channel-group slices of this layout reshape to [N, Cg*kh*kw, P]
    # views, so every product below is a batched GEMM with no transposes.
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    w2 = w.data.reshape(cout, cg * kk)
    y = np.empty((n, cout, ho, wo), dtype=x.data.dtype)
    for g in range(groups):
        cv = cols[:, g * cg:(g + 1) * cg].reshape(n, cg * kk, p)
        np.matmul(w2[g * og:(g + 1) * og], cv,
                  out=y[:, g * og:(g + 1) * og].reshape(n, og, p))
    out = Tensor(y)

    def backward():
        go = out.grad.reshape(n, cout, p)
        if w.requires_grad:
            dw = np.empty_like(w2)
            for g in range(groups):
                cv = cols[:, g * cg:(g + 1) * cg].reshape(n, cg * kk, p)
                prods = np.matmul(go[:, g * og:(g + 1) * og], cv.transpose(0, 2, 1))
                np.sum(prods, axis=0, out=dw[g * og:(g + 1) * og])
            _acc(w, dw.reshape(w.data.shape))
        if x.requires_grad:
            eh, ew = kh - 1 - padding, kw - 1 - padding
            if stride == 1 and eh >= 0 and ew >= 0:
                # dx is itself a correlation: pad the output gradient by
                # k-1-p and run flipped, channel-swapped kernels over it.
                # That im2col is over Cout channels, typically far fewer
                # than Cin here, and needs no scatter back to the input.
                if eh or ew:
                    gop = np.zeros((n, cout, ho + 2 * eh, wo + 2 * ew),
                                   dtype=x.data.dtype)
                    gop[:, :, eh:eh + ho, ew:ew + wo] = out.grad
                else:
                    gop = out.grad
                gcols = np.empty((n, cout, kh, kw, h, wdim), dtype=x.data.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gcols[:, :, i, j] = gop[:, :, i:i + h, j:j + wdim]
                wf = w.data[:, :, ::-1, ::-1]
                dx = np.empty_like(x.data)
                dxv = dx.reshape(n, cin, h * wdim)
                for g in range(groups):
                    wg = wf[g * og:(g + 1) * og].transpose(1, 0, 2, 3).reshape(cg, og * kk)
                    gv = gcols[:, g * og:(g + 1) * og].reshape(n, og * kk, h * wdim)
                    np.matmul(wg, gv, out=dxv[:, g * cg:(g + 1) * cg])
                _acc(x, dx)
            else:
                dcols = np.empty_like(cols)
                for g in range(groups):
                    np.matmul(w2[g * og:(g + 1) * og].T, go[:, g * og:(g + 1) * og],
                              out=dcols[:, g * cg:(g + 1) * cg].reshape(n, cg * kk, p))
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
                if padding:
                    dxp = dxp[:, :, padding:-padding, padding:-padding]
                _acc(x, dxp)

    return _track(out, (x, w), backward)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense convolution; group_conv2d with a single group."""
    return group_conv2d(x, w, groups=1, stride=stride, padding=padding)


def conv1x1(x: Tensor, w2d: Tensor) -> Tensor:
    """Pointwise dense convolution with a 2-d weight [O, Cin]."""
    _check_same_dtype(x, w2d)
    if x.data.ndim != 4 or w2d.data.ndim != 2:
        raise ShapeError(
            f"conv1x1: x {x.data.shape} must be 4-d, w {w2d.data.shape} 2-d"
        )
    if w2d.data.shape[1] != x.data.shape[1]:
        raise ShapeError(
            f"conv1x1: weight width {w2d.data.shape[1]} vs input channels {x.data.shape[1]}"
        )
    return _conv1x1_2d(x, w2d)


def _conv1x1_2d(x: Tensor, w2d: Tensor) -> Tensor:
    n, cin, h, wdim = x.data.shape
    cout = w2d.data.shape[0]
    p = h * wdim
    xr = x.data.reshape(n, cin, p)
    y = np.matmul(w2d.data, xr)
    out = Tensor(y.reshape(n, cout, h, wdim))

    def backward():
        go = out.grad.reshape(n, cout, p)
        if x.requires_grad:
            dx = np.matmul(w2d.data.T, go)
            _acc(x, dx.reshape(x.data.shape))
        if w2d.requires_grad:
            gs = go.transpose(1, 0, 2).reshape(cout, n * p)
            xs = xr.transpose(1, 0, 2).reshape(cin, n * p)
            _acc(w2d, gs @ xs.T)

    return _track(out, (x, w2d), backward)


# -- normalization ---------------------------------------------------------


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5, fuse_relu: bool = False) -> Tensor:
    """Per-channel batch normalization for [N,C,H,W] or [N,C] inputs.

    Training mode normalizes by batch statistics and updates the running
    buffers in place (biased variance, exponential average with the given
    momentum). Eval mode normalizes by the running buffers, which then
    act as constants in the backward pass.

    fuse_relu applies max(y, 0) to the output inside the same node. The
    normalize-then-rectify pair appears before every convolution here, and
    fusing it avoids one full-size intermediate per use.
    """
    _check_same_dtype(x, gamma, beta)
    if x.data.ndim == 4:
        axes = (0, 2, 3)
        sub = "nchw,nchw->c"
        bshape = (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes = (0,)
        sub = "nc,nc->c"
        bshape = (1, -1)
    else:
        raise ShapeError(f"batch_norm: input must be 2-d or 4-d, got {x.data.shape}")
    c = x.data.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.data.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {t.data.shape}, expected ({c},)")
    m = x.data.size // c

    if training:
        if m < 2:
            raise ShapeError("batch_norm: training mode needs >= 2 samples per channel")
        mean = x.data.mean(axis=axes)
        xc = x.data - mean.reshape(bshape)
        var = np.einsum(sub, xc, xc) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
        xc = x.data - mean.reshape(bshape)

    ivar = 1.0 / np.sqrt(var + eps)
    a = gamma.data * ivar
    y = xc * a.reshape(bshape)
    y += beta.data.reshape(bshape)
    if fuse_relu:
        np.maximum(y, 0, out=y)
    out = Tensor(y)

    def backward():
        # go is fully accumulated and about to be torn down, so both it
        # and the retained xc buffer are rewritten in place.
        go = out.grad
        if fuse_relu:
            np.multiply(go, out.data > 0, out=go)
        sxc = np.einsum(sub, go, xc)
        bgrad = go.sum(axis=axes)
        if gamma.requires_grad:
            _acc(gamma, sxc * ivar)
        if beta.requires_grad:
            _acc(beta, bgrad)
        if x.requires_grad:
            if training:
                # dx = go*a - a*bgrad/m - xc * (a*ivar^2*sxc/m), which is
                # the standard formula with both batch sums expressed
                # through bgrad and sxc.
                np.multiply(go, a.reshape(bshape), out=go)
                go -= (a * bgrad / m).reshape(bshape)
                np.multiply(xc, (a * ivar * ivar * sxc / m).reshape(bshape), out=xc)
                go -= xc
            else:
                np.multiply(go, a.reshape(bshape), out=go)
            _acc(x, go)

    return _track(out, (x, gamma, beta), backward)


# -- pooling ---------------------------------------------------------------


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Non-overlapping average pooling; kernel must equal stride and tile
    the input exactly."""
    if stride is None:
        stride = kernel
    if stride != kernel:
        raise ShapeError(f"avg_pool2d: kernel {kernel} must equal stride {stride}")
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected [N,C,H,W], got {x.data.shape}")
    n, c, h, wdim = x.data.shape
    if h % kernel or wdim % kernel:
        raise ShapeError(
            f"avg_pool2d: kernel {kernel} does not tile input {h}x{wdim}"
        )
    ho, wo = h // kernel, wdim // kernel
    tiles = x.data.reshape(n, c, ho, kernel, wo, kernel)
    out = Tensor(tiles.mean(axis=(3, 5)))

    def backward():
        g = out.grad * (1.0 / (kernel * kernel))
        # reshape of a broadcast view must copy, so dx is always fresh
        dx = np.broadcast_to(
            g[:, :, :, None, :, None], (n, c, ho, kernel, wo, kernel)
        ).reshape(x.data.shape)
        _acc(x, dx)

    return _track(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C], mean over the spatial extent."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected [N,C,H,W], got {x.data.shape}")
    n, c, h, wdim = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def backward():
        g = out.grad * (1.0 / (h * wdim))
        _acc(x, np.broadcast_to(g[:, :, None, None], x.data.shape), shared=True)

    return _track(out, (x,), backward)


# -- indexing --------------------------------------------------------------


def gather_channels(x: Tensor, index: np.ndarray) -> Tensor:
    """out[:, i] = x[:, index[i]] along the channel axis.

    index may repeat entries; the backward pass scatter-adds, so each
    input channel accumulates gradient from every position that read it.
    """
    index = np.asarray(index)
    if index.ndim != 1:
        raise ShapeError(f"gather_channels: index must be 1-d, got {index.shape}")
    if not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"gather_channels: index dtype {index.dtype} is not integral")
    cin = x.data.shape[1]
    if index.size and (index.min() < 0 or index.max() >= cin):
        raise ShapeError(
            f"gather_channels: index range [{index.min()}, {index.max()}] outside [0, {cin})"
        )
    out = Tensor(x.data[:, index])
    bijective = index.size == cin and np.unique(index).size == cin

    def backward():
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        if bijective:
            dx[:, index] = out.grad
        else:
            np.add.at(dx, (slice(None), index), out.grad)
        _acc(x, dx)

    return _track(out, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when eval or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    keep *= 1.0 / (1.0 - p)
    return mul_const(x, keep)


# -- losses ----------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Stable: subtracts the per-row max before exponentiation.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [N,K], got {logits.data.shape}")
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape}, expected ({n},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"softmax_cross_entropy: labels dtype {labels.dtype} is not integral")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"softmax_cross_entropy: label outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    out = Tensor(np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype))

    def backward():
        probs = ez / sez
        probs[np.arange(n), labels] -= 1.0
        probs *= out.grad / n
        _acc(logits, probs)

    return _track(out, (logits,), backward)


# -- gradient verification -------------------------------------------------


def grad_check(fn, params: list[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of fn() against central differences.

    fn builds a fresh scalar-valued graph from params on every call.
    Per parameter, the discrepancy is measured as
    max|a - n| / max(max|a|, max|n|, 1e-12): a max-norm relative error
    of the gradient vector. Scaling by the vector norm keeps coordinates
    whose true gradient is near zero from drowning in finite-difference
    roundoff. Returns the worst value over all parameters. Use float64
    params; float32 buries the differences in noise.
    """
    for p in params:
        p.grad = None
    out = fn()
    if out.data.size != 1:
        raise ShapeError("grad_check: fn must return a scalar")
    out.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            raise ShapeError("grad_check: a parameter received no gradient")
        analytic.append(p.grad.copy())

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            numeric = np.empty_like(ga.reshape(-1))
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * eps)
            if not np.isfinite(numeric).all():
                raise ShapeError("grad_check: non-finite value during probing")
            a = ga.reshape(-1)
            scale = max(np.abs(a).max(), np.abs(numeric).max(), 1e-12)
            worst = max(worst, float(np.abs(a - numeric).max() / scale))
    return worst
