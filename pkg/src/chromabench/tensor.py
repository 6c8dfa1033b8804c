"""Dense tensors with reverse-mode differentiation and the NN primitives
used by the colorization network, plus the Adam optimizer.

Design choices, in brief:
  * float32 storage by default; full reductions accumulate in float64.
    Passing float64 arrays keeps float64 end to end, which is what the
    finite-difference checks rely on.
  * every operation records an explicit backward closure; `backward()`
    walks the recorded graph once in reverse topological order and then
    releases it.  No implicit broadcasting beyond per-channel bias adds,
    so every backward rule is auditable.
  * all reductions have a fixed summation order, making forward+backward
    bit-reproducible run to run.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericalError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional real array, optionally tracked for differentiation.

    ``data`` is a numpy array (float32 unless constructed from a float64
    array), ``grad`` is populated by :func:`backward` for tensors with
    ``requires_grad``.  All values must be finite; NaN/Inf on construction
    raises :class:`NumericalError`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all shape rules enforced by the underlying ops
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def _wrap(out_data: np.ndarray, parents, backward_fn) -> Tensor:
    """Create an op output, recording the graph edge when grads are on."""
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable ``requires_grad`` tensor.

    ``loss`` must be scalar.  The graph is visited exactly once in reverse
    topological order and released afterwards (one backward per forward).
    """
    if loss.data.shape != ():
        raise ContractError("backward() requires a scalar loss tensor")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        node._parents = ()
        node._backward = None


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        a._accumulate(g)
        b._accumulate(g)

    return _wrap(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _wrap(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bw(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _wrap(a.data * b.data, (a, b), bw)


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        a._accumulate(g)

    return _wrap(a.data + np.asarray(s, dtype=a.data.dtype), (a,), bw)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        a._accumulate(g * np.asarray(s, dtype=g.dtype))

    return _wrap(a.data * np.asarray(s, dtype=a.data.dtype), (a,), bw)


def abs_val(a: Tensor) -> Tensor:
    """|x|; subgradient 0 at x == 0."""
    sign = np.sign(a.data)

    def bw(g):
        a._accumulate(g * sign)

    return _wrap(np.abs(a.data), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        a._accumulate(g * mask)

    return _wrap(np.maximum(a.data, 0), (a,), bw)


def clamp01(a: Tensor, straight_through: bool = False) -> Tensor:
    """min(max(x, 0), 1).

    Backward is 1 strictly inside (0, 1) and 0 outside and at the
    boundary.  ``straight_through=True`` passes the gradient unchanged
    everywhere instead.
    """
    if straight_through:
        def bw_st(g):
            a._accumulate(g)

        return _wrap(np.clip(a.data, 0.0, 1.0), (a,), bw_st)
    mask = (a.data > 0) & (a.data < 1)

    def bw(g):
        a._accumulate(g * mask)

    return _wrap(np.clip(a.data, 0.0, 1.0), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor (float64 accumulation)."""
    val = np.asarray(np.sum(a.data, dtype=np.float64), dtype=a.data.dtype)

    def bw(g):
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _wrap(val, (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    val = np.asarray(np.sum(a.data, dtype=np.float64) / n, dtype=a.data.dtype)

    def bw(g):
        a._accumulate(np.broadcast_to(g / n, a.data.shape))

    return _wrap(val, (a,), bw)


# ---------------------------------------------------------------------------
# channel-structured ops (NCHW layout)
# ---------------------------------------------------------------------------


def _channel_axis(t: Tensor, op: str) -> int:
    if t.data.ndim == 4:
        return 1
    if t.data.ndim == 3:
        return 0
    raise DimensionError(f"{op}: expected a CHW or NCHW tensor, got shape {t.data.shape}")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel-axis concatenation of two NCHW tensors."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels: expected NCHW tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise DimensionError(
            f"concat_channels: spatial/batch mismatch {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]

    def bw(g):
        a._accumulate(g[:, :ca])
        b._accumulate(g[:, ca:])

    return _wrap(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


def channel_linear(t: Tensor, matrix: np.ndarray, offset: np.ndarray | None = None) -> Tensor:
    """Per-pixel linear map of the channel vector: out = M @ c (+ offset).

    ``matrix`` is a constant [Cout, Cin] array (no gradient flows into it);
    used for color-space changes inside the differentiation graph.
    """
    axis = _channel_axis(t, "channel_linear")
    m = np.asarray(matrix, dtype=t.data.dtype)
    if m.ndim != 2 or m.shape[1] != t.data.shape[axis]:
        raise DimensionError(
            f"channel_linear: matrix {m.shape} does not match channels {t.data.shape}")
    if axis == 1:
        out = np.einsum("oc,nchw->nohw", m, t.data)
    else:
        out = np.einsum("oc,chw->ohw", m, t.data)
    if offset is not None:
        off = np.asarray(offset, dtype=t.data.dtype)
        out = out + (off[None, :, None, None] if axis == 1 else off[:, None, None])

    def bw(g):
        if axis == 1:
            t._accumulate(np.einsum("oc,nohw->nchw", m, g))
        else:
            t._accumulate(np.einsum("oc,ohw->chw", m, g))

    return _wrap(out, (t,), bw)


def scale_channels(t: Tensor, factors) -> Tensor:
    """Multiply each channel by a constant factor."""
    axis = _channel_axis(t, "scale_channels")
    f = np.asarray(factors, dtype=t.data.dtype)
    if f.shape != (t.data.shape[axis],):
        raise DimensionError(
            f"scale_channels: {f.shape} factors for {t.data.shape[axis]} channels")
    fb = f[None, :, None, None] if axis == 1 else f[:, None, None]

    def bw(g):
        t._accumulate(g * fb)

    return _wrap(t.data * fb, (t,), bw)


def channel_norm_sum(t: Tensor) -> Tensor:
    """Sum over pixels of the Euclidean norm of the channel vector.

    Subgradient at a zero channel vector is 0.
    """
    axis = _channel_axis(t, "channel_norm_sum")
    norm = np.sqrt(np.sum(np.square(t.data), axis=axis, keepdims=True))
    val = np.asarray(np.sum(norm, dtype=np.float64), dtype=t.data.dtype)

    def bw(g):
        safe = np.where(norm > 0, norm, 1.0)
        t._accumulate(g * np.where(norm > 0, t.data / safe, 0.0))

    return _wrap(val, (t,), bw)


def channel_unit_normalize(t: Tensor, eps: float = 1e-10) -> Tensor:
    """Scale each pixel's channel vector to unit length: x / (||x|| + eps)."""
    axis = _channel_axis(t, "channel_unit_normalize")
    norm = np.sqrt(np.sum(np.square(t.data), axis=axis, keepdims=True))
    denom = norm + np.asarray(eps, dtype=t.data.dtype)
    out = t.data / denom

    def bw(g):
        # d/dx [x/(n+e)] = I/(n+e) - x x^T / (n (n+e)^2)
        dot = np.sum(g * t.data, axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        correction = np.where(norm > 0, t.data * dot / (safe * denom * denom), 0.0)
        t._accumulate(g / denom - correction)

    return _wrap(out, (t,), bw)


# ---------------------------------------------------------------------------
# convolution / pooling / normalization
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an NCHW batch.

    Output spatial size is (H + 2*padding - kh) // stride + 1 (same for W).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("conv2d: input and weight must be 4-D")
    n, cin, h, w = x.data.shape
    cout, wcin, kh, kw = weight.data.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError("conv2d: kernel larger than padded input")
    if bias is not None and bias.data.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :ho, :wo]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        if bias is not None:
            bias._accumulate(np.einsum("nohw->o", g))
        if weight.requires_grad:
            weight._accumulate(
                np.einsum("nchwij,nohw->ocij", windows, g, optimize=True))
        if x.requires_grad:
            gx = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        np.einsum("nohw,oc->nchw", g, weight.data[:, :, i, j])
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _wrap(out, parents, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 2) -> Tensor:
    """Transposed 2-D convolution that scales H and W by exactly ``stride``.

    Weight layout is [Cin, Cout, kh, kw].  Padding is fixed to
    (k - stride)/2, which must be a nonnegative integer; otherwise the
    requested exact upscaling is impossible and a ContractError is raised.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("conv_transpose2d: input and weight must be 4-D")
    n, cin, h, w = x.data.shape
    wcin, cout, kh, kw = weight.data.shape
    if wcin != cin:
        raise DimensionError(
            f"conv_transpose2d: input has {cin} channels, weight expects {wcin}")
    if kh != kw:
        raise ContractError("conv_transpose2d: square kernels only")
    if stride < 1 or (kh - stride) % 2 != 0 or kh < stride:
        raise ContractError(
            f"conv_transpose2d: kernel {kh} with stride {stride} cannot scale "
            f"output to exactly stride*input")
    if bias is not None and bias.data.shape != (cout,):
        raise DimensionError("conv_transpose2d: bad bias shape")
    pad = (kh - stride) // 2

    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    full = np.zeros((n, cout, hf, wf), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + h * stride:stride, j:j + w * stride:stride] += \
                np.einsum("nchw,co->nohw", x.data, weight.data[:, :, i, j])
    out = full[:, :, pad:pad + h * stride, pad:pad + w * stride]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        if bias is not None:
            bias._accumulate(np.einsum("nohw->o", g))
        gfull = np.zeros((n, cout, hf, wf), dtype=g.dtype)
        gfull[:, :, pad:pad + h * stride, pad:pad + w * stride] = g
        for i in range(kh):
            for j in range(kw):
                sl = gfull[:, :, i:i + h * stride:stride, j:j + w * stride:stride]
                if weight.requires_grad:
                    weight.grad = weight.grad if weight.grad is not None else \
                        np.zeros_like(weight.data)
                    weight.grad[:, :, i, j] += np.einsum("nchw,nohw->co", x.data, sl)
                if x.requires_grad:
                    x._accumulate(np.einsum("nohw,co->nchw", sl, weight.data[:, :, i, j]))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _wrap(np.ascontiguousarray(out), parents, bw)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; H and W must be divisible by k.

    Backward routes the gradient to the first maximal cell of each window
    in row-major order.
    """
    if x.data.ndim != 4:
        raise DimensionError("maxpool2d: expected NCHW tensor")
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise DimensionError(f"maxpool2d: spatial dims {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    windows = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, ho, wo, k * k)
    idx = np.argmax(flat, axis=-1)  # first occurrence wins ties (row-major)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accumulate(gx)

    return _wrap(np.ascontiguousarray(out), (x,), bw)


class BatchNormState:
    """Running statistics of one batch-normalization layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = float(momentum)
        self.eps = float(eps)

    def copy(self) -> "BatchNormState":
        other = BatchNormState(len(self.running_mean), self.momentum, self.eps,
                               self.running_mean.dtype)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str = "train") -> Tensor:
    """Per-channel batch normalization over an NCHW batch.

    Train mode normalizes with batch statistics and updates the running
    stats (unbiased variance estimate, torch convention); eval mode uses
    the running stats.  Differentiable w.r.t. input, gamma and beta in
    both modes.
    """
    if x.data.ndim != 4:
        raise DimensionError("batchnorm2d: expected NCHW tensor")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("batchnorm2d: gamma/beta must have one entry per channel")
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm2d: unknown mode {mode!r}")
    m = n * h * w
    if mode == "train":
        if m < 2:
            raise ContractError("batchnorm2d: train mode needs >= 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased, used for normalization
        mom = state.momentum
        unbiased = var * (m / (m - 1))
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(
            state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(
            state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + np.asarray(state.eps, dtype=x.data.dtype))
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        beta._accumulate(np.einsum("nchw->c", g))
        gamma._accumulate(np.einsum("nchw,nchw->c", g, xhat))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data[None, :, None, None]
        if mode == "eval":
            x._accumulate(gxhat * inv_std[None, :, None, None])
            return
        s1 = np.einsum("nchw->c", gxhat)
        s2 = np.einsum("nchw,nchw->c", gxhat, xhat)
        gx = (inv_std[None, :, None, None] / m) * (
            m * gxhat
            - s1[None, :, None, None]
            - xhat * s2[None, :, None, None]
        )
        x._accumulate(gx)

    return _wrap(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment buffers and hyperparameters for Adam."""

    def __init__(self, params, lr: float = 2e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(state.m):
        raise ContractError("adam_step: parameter list does not match state")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {i} has no gradient")
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * np.square(g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
