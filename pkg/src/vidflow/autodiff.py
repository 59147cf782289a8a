"""Reverse-mode autodiff over numpy arrays.

This is the substrate for the whole package: a Tensor wrapping a float32
ndarray (float64 allowed, used by the finite-difference oracle), a tape
rebuilt on every forward pass, a counter-based RNG, and the array ops the
models need. No graph caching, no fusion beyond a few hand-written VJPs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Rng",
    "causal_conv3d",
    "rms_normalize",
    "masked_softmax",
    "rotate_pairs",
    "upsample_nearest",
    "gather",
    "concatenate",
    "finite_difference_check",
    "zero_grads",
]


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(np.float32)
    return arr


class Tensor:
    """N-d array with reverse-mode derivative tracking.

    `data` is row-major float32 (float64 when the caller opts in), `grad`
    is lazily allocated and accumulated by `backward()`. Tensors are
    immutable after construction except for grad accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev = ()

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _make(data, prev, backward_fn):
        """Internal node constructor; prunes the tape when nothing needs grad."""
        needs = any(p.requires_grad for p in prev)
        out = Tensor(data, requires_grad=needs)
        if needs:
            out._prev = tuple(prev)
            out._backward = backward_fn
        return out

    # -- basic introspection --------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff engine -------------------------------------------------

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Run reverse-mode accumulation from this tensor.

        With no argument the tensor must be scalar (seed gradient 1).
        The traversal is iterative; graphs from long sampling loops would
        overflow Python's recursion limit otherwise.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient requires a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
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
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self):
        """A leaf view of the same data, cut from the tape."""
        return Tensor(self.data)

    def astype(self, dtype):
        out = Tensor._make(self.data.astype(dtype), (self,),
                           lambda g: self._accumulate(g.astype(self.data.dtype)))
        return out

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))
        out_data = self.data + other.data

        def backward_fn(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), backward_fn)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))
        out_data = self.data * other.data

        def backward_fn(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), backward_fn)

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))
        out_data = self.data - other.data

        def backward_fn(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(-g, other.data.shape))

        return Tensor._make(out_data, (self, other), backward_fn)

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))
        out_data = self.data / other.data

        def backward_fn(g):
            self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            other._accumulate(_unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

        return Tensor._make(out_data, (self, other), backward_fn)

    def __radd__(self, other):
        return self + other

    def __rmul__(self, other):
        return self * other

    def __rsub__(self, other):
        return Tensor(np.asarray(other, dtype=self.data.dtype)) - self

    def __rtruediv__(self, other):
        return Tensor(np.asarray(other, dtype=self.data.dtype)) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** exponent

        def backward_fn(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(out_data, (self,), backward_fn)

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))
        out_data = self.data @ other.data

        def backward_fn(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 1:
                self._accumulate(g * b)
                other._accumulate(g * a)
                return
            ga = g @ np.swapaxes(b, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b)
            gb = np.swapaxes(a, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a, g)
            self._accumulate(_unbroadcast(ga, a.shape))
            other._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._make(out_data, (self, other), backward_fn)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.data.shape
        return Tensor._make(self.data.reshape(shape), (self,),
                            lambda g: self._accumulate(g.reshape(old_shape)))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,),
                            lambda g: self._accumulate(g.transpose(inv)))

    def __getitem__(self, key):
        out_data = self.data[key]

        def backward_fn(g):
            gx = np.zeros_like(self.data)
            gx[key] += g
            self._accumulate(gx)

        return Tensor._make(out_data, (self,), backward_fn)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward_fn(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        return Tensor._make(out_data, (self,), backward_fn)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- pointwise nonlinearities ------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), lambda g: self._accumulate(g * out_data))

    def log(self):
        return Tensor._make(np.log(self.data), (self,),
                            lambda g: self._accumulate(g / self.data))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._make(out_data, (self,),
                            lambda g: self._accumulate(g * (0.5 / out_data)))

    def abs(self):
        return Tensor._make(np.abs(self.data), (self,),
                            lambda g: self._accumulate(g * np.sign(self.data)))

    def relu(self):
        out_data = np.maximum(self.data, 0)
        return Tensor._make(out_data, (self,),
                            lambda g: self._accumulate(g * (self.data > 0)))

    def sigmoid(self):
        out_data = expit(self.data)
        return Tensor._make(out_data, (self,),
                            lambda g: self._accumulate(g * out_data * (1.0 - out_data)))

    def silu(self):
        sig = expit(self.data)
        out_data = self.data * sig

        def backward_fn(g):
            self._accumulate(g * sig * (1.0 + self.data * (1.0 - sig)))

        return Tensor._make(out_data, (self,), backward_fn)

    def clamp(self, lo, hi):
        out_data = np.clip(self.data, lo, hi)
        inside = (self.data >= lo) & (self.data <= hi)
        return Tensor._make(out_data, (self,),
                            lambda g: self._accumulate(g * inside))


def _unbroadcast(grad, shape):
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- fused operations ------------------------------------------------------


def concatenate(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor._make(out_data, tuple(tensors), backward_fn)


def gather(x, indices, axis=0):
    """Select rows of `x` along `axis` by an integer index array."""
    indices = np.asarray(indices)
    out_data = np.take(x.data, indices, axis=axis)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(gx, indices, g)
        else:
            moved = np.moveaxis(gx, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        x._accumulate(gx)

    return Tensor._make(out_data, (x,), backward_fn)


def rms_normalize(x, scale, eps=1e-6):
    """x / sqrt(mean(x^2, last axis) + eps) * scale.

    `scale` must have length equal to the last extent of `x`.
    """
    if scale.data.shape != (x.data.shape[-1],):
        raise ValueError(
            f"scale length {scale.data.shape} does not match last extent {x.data.shape[-1]}")
    xd = x.data
    ms = np.mean(xd * xd, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = xd * inv
    out_data = normed * scale.data
    n = xd.shape[-1]

    def backward_fn(g):
        gs = g * scale.data
        # d/dx of x*inv: inv*(g_s - x * mean(g_s*x)/ (ms+eps))
        dot = np.mean(gs * xd, axis=-1, keepdims=True)
        gx = inv * (gs - xd * dot / (ms + eps))
        x._accumulate(gx)
        scale._accumulate(_unbroadcast(g * normed, scale.data.shape))

    return Tensor._make(out_data, (x, scale), backward_fn)


def masked_softmax(logits, mask=None):
    """Softmax over the last axis; masked-out keys get exactly zero weight.

    `mask` is boolean, broadcastable to `logits`, True = keep. Rows with no
    unmasked key produce an all-zero row (defined fallback, no NaN).
    """
    z = logits.data
    if mask is None:
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        neg = np.where(mask, z, -np.inf)
        m = neg.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, z, m) - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    denom = np.where(s == 0.0, 1.0, s)
    y = e / denom

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        logits._accumulate(y * (g - dot))

    return Tensor._make(y.astype(z.dtype), (logits,), backward_fn)


def rotate_pairs(x, cos, sin):
    """Planar rotation of interleaved component pairs.

    x[..., 2j] + i*x[..., 2j+1] is rotated by the angle whose cosine/sine
    are cos[..., j], sin[..., j]. Norm of each pair is preserved.
    """
    xd = x.data
    if xd.shape[-1] % 2:
        raise ValueError("last extent must be even for pairwise rotation")
    xe, xo = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward_fn(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(xd)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        x._accumulate(gx)

    return Tensor._make(out, (x,), backward_fn)


def causal_conv3d(x, kernel, bias=None, stride=(1, 1, 1)):
    """3D convolution, causal in time.

    x: [T,H,W,Cin] or [B,T,H,W,Cin]; kernel: [kt,kh,kw,Cin,Cout].
    Temporal padding replicates the first frame on the past side only, so
    output frame i depends on input frames <= i*st. Spatial padding is
    symmetric zeros (odd kh/kw required). Output extents are
    1 + (T-1)//st etc., matching the package's shape algebra.
    """
    kt, kh, kw, cin, cout = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("spatial kernel extents must be odd")
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 5:
        raise ValueError(f"expected rank 4 or 5 input, got shape {x.data.shape}")
    if xd.shape[-1] != cin:
        raise ValueError(f"input channels {xd.shape[-1]} do not match kernel Cin {cin}")
    st, sh, sw = stride
    b, t, h, w, _ = xd.shape
    ph, pw = kh // 2, kw // 2

    padded = xd
    if kt > 1:
        lead = np.repeat(xd[:, :1], kt - 1, axis=1)
        padded = np.concatenate([lead, xd], axis=1)
    if ph or pw:
        padded = np.pad(padded, ((0, 0), (0, 0), (ph, ph), (pw, pw), (0, 0)))

    to = 1 + (t - 1) // st
    ho = 1 + (h - 1) // sh
    wo = 1 + (w - 1) // sw
    out_dtype = np.result_type(xd.dtype, kernel.data.dtype)
    out = np.zeros((b, to, ho, wo, cout), dtype=out_dtype)
    taps = [(dt, dh, dw) for dt in range(kt) for dh in range(kh) for dw in range(kw)]

    def tap_slice(dt, dh, dw):
        return (slice(None),
                slice(dt, dt + (to - 1) * st + 1, st),
                slice(dh, dh + (ho - 1) * sh + 1, sh),
                slice(dw, dw + (wo - 1) * sw + 1, sw),
                slice(None))

    for dt, dh, dw in taps:
        out += padded[tap_slice(dt, dh, dw)] @ kernel.data[dt, dh, dw]
    if bias is not None:
        out = out + bias.data
    if squeeze:
        out = out[0]

    prev = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(g):
        gd = g[None] if squeeze else g
        if bias is not None:
            bias._accumulate(_unbroadcast(gd, bias.data.shape))
        g_padded = np.zeros_like(padded) if x.requires_grad else None
        g_kernel = np.zeros_like(kernel.data) if kernel.requires_grad else None
        for dt, dh, dw in taps:
            sl = tap_slice(dt, dh, dw)
            if g_kernel is not None:
                patch = padded[sl]
                g_kernel[dt, dh, dw] += np.tensordot(
                    patch, gd, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
            if g_padded is not None:
                g_padded[sl] += gd @ kernel.data[dt, dh, dw].T
        if g_kernel is not None:
            kernel._accumulate(g_kernel)
        if g_padded is not None:
            if ph or pw:
                g_padded = g_padded[:, :, ph:ph + h, pw:pw + w, :]
            if kt > 1:
                gx = g_padded[:, kt - 1:].copy()
                gx[:, 0] += g_padded[:, :kt - 1].sum(axis=1)
            else:
                gx = g_padded
            x._accumulate(gx[0] if squeeze else gx)

    return Tensor._make(out, prev, backward_fn)


def upsample_nearest(x, factors, first_frame_single=True):
    """Nearest-neighbour upsampling of [B,T,H,W,C] (or unbatched) video.

    With `first_frame_single`, frame 0 is emitted once while every later
    frame is repeated `ft` times: T -> 1 + (T-1)*ft, inverting the causal
    stride-ft downsampling within the package's shape algebra.
    """
    ft, fh, fw = factors
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    b, t, h, w, c = xd.shape
    if ft > 1:
        if first_frame_single:
            rest = np.repeat(xd[:, 1:], ft, axis=1)
            td = np.concatenate([xd[:, :1], rest], axis=1)
        else:
            td = np.repeat(xd, ft, axis=1)
    else:
        td = xd
    out = np.repeat(np.repeat(td, fh, axis=2), fw, axis=3)
    if squeeze:
        out = out[0]

    def backward_fn(g):
        gd = g[None] if squeeze else g
        to = gd.shape[1]
        gs = gd.reshape(b, to, h, fh, w, fw, c).sum(axis=(3, 5))
        if ft > 1:
            if first_frame_single:
                gt0 = gs[:, :1]
                gtr = gs[:, 1:].reshape(b, t - 1, ft, h, w, c).sum(axis=2)
                gx = np.concatenate([gt0, gtr], axis=1)
            else:
                gx = gs.reshape(b, t, ft, h, w, c).sum(axis=2)
        else:
            gx = gs
        x._accumulate(gx[0] if squeeze else gx)

    return Tensor._make(out, (x,), backward_fn)


def zero_grads(params):
    """Clear accumulated gradients on a parameter dict or iterable."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.grad = None


# -- RNG --------------------------------------------------------------------


class Rng:
    """Counter-based random stream (Philox) keyed by (seed, stream).

    Identical (seed, stream, call sequence) reproduces identical outputs
    bit-exactly; `spawn` derives an independent stream under the same seed.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(
            np.random.Philox(key=[self.seed & 0xFFFFFFFFFFFFFFFF,
                                  self.stream & 0xFFFFFFFFFFFFFFFF]))

    def spawn(self, stream):
        return Rng(self.seed, stream)

    def normal(self, shape=(), dtype=np.float32):
        return self._gen.standard_normal(shape, dtype=dtype)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._gen.uniform(low, high, size=shape).astype(np.float32)

    def integers(self, low, high=None, shape=()):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)


# -- gradient oracle ---------------------------------------------------------


def finite_difference_check(f, x, h=1e-3, max_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor and must be a pure function of its
    argument. Returns max over (sampled) coordinates of
    |analytic - central| / (|central| + 1e-6). Raises on non-finite f.
    The probe tensors are float64 so the comparison isolates truncation
    error rather than float32 rounding noise.
    """
    x64 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(x64.copy(), requires_grad=True, dtype=np.float64)
    out = f(probe)
    if not np.all(np.isfinite(out.data)):
        raise ValueError("function produced non-finite output")
    out.backward()
    analytic = np.zeros_like(x64) if probe.grad is None else probe.grad.copy()

    flat = x64.reshape(-1)
    n = flat.size
    if max_coords is not None and n > max_coords:
        if rng is None:
            rng = Rng(0)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)

    analytic_flat = analytic.reshape(-1)
    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x64.shape), dtype=np.float64)).data
        fm = f(Tensor(xm.reshape(x64.shape), dtype=np.float64)).data
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("function produced non-finite output during probing")
        central = (float(fp) - float(fm)) / (2.0 * h)
        rel = abs(analytic_flat[i] - central) / (abs(central) + 1e-6)
        worst = max(worst, rel)
    return worst
