"""Dense layer primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects. Convolution is cross-correlation
(no kernel flip). Every conv/pool function accepts a single ``(C, H, W)`` map
or a batch ``(B, C, H, W)`` and returns the same rank it was given.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import _accel


class ShapeError(ValueError):
    """Raised when tensor extents disagree with a layer specification."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(f"channel counts must be positive, got N={self.in_channels} M={self.out_channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel must be odd and positive, got k={self.kernel}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    def output_size(self, size):
        out = (size + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise ShapeError(f"input extent {size} too small for k={self.kernel}, "
                             f"stride={self.stride}, padding={self.padding}")
        return out

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C, H, W) or (B, C, H, W) tensor, got rank {x.ndim}")


def _check_conv(x, weights, bias, spec):
    if weights.shape != spec.weight_shape:
        names = ("out_channels", "in_channels", "kernel height", "kernel width")
        for name, got, want in zip(names, weights.shape, spec.weight_shape):
            if got != want:
                raise ShapeError(f"weights {name} is {got}, spec expects {want}")
        raise ShapeError(f"weights have shape {weights.shape}, spec expects {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input channels is {x.shape[1]}, spec expects {spec.in_channels}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias length is {bias.shape}, spec expects ({spec.out_channels},)")


def im2col(x, k, stride, padding):
    """(B, N, H, W) -> (B, O*P, N*k*k) patch matrix, plus (O, P)."""
    b, n, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    sb, sn, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, shape=(b, oh, ow, n, k, k),
        strides=(sb, sh * stride, sw * stride, sn, sh, sw), writeable=False)
    return win.reshape(b, oh * ow, n * k * k), (oh, ow)


def col2im(cols, shape, k, stride, padding, out_hw):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to an image."""
    b, n, h, w = shape
    oh, ow = out_hw
    g = cols.reshape(b, oh, ow, n, k, k)
    out = np.zeros((b, n, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += \
                g[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def conv2d_forward(x, weights, bias, spec):
    """Cross-correlate ``x`` with ``weights`` and add ``bias``.

    Output extent is ``floor((I + 2*padding - k) / stride) + 1`` per axis.
    ``bias`` may be None.
    """
    xb, single = _as_batch(np.asarray(x))
    _check_conv(xb, weights, bias, spec)
    spec.output_size(xb.shape[2])
    spec.output_size(xb.shape[3])
    cols, (oh, ow) = im2col(xb, spec.kernel, spec.stride, spec.padding)
    wmat = weights.reshape(spec.out_channels, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias
    out = out.transpose(0, 2, 1).reshape(xb.shape[0], spec.out_channels, oh, ow)
    return out[0] if single else out


def conv2d_backward(x, weights, upstream_grad, spec):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`."""
    xb, single = _as_batch(np.asarray(x))
    gb, _ = _as_batch(np.asarray(upstream_grad))
    _check_conv(xb, weights, None, spec)
    cols, (oh, ow) = im2col(xb, spec.kernel, spec.stride, spec.padding)
    expected = (xb.shape[0], spec.out_channels, oh, ow)
    if gb.shape != expected:
        raise ShapeError(f"upstream gradient has shape {gb.shape}, forward produced {expected}")
    g = gb.reshape(gb.shape[0], spec.out_channels, oh * ow)
    grad_w = np.einsum("bmp,bpq->mq", g, cols, optimize=True).reshape(weights.shape)
    grad_b = g.sum(axis=(0, 2))
    wmat = weights.reshape(spec.out_channels, -1)
    dcols = g.transpose(0, 2, 1) @ wmat
    grad_x = col2im(dcols, xb.shape, spec.kernel, spec.stride, spec.padding, (oh, ow))
    return (grad_x[0] if single else grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# activations and pooling
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream_grad):
    return upstream_grad * (x > 0)


def softmax(x, axis=0):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_backward(y, upstream_grad, axis=0):
    """Vector-Jacobian product of softmax given its output ``y``."""
    dot = np.sum(y * upstream_grad, axis=axis, keepdims=True)
    return y * (upstream_grad - dot)


def _pool_geometry(size, k, s, padding, ceil_mode):
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"pool window {k} larger than padded extent {size + 2 * padding}")
    out = (-(-span // s) if ceil_mode else span // s) + 1
    if ceil_mode and (out - 1) * s >= size + padding:
        out -= 1
    extra = max(0, (out - 1) * s + k - (size + 2 * padding))
    return out, extra


def maxpool2d(x, k, stride=None, padding=0, ceil_mode=False, return_index=False):
    """Window maxima. Padded cells never win (they hold -inf).

    With ``return_index`` the flat argmax positions into the padded map are
    returned as well; :func:`maxpool2d_backward` needs them.
    """
    s = k if stride is None else stride
    xb, single = _as_batch(np.asarray(x))
    b, c, h, w = xb.shape
    oh, ey = _pool_geometry(h, k, s, padding, ceil_mode)
    ow, ex = _pool_geometry(w, k, s, padding, ceil_mode)
    xp = np.pad(xb.reshape(b * c, h, w), ((0, 0), (padding, padding + ey), (padding, padding + ex)),
                constant_values=-np.inf)
    out, arg = _accel.maxpool_kernel(np.ascontiguousarray(xp), k, s, oh, ow)
    out = out.reshape(b, c, oh, ow)
    if single:
        out = out[0]
    if return_index:
        return out, (arg, xp.shape, xb.shape, padding, single)
    return out


def maxpool2d_backward(upstream_grad, index):
    arg, padded_shape, shape, padding, single = index
    bc, hp, wp = padded_shape
    g = np.asarray(upstream_grad).reshape(bc, -1)
    flat = np.zeros((bc, hp * wp), dtype=g.dtype)
    rows = np.repeat(np.arange(bc), arg.shape[1] * arg.shape[2])
    np.add.at(flat, (rows, arg.reshape(-1)), g.reshape(-1))
    b, c, h, w = shape
    dx = flat.reshape(bc, hp, wp)[:, padding:padding + h, padding:padding + w].reshape(b, c, h, w)
    return dx[0] if single else dx


def activation_forward(x, kind, **params):
    """Dispatch by name: ``relu``, ``softmax`` (over ``axis``, default 0) or ``maxpool``."""
    if kind == "relu":
        return relu(x)
    if kind == "softmax":
        return softmax(x, axis=params.get("axis", 0))
    if kind == "maxpool":
        return maxpool2d(x, params["k"], params.get("stride"), params.get("padding", 0),
                         params.get("ceil_mode", False))
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def sgd_step(weights, grads, lr):
    """``weights - lr * grads``; a new array is returned."""
    if weights.shape != grads.shape:
        raise ShapeError(f"gradient shape {grads.shape} does not match weights {weights.shape}")
    if lr < 0 or not math.isfinite(lr):
        raise ValueError(f"learning rate must be a finite non-negative number, got {lr}")
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise FloatingPointError(f"gradient holds {bad} non-finite value(s)")
    return weights - lr * grads


def glorot_uniform(shape, rng):
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) for conv weights (M, N, k, k)."""
    m, n = shape[0], shape[1]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    limit = math.sqrt(6.0 / (n * receptive + m * receptive))
    return rng.uniform(-limit, limit, size=shape)
