"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a ``_nb`` version written as explicit loops for
``numba.njit`` and a ``_np`` version in plain numpy. Both perform the same
floating-point operations in the same order, so their outputs are
bit-identical; the test suite checks this.

Set ``SCOD_DISABLE_NUMBA=1`` to force the numpy path (useful when numba is
missing or when debugging).
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("SCOD_DISABLE_NUMBA", "0") in ("", "0")


def _njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# integrate-and-fire scan
# ---------------------------------------------------------------------------

def _lif_scan_np(currents, v_th, p0):
    """currents: (T, n). Returns (spikes uint8 (T, n), final membrane (n,))."""
    steps = currents.shape[0]
    p = p0.astype(np.float64).copy()
    spikes = np.zeros(currents.shape, dtype=np.uint8)
    for t in range(steps):
        p += currents[t]
        fired = p >= v_th
        p[fired] -= v_th
        spikes[t] = fired
    return spikes, p


@_njit
def _lif_scan_nb(currents, v_th, p0):
    steps, n = currents.shape
    p = p0.astype(np.float64).copy()
    spikes = np.zeros((steps, n), dtype=np.uint8)
    for t in range(steps):
        for j in range(n):
            p[j] += currents[t, j]
            if p[j] >= v_th:
                p[j] -= v_th
                spikes[t, j] = 1
    return spikes, p


# ---------------------------------------------------------------------------
# exponential spike trace (low-pass filter)
# ---------------------------------------------------------------------------

def _trace_np(spikes, decay):
    """spikes: (T, n). trace[t] = decay * trace[t-1] + spikes[t]."""
    out = np.empty(spikes.shape, dtype=np.float64)
    acc = np.zeros(spikes.shape[1], dtype=np.float64)
    for t in range(spikes.shape[0]):
        acc = acc * decay + spikes[t]
        out[t] = acc
    return out


@_njit
def _trace_nb(spikes, decay):
    steps, n = spikes.shape
    out = np.empty((steps, n), dtype=np.float64)
    for j in range(n):
        acc = 0.0
        for t in range(steps):
            acc = acc * decay + spikes[t, j]
            out[t, j] = acc
    return out


# ---------------------------------------------------------------------------
# greedy NMS on one class
# ---------------------------------------------------------------------------

def _iou_row(c, i, rest):
    ix1 = np.maximum(c[i, 0], c[rest, 0])
    iy1 = np.maximum(c[i, 1], c[rest, 1])
    ix2 = np.minimum(c[i, 2], c[rest, 2])
    iy2 = np.minimum(c[i, 3], c[rest, 3])
    inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
    area_i = (c[i, 2] - c[i, 0]) * (c[i, 3] - c[i, 1])
    area_r = (c[rest, 2] - c[rest, 0]) * (c[rest, 3] - c[rest, 1])
    return inter / (area_i + area_r - inter)


def _nms_np(corners, order, threshold):
    """corners: (n, 4) xyxy; order: candidate indices, best first.

    Returns the kept indices in processing order.
    """
    alive = np.ones(order.shape[0], dtype=np.bool_)
    keep = []
    for a in range(order.shape[0]):
        if not alive[a]:
            continue
        i = order[a]
        keep.append(i)
        rest = order[a + 1:]
        if rest.size:
            ov = _iou_row(corners, i, rest)
            alive[a + 1:] &= ~(ov > threshold)
    return np.array(keep, dtype=np.int64)


@_njit
def _nms_nb(corners, order, threshold):
    n = order.shape[0]
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    nk = 0
    for a in range(n):
        if not alive[a]:
            continue
        i = order[a]
        keep[nk] = i
        nk += 1
        area_i = (corners[i, 2] - corners[i, 0]) * (corners[i, 3] - corners[i, 1])
        for b in range(a + 1, n):
            if not alive[b]:
                continue
            j = order[b]
            ix1 = max(corners[i, 0], corners[j, 0])
            iy1 = max(corners[i, 1], corners[j, 1])
            ix2 = min(corners[i, 2], corners[j, 2])
            iy2 = min(corners[i, 3], corners[j, 3])
            inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
            area_j = (corners[j, 2] - corners[j, 0]) * (corners[j, 3] - corners[j, 1])
            if inter / (area_i + area_j - inter) > threshold:
                alive[b] = False
    return keep[:nk]


# ---------------------------------------------------------------------------
# max pooling over a pre-padded (C, H, W) map
# ---------------------------------------------------------------------------

def _maxpool_np(xp, k, s, oh, ow):
    """Returns (out (C, oh, ow), argmax flat index into xp[c] (C, oh, ow))."""
    c, hp, wp = xp.shape
    sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(c, oh, ow, k, k), strides=(sc, sh * s, sw * s, sh, sw))
    flat = win.reshape(c, oh, ow, k * k)
    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    ky, kx = np.divmod(local, k)
    rows = np.arange(oh)[None, :, None] * s + ky
    cols = np.arange(ow)[None, None, :] * s + kx
    return out, rows * wp + cols


@_njit
def _maxpool_nb(xp, k, s, oh, ow):
    c, hp, wp = xp.shape
    out = np.empty((c, oh, ow), dtype=xp.dtype)
    arg = np.empty((c, oh, ow), dtype=np.int64)
    for ch in range(c):
        for y in range(oh):
            for x in range(ow):
                best = xp[ch, y * s, x * s]
                bi = (y * s) * wp + x * s
                for dy in range(k):
                    for dx in range(k):
                        v = xp[ch, y * s + dy, x * s + dx]
                        if v > best:
                            best = v
                            bi = (y * s + dy) * wp + (x * s + dx)
                out[ch, y, x] = best
                arg[ch, y, x] = bi
    return out, arg


if USE_NUMBA:
    lif_scan = _lif_scan_nb
    exp_trace = _trace_nb
    nms_greedy = _nms_nb
    maxpool_kernel = _maxpool_nb
else:
    lif_scan = _lif_scan_np
    exp_trace = _trace_np
    nms_greedy = _nms_np
    maxpool_kernel = _maxpool_np

BACKEND = "numba" if USE_NUMBA else "numpy"
