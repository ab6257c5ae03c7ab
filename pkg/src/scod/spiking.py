"""Integrate-and-fire dynamics, rate coding and spike-train learning.

Spike trains are ``uint8`` arrays with time on axis 0: shape ``(T, *neurons)``.
Membrane update per step is ``P <- P + I``; a neuron with ``P >= V_th`` emits
one spike and is soft-reset to ``P - V_th``. There is no leak term.
"""

from dataclasses import dataclass, replace
import math

import numpy as np

from . import _accel
from .tensor import ShapeError, conv2d_forward, im2col

DEFAULT_TIMESTEPS = 32
DEFAULT_TAU = 5.0

# Bound on the float64 entries materialised per im2col chunk.
_CHUNK_ELEMENTS = 8_000_000


@dataclass(frozen=True)
class LifState:
    membrane: np.ndarray
    v_th: float = 1.0
    trace: np.ndarray | None = None
    tau: float = DEFAULT_TAU

    @classmethod
    def zeros(cls, n_neurons, v_th=1.0, n_inputs=None, tau=DEFAULT_TAU):
        trace = None if n_inputs is None else np.zeros(n_inputs)
        return cls(np.zeros(n_neurons), float(v_th), trace, float(tau))


def decode_rate(spikes):
    """Spike count divided by the number of timesteps, per neuron."""
    spikes = np.asarray(spikes)
    return spikes.sum(axis=0, dtype=np.int64) / spikes.shape[0]


def firing_times(spikes):
    """List of step indices at which each neuron fired (neurons flattened)."""
    flat = np.asarray(spikes).reshape(spikes.shape[0], -1)
    return [np.flatnonzero(flat[:, j]).tolist() for j in range(flat.shape[1])]


def encode_rate(values, timesteps, mode="periodic", seed=None):
    """Rate-code ``values`` in [0, 1] as ``timesteps`` binary frames.

    ``periodic`` fires neuron ``v`` at every step ``t`` with
    ``floor((t+1) v) > floor(t v)``, so exactly ``floor(T v)`` spikes are
    emitted. ``stochastic`` draws independent Bernoulli(v) events from a
    generator seeded with ``seed``.
    """
    v = np.asarray(values, dtype=np.float64)
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if v.size and (not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("rate-coded values must lie in [0, 1]")
    if mode == "periodic":
        t = np.arange(timesteps + 1, dtype=np.float64).reshape((-1,) + (1,) * v.ndim)
        counts = np.floor(t * v)
        return (counts[1:] > counts[:-1]).astype(np.uint8)
    if mode == "stochastic":
        rng = np.random.default_rng(seed)
        return (rng.random((timesteps,) + v.shape) < v).astype(np.uint8)
    raise ValueError(f"unknown encoding mode {mode!r}")


def lif_step(state, input_current, input_spikes=None):
    """Advance one step. Returns ``(new_state, spikes)``.

    When ``input_spikes`` is given and the state carries a trace, the trace
    decays by ``exp(-1/tau)`` and gains 1 per input spike.
    """
    current = np.asarray(input_current, dtype=np.float64)
    if not np.all(np.isfinite(current)):
        raise ValueError("input current must be finite")
    p = state.membrane + current
    spikes = (p >= state.v_th).astype(np.uint8)
    p = p - state.v_th * spikes
    trace = state.trace
    if input_spikes is not None and trace is not None:
        trace = trace * math.exp(-1.0 / state.tau) + np.asarray(input_spikes)
    return replace(state, membrane=p, trace=trace), spikes


def lif_run(currents, v_th, membrane0=None):
    """Run ``T`` steps over ``currents`` of shape (T, n). Returns (spikes, final membrane)."""
    currents = np.ascontiguousarray(currents, dtype=np.float64)
    if currents.ndim != 2:
        raise ShapeError(f"currents must be (T, n), got shape {currents.shape}")
    if not np.all(np.isfinite(currents)):
        raise ValueError("input current must be finite")
    p0 = np.zeros(currents.shape[1]) if membrane0 is None else np.asarray(membrane0, dtype=np.float64)
    return _accel.lif_scan(currents, float(v_th), p0)


def low_pass_trace(spikes, tau=DEFAULT_TAU):
    """Exponential trace of a spike train, same shape as ``spikes``, float64."""
    spikes = np.asarray(spikes)
    flat = np.ascontiguousarray(spikes.reshape(spikes.shape[0], -1), dtype=np.float64)
    return _accel.exp_trace(flat, math.exp(-1.0 / tau)).reshape(spikes.shape)


def _time_chunks(steps, per_step):
    size = max(1, _CHUNK_ELEMENTS // max(1, per_step))
    return [(a, min(steps, a + size)) for a in range(0, steps, size)]


def synaptic_currents(input_spikes, weights, spec, bias=None):
    """Per-step membrane increments: the weights of every presynaptic site that
    fired at that step, summed per postsynaptic neuron. Shape (T, M, O, P)."""
    steps, n, h, w = input_spikes.shape
    per_step = spec.output_size(h) * spec.output_size(w) * n * spec.kernel ** 2
    parts = [conv2d_forward(input_spikes[a:b].astype(np.float64), weights, bias, spec)
             for a, b in _time_chunks(steps, per_step)]
    return np.concatenate(parts, axis=0)


def spiking_conv_forward(input_spikes, weights, spec, v_th=1.0, timesteps=None, bias=None):
    """Spiking convolution over a (T, N, H, W) train.

    Membranes start at zero for every call. ``bias``, when given, is injected
    as a constant current per output channel each step. Returns
    ``(output_spikes (T, M, O, P), activity)`` where activity is the fraction
    of output neuron-steps carrying a spike.
    """
    input_spikes = np.asarray(input_spikes)
    if input_spikes.ndim != 4:
        raise ShapeError(f"input spikes must be (T, N, H, W), got rank {input_spikes.ndim}")
    if timesteps is not None and input_spikes.shape[0] != timesteps:
        raise ShapeError(f"spike train has {input_spikes.shape[0]} steps, expected {timesteps}")
    if v_th <= 0:
        raise ValueError("v_th must be positive")
    cur = synaptic_currents(input_spikes, weights, spec, bias)
    steps = cur.shape[0]
    spikes, _ = lif_run(cur.reshape(steps, -1), v_th)
    spikes = spikes.reshape(cur.shape)
    return spikes, float(spikes.sum(dtype=np.int64)) / spikes.size


def spike_train_update(weights, target, output, input_trace, lr):
    """Error-correcting spike-train rule on a dense synapse matrix.

    ``weights`` is (n_out, n_in) or (n_in,) for a single neuron; ``target``
    and ``output`` are (T, n_out) or (T,); ``input_trace`` is (T, n_in).
    Returns ``W + lr * sum_t (S_d(t) - S_j(t)) * trace_i(t)``.
    """
    target = np.asarray(target, dtype=np.float64)
    output = np.asarray(output, dtype=np.float64)
    trace = np.asarray(input_trace, dtype=np.float64)
    if target.shape != output.shape:
        raise ShapeError(f"target train {target.shape} and output train {output.shape} differ")
    if trace.shape[0] != target.shape[0]:
        raise ShapeError(f"input trace has {trace.shape[0]} steps, trains have {target.shape[0]}")
    err = target - output
    if weights.ndim == 1:
        if err.ndim != 1 or trace.shape[1] != weights.shape[0]:
            raise ShapeError("single-neuron update needs (T,) trains and a (T, n_in) trace")
        return weights + lr * (err @ trace)
    if err.shape[1] != weights.shape[0] or trace.shape[1] != weights.shape[1]:
        raise ShapeError(f"weights {weights.shape} do not match trains {err.shape} / trace {trace.shape}")
    return weights + lr * (err.T @ trace)


def spike_train_update_conv(weights, target, output, input_trace, spec, lr, mask=None, bias=None):
    """Spike-train rule for shared convolution weights.

    ``target``/``output`` are (T, M, O, P) trains, ``input_trace`` the (T, N, H, W)
    low-pass trace of the presynaptic train. ``mask`` (M, O, P) restricts the
    update to neurons that carry a target. Each synapse accumulates the error
    times the trace of the input site it reads, summed over time and over every
    position sharing the weight. Returns ``(weights', bias')``; the bias reads a
    constant unit input.
    """
    err = np.asarray(target, dtype=np.float64) - np.asarray(output, dtype=np.float64)
    if err.shape[0] != input_trace.shape[0]:
        raise ShapeError(f"trace has {input_trace.shape[0]} steps, trains have {err.shape[0]}")
    if mask is not None:
        err = err * mask
    steps, m = err.shape[:2]
    err = err.reshape(steps, m, -1)
    n, h, w = input_trace.shape[1:]
    per_step = err.shape[2] * n * spec.kernel ** 2
    delta = np.zeros((m, n * spec.kernel ** 2))
    for a, b in _time_chunks(steps, per_step):
        cols, _ = im2col(np.asarray(input_trace[a:b], dtype=np.float64), spec.kernel, spec.stride, spec.padding)
        delta += np.einsum("tmp,tpq->mq", err[a:b], cols, optimize=True)
    new_w = weights + lr * delta.reshape(weights.shape)
    new_b = None if bias is None else bias + lr * err.sum(axis=(0, 2))
    return new_w, new_b


def train_disagreement(target, output):
    """Number of (neuron, step) cells where the two trains differ."""
    return int(np.count_nonzero(np.asarray(target) != np.asarray(output)))


def spike_train_to_csv(spikes, prefix=None):
    """``neuron_id,timestep`` rows, one per spike, neurons flattened row-major.

    With ``prefix`` a leading ``layer`` column holding that value is added.
    """
    s = np.asarray(spikes)
    flat = s.reshape(s.shape[0], -1)
    neurons, steps = np.nonzero(flat.T)
    head = "layer,neuron_id,timestep\n" if prefix is not None else "neuron_id,timestep\n"
    lead = f"{prefix}," if prefix is not None else ""
    return head + "".join(f"{lead}{n},{t}\n" for n, t in zip(neurons, steps))
