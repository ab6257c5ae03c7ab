"""FLOPS and energy accounting for conventional and spiking convolutions.

Convention: one multiply-accumulate is one FLOP; bias adds, activations and
pooling are not counted. Counts are Python integers so sums stay exact.
"""

from dataclasses import dataclass, asdict
import csv
import io
import json
import math

import numpy as np

DEFAULT_ENERGY_COEFF = 0.1
# Activity constant quoted for the worked example; physically implausible as a
# firing rate, so it is only used when explicitly requested.
NEAR_ZERO_ACTIVITY = 1e-8


def flops_conv(spec, output_size):
    """``O^2 * N * k^2 * M`` for a square output map of extent ``O``.

    ``spec`` is a :class:`ConvSpec` or an ``(in_channels, kernel, out_channels)``
    tuple; the tuple form also takes even kernels.
    """
    o = int(output_size)
    if isinstance(spec, tuple):
        n, k, m = (int(v) for v in spec)
    else:
        n, k, m = int(spec.in_channels), int(spec.kernel), int(spec.out_channels)
    if min(o, n, k, m) < 1:
        raise ValueError(f"all dimensions must be >= 1 (O={o}, N={n}, k={k}, M={m})")
    return o * o * n * k * k * m


def flops_spiking_conv(base, activity, allow_out_of_range=False):
    """Effective FLOPS of a spiking layer: ``base * S_a`` as a float."""
    if base < 0:
        raise ValueError("base FLOPS must be non-negative")
    if not math.isfinite(activity) or ((activity < 0 or activity > 1) and not allow_out_of_range):
        raise ValueError(f"spiking activity must lie in [0, 1], got {activity}")
    return base * activity


def measure_spiking_activity(trains):
    """Total spikes over total neuron-steps for a collection of (T, ...) trains."""
    trains = list(trains)
    if not trains:
        raise ValueError("no spike trains given")
    spikes = sum(int(np.asarray(t).sum(dtype=np.int64)) for t in trains)
    cells = sum(np.asarray(t).size for t in trains)
    if cells == 0:
        raise ValueError("spike trains are empty")
    return spikes / cells


def energy_snn(layer_flops, timesteps, coeff=DEFAULT_ENERGY_COEFF):
    """``sum(flops * coeff * T)`` over spiking layers."""
    if coeff <= 0:
        raise ValueError("energy coefficient must be positive")
    if timesteps < 0:
        raise ValueError("timesteps must be non-negative")
    return float(sum(f * coeff * timesteps for f in layer_flops))


@dataclass(frozen=True)
class LayerCost:
    name: str
    section: str
    spiking: bool
    flops_cnn: int
    flops_snn: float
    s_a: float
    energy: float


@dataclass(frozen=True)
class NetworkCost:
    layers: list
    timesteps: int
    coeff: float

    @property
    def total_flops_cnn(self):
        return sum(l.flops_cnn for l in self.layers)

    @property
    def total_flops_snn(self):
        return math.fsum(l.flops_snn for l in self.layers)

    @property
    def total_energy(self):
        return math.fsum(l.energy for l in self.layers)

    @property
    def backbone_flops(self):
        return sum(l.flops_cnn for l in self.layers if l.section == "backbone")

    @property
    def backbone_share(self):
        total = self.total_flops_cnn
        return self.backbone_flops / total if total else 0.0

    def to_dict(self):
        return {
            "layers": [asdict(l) for l in self.layers],
            "total_flops_cnn": self.total_flops_cnn,
            "total_flops_snn": self.total_flops_snn,
            "total_flops_snn_int": int(math.floor(self.total_flops_snn)),
            "total_energy": self.total_energy,
            "backbone_share": self.backbone_share,
            "timesteps": self.timesteps,
            "energy_coeff": self.coeff,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "section", "spiking", "flops_cnn", "flops_snn", "s_a", "energy"])
        for l in self.layers:
            w.writerow([l.name, l.section, int(l.spiking), l.flops_cnn, repr(l.flops_snn), repr(l.s_a),
                        repr(l.energy)])
        w.writerow(["TOTAL", "", "", self.total_flops_cnn, repr(self.total_flops_snn), "",
                    repr(self.total_energy)])
        return buf.getvalue()


def profile_layers(layers, activity=None, timesteps=32, coeff=DEFAULT_ENERGY_COEFF, allow_out_of_range=False):
    """Cost every conv layer in ``layers`` (resolved :class:`LayerSpec` list).

    ``activity`` gives S_a for spiking layers: a float for all of them or a
    mapping from layer name. Conventional layers run densely (S_a = 1) and carry
    no spiking energy.
    """
    costs = []
    for spec in layers:
        if spec.kind != "conv":
            continue
        base = flops_conv(spec.conv_spec, spec.out_size)
        if spec.spiking:
            if activity is None:
                raise ValueError(f"layer {spec.name!r} is spiking but no activity was supplied")
            s_a = activity[spec.name] if isinstance(activity, dict) else activity
            s_a = float(s_a)
            eff = flops_spiking_conv(base, s_a, allow_out_of_range)
            energy = energy_snn([eff], timesteps, coeff)
        else:
            s_a, eff, energy = 1.0, float(base), 0.0
        costs.append(LayerCost(spec.name, spec.section, spec.spiking, base, eff, s_a, energy))
    return NetworkCost(costs, timesteps, coeff)


def profile_network(config, activity=None, timesteps=None, coeff=DEFAULT_ENERGY_COEFF, allow_out_of_range=False):
    """Per-layer and total cost of a :class:`~scod.config.NetworkConfig`."""
    t = config.timesteps if timesteps is None else timesteps
    return profile_layers(config.resolved_layers(), activity, t, coeff, allow_out_of_range)
