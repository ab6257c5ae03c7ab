"""Declarative network description shared by execution and cost profiling.

A config is a JSON object::

    {
      "input_size": 300, "in_channels": 3, "classes": [...],
      "timesteps": 32, "v_th": 1.0,
      "layers": [{"name": "conv1_1", "kind": "conv", "out": 64, "k": 3, "pad": 1, ...}, ...],
      "head":   [{"source": "conv4_3", "aspect_ratios": [1, 2, 0.5], "loc": "spiking", ...}, ...]
    }

``layers`` is a single sequential trunk; ``head`` entries tap trunk outputs by
layer name and attach a localisation and a classification predictor.
"""

from dataclasses import dataclass, field, asdict
from importlib import resources
import json
import os

from .multibox import generate_default_boxes
from .spiking import DEFAULT_TAU, DEFAULT_TIMESTEPS
from .tensor import ConvSpec, _pool_geometry


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str                   # "conv" or "maxpool"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    relu: bool = True
    ceil_mode: bool = False
    section: str = "backbone"   # "backbone" or "head"
    spiking: bool = False
    in_size: int = 0
    out_size: int = 0

    @property
    def conv_spec(self):
        return ConvSpec(self.in_channels, self.out_channels, self.kernel, self.stride, self.padding)


@dataclass(frozen=True)
class HeadSpec:
    source: str
    aspect_ratios: tuple
    kernel: int = 3
    loc: str = "spiking"        # path kind for localisation
    conf: str = "conventional"  # path kind for classification
    loc_channels: int | None = None
    conf_channels: int | None = None

    @property
    def boxes_per_cell(self):
        return len(self.aspect_ratios) + 1


@dataclass
class NetworkConfig:
    input_size: int
    classes: list
    layers: list
    head: list
    in_channels: int = 3
    timesteps: int = DEFAULT_TIMESTEPS
    v_th: float = 1.0
    tau: float = DEFAULT_TAU
    encoding: str = "periodic"
    s_min: float = 0.2
    s_max: float = 0.9
    loc_scale: float = 8.0
    conf_scale: float = 8.0
    input_norm: str = "none"
    spike_learning: str = "delta"    # "delta" or "backprop"
    spike_lr_scale: float = 1.0
    name: str = "custom"
    _resolved: list = field(default=None, repr=False, compare=False)

    @property
    def num_classes(self):
        return len(self.classes)

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, d):
        for key in ("input_size", "classes", "layers", "head"):
            if key not in d:
                raise ConfigError(f"config is missing required key {key!r}")
        layers = [dict(item) for item in d["layers"]]
        head = []
        for i, h in enumerate(d["head"]):
            if "source" not in h or "aspect_ratios" not in h:
                raise ConfigError(f"head[{i}] needs 'source' and 'aspect_ratios'")
            head.append(HeadSpec(
                source=h["source"], aspect_ratios=tuple(float(r) for r in h["aspect_ratios"]),
                kernel=int(h.get("k", 3)), loc=h.get("loc", "spiking"), conf=h.get("conf", "conventional"),
                loc_channels=h.get("loc_channels"), conf_channels=h.get("conf_channels")))
        known = {f for f in cls.__dataclass_fields__ if not f.startswith("_")}
        extras = {k: v for k, v in d.items() if k in known and k not in ("layers", "head")}
        cfg = cls(layers=layers, head=head, **extras)
        cfg.validate()
        return cfg

    def to_dict(self):
        out = {k: v for k, v in asdict(self).items() if not k.startswith("_") and k not in ("layers", "head")}
        out["layers"] = [dict(l) for l in self.layers]
        out["head"] = []
        for h in self.head:
            entry = {"source": h.source, "aspect_ratios": list(h.aspect_ratios), "k": h.kernel,
                     "loc": h.loc, "conf": h.conf}
            if h.loc_channels is not None:
                entry["loc_channels"] = h.loc_channels
            if h.conf_channels is not None:
                entry["conf_channels"] = h.conf_channels
            out["head"].append(entry)
        return out

    # ------------------------------------------------------------------
    def validate(self):
        if self.input_size < 1:
            raise ConfigError("input_size must be positive")
        if not self.classes:
            raise ConfigError("at least one class is required")
        if self.timesteps < 1 or self.v_th <= 0:
            raise ConfigError("timesteps must be >= 1 and v_th positive")
        if self.spike_learning not in ("delta", "backprop"):
            raise ConfigError(f"spike_learning must be 'delta' or 'backprop', got {self.spike_learning!r}")
        if not self.head:
            raise ConfigError("head is empty")
        self._resolved = None
        self.resolved_layers()
        return self

    def trunk(self):
        """Resolve trunk layers to :class:`LayerSpec` with channel and size inference."""
        specs = []
        channels, size = self.in_channels, self.input_size
        names = set()
        for i, raw in enumerate(self.layers):
            name = raw.get("name", f"layer{i}")
            if name in names:
                raise ConfigError(f"duplicate layer name {name!r}")
            names.add(name)
            kind = raw.get("kind", "conv")
            k = int(raw.get("k", 3))
            stride = int(raw.get("stride", 1 if kind == "conv" else k))
            pad = int(raw.get("pad", 0))
            section = raw.get("section", "backbone")
            if "in" in raw and int(raw["in"]) != channels:
                raise ConfigError(f"layer {name!r}: declares {raw['in']} input channels, "
                                  f"previous layer produces {channels}")
            try:
                if kind == "conv":
                    if "out" not in raw:
                        raise ConfigError(f"layer {name!r}: conv needs 'out'")
                    out_c = int(raw["out"])
                    cs = ConvSpec(channels, out_c, k, stride, pad)
                    out_size = cs.output_size(size)
                    spec = LayerSpec(name, "conv", channels, out_c, k, stride, pad,
                                     bool(raw.get("relu", True)), False, section, False, size, out_size)
                elif kind == "maxpool":
                    out_size, _ = _pool_geometry(size, k, stride, pad, bool(raw.get("ceil", False)))
                    spec = LayerSpec(name, "maxpool", channels, channels, k, stride, pad, False,
                                     bool(raw.get("ceil", False)), section, False, size, out_size)
                else:
                    raise ConfigError(f"layer {name!r}: unknown kind {kind!r}")
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"layer {name!r}: {exc}") from exc
            specs.append(spec)
            channels, size = spec.out_channels, spec.out_size
        return specs

    def resolved_layers(self):
        """Trunk layers followed by the two predictor layers of every head entry."""
        if self._resolved is not None:
            return self._resolved
        trunk = self.trunk()
        by_name = {s.name: s for s in trunk}
        out = list(trunk)
        c1 = self.num_classes + 1
        for h in self.head:
            if h.source not in by_name:
                raise ConfigError(f"head source {h.source!r} is not a trunk layer")
            for path in (h.loc, h.conf):
                if path not in ("spiking", "conventional"):
                    raise ConfigError(f"head {h.source!r}: path kind must be spiking or conventional, got {path!r}")
            src = by_name[h.source]
            b = h.boxes_per_cell
            if h.loc_channels is not None and h.loc_channels != 4 * b:
                raise ConfigError(f"head {h.source!r}_loc: loc_channels {h.loc_channels} != 4 * {b} boxes")
            if h.conf_channels is not None and h.conf_channels != c1 * b:
                raise ConfigError(f"head {h.source!r}_conf: conf_channels {h.conf_channels} != "
                                  f"({self.num_classes} + 1) * {b} boxes")
            pad = h.kernel // 2
            for suffix, m, kind in (("loc", 4 * b, h.loc), ("conf", c1 * b, h.conf)):
                try:
                    ConvSpec(src.out_channels, m, h.kernel, 1, pad)
                except ValueError as exc:
                    raise ConfigError(f"head {h.source}_{suffix}: {exc}") from exc
                out.append(LayerSpec(f"{h.source}_{suffix}", "conv", src.out_channels, m, h.kernel, 1, pad,
                                     False, False, "head", kind == "spiking", src.out_size, src.out_size))
        self._resolved = out
        return out

    def source_sizes(self):
        by_name = {s.name: s for s in self.trunk()}
        return [by_name[h.source].out_size for h in self.head]

    def box_layout(self):
        return [(f, h.aspect_ratios) for f, h in zip(self.source_sizes(), self.head)]

    def default_boxes(self):
        return generate_default_boxes(self.box_layout(), self.s_min, self.s_max)


def load_config(path_or_name):
    """Load a JSON config file, or a bundled one by name (``reference``, ``toy``)."""
    text = None
    if isinstance(path_or_name, dict):
        return NetworkConfig.from_dict(path_or_name)
    if os.path.exists(path_or_name):
        with open(path_or_name, encoding="utf-8") as fh:
            text = fh.read()
    else:
        bundled = resources.files("scod") / "configs" / f"{path_or_name}.json"
        if not bundled.is_file():
            raise ConfigError(f"no config file or bundled config named {path_or_name!r}")
        text = bundled.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return NetworkConfig.from_dict(data)
