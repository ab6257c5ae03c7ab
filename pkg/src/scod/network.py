"""The hybrid detector: conventional trunk, spiking and conventional head paths.

Each head entry taps a trunk feature map and runs two predictors over it. A
*conventional* predictor is a dense 3x3 convolution. A *spiking* predictor
min-max scales the feature map to [0, 1], rate-codes it over ``T`` steps,
drives integrate-and-fire neurons through a spiking convolution and decodes
the output spike counts; a decoded rate ``r`` maps to ``scale * (r - 0.5)``.

Conventional parameters learn by SGD on the multibox loss. Spiking predictor
weights learn either with the spike-train rule against rate-coded targets
(``spike_learning="delta"``, default) or by backpropagating through the dense
rate approximation ``r = clip((conv(x) + b) / V_th, 0, 1)`` (``"backprop"``).
Both modes pass the dense-rate gradient on to the trunk.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import weights as weight_io
from .config import NetworkConfig
from .multibox import (DEFAULT_VARIANCES, Box, decode_boxes, match_and_encode, multibox_loss,
                       nms_arrays, to_corners)
from .spiking import encode_rate, spike_train_to_csv, lif_run, low_pass_trace, spike_train_update_conv, synaptic_currents
from .tensor import (ShapeError, conv2d_backward, conv2d_forward, glorot_uniform, maxpool2d,
                     maxpool2d_backward, relu, sgd_step, softmax)

SPIKING_INIT_GAIN = 0.1


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float


@dataclass
class Sample:
    """One training image with normalised ground truth ``[(Box, class_id), ...]``."""
    image: np.ndarray
    objects: list
    image_id: str = ""


class Model:
    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.trunk = config.trunk()
        self.head_layers = {s.name: s for s in config.resolved_layers()[len(self.trunk):]}
        self.bank = config.default_boxes()
        self.variances = DEFAULT_VARIANCES

    # ------------------------------------------------------------------
    @property
    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def spiking_layers(self):
        return [name for name, s in self.head_layers.items() if s.spiking]

    def save(self, path):
        weight_io.save(path, self.params)

    def load_params(self, path):
        loaded = weight_io.load(path)
        for name, arr in self.params.items():
            if name not in loaded:
                raise ValueError(f"weight file lacks tensor {name!r}")
            if loaded[name].shape != arr.shape:
                raise ShapeError(f"tensor {name!r}: file has {loaded[name].shape}, model expects {arr.shape}")
        self.params = {name: loaded[name] for name in self.params}
        return self

    # ------------------------------------------------------------------
    def _prepare(self, images):
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        c, s = self.config.in_channels, self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ShapeError(f"expected image of shape ({c}, {s}, {s}), got {x.shape[-3:] if x.ndim >= 3 else x.shape}")
        if self.config.input_norm == "minmax":
            lo = x.min(axis=(1, 2, 3), keepdims=True)
            span = x.max(axis=(1, 2, 3), keepdims=True) - lo
            x = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
        return x, single

    def _trunk_forward(self, x, keep):
        feats, cache = {}, []
        for spec in self.trunk:
            if spec.kind == "conv":
                z = conv2d_forward(x, self.params[f"{spec.name}.weight"], self.params[f"{spec.name}.bias"],
                                   spec.conv_spec)
                y = relu(z) if spec.relu else z
                if keep:
                    cache.append((spec, x, z))
            else:
                y, idx = maxpool2d(x, spec.kernel, spec.stride, spec.padding, spec.ceil_mode, return_index=True)
                if keep:
                    cache.append((spec, x, idx))
            feats[spec.name] = y
            x = y
        return feats, cache

    def _path_forward(self, name, feat, scale, mode, keep):
        """Run one predictor. Returns (values (B, M, H, W), cache, activity)."""
        spec = self.head_layers[name]
        w, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        cs = spec.conv_spec
        if not spec.spiking:
            out = conv2d_forward(feat, w, b, cs)
            return out, ("conv", feat), None
        cfg = self.config
        bsz = feat.shape[0]
        lo = feat.min(axis=(1, 2, 3), keepdims=True)
        span = feat.max(axis=(1, 2, 3), keepdims=True) - lo
        safe = np.where(span > 0, span, 1.0)
        rates_in = np.where(span > 0, (feat - lo) / safe, 0.0)
        cache = {"rates_in": rates_in, "span": safe, "live": span > 0, "scale": scale, "feat": feat}
        if mode == "dense":
            u = conv2d_forward(rates_in, w, b, cs) / cfg.v_th
            rate = np.clip(u, 0.0, 1.0)
            activity = float(rate.mean())
        else:
            steps = cfg.timesteps
            spikes_in = encode_rate(rates_in, steps, cfg.encoding, seed=0)
            frames = spikes_in.reshape((steps * bsz,) + rates_in.shape[1:])
            cur = synaptic_currents(frames, w, cs, b)
            out_shape = cur.shape[1:]
            spikes, _ = lif_run(cur.reshape(steps, -1), cfg.v_th)
            spikes = spikes.reshape((steps, bsz) + out_shape)
            rate = spikes.mean(axis=0, dtype=np.float64)
            activity = float(spikes.mean(dtype=np.float64))
            if keep:
                cache["spikes_in"] = spikes_in
                cache["spikes_out"] = spikes
        return scale * (rate - 0.5), ("spike", cache), activity

    def forward(self, images, keep_cache=False, mode="spike"):
        """Run the detector.

        Returns ``(loc, conf, activity)``: loc ``(A, 4)`` and conf ``(A, C+1)``
        for a single image, or with a leading batch axis for a batch; activity
        maps each spiking layer name to its measured S_a. ``mode="dense"``
        replaces spike simulation by the clipped dense rate for comparison.
        """
        x, single = self._prepare(images)
        feats, trunk_cache = self._trunk_forward(x, keep_cache)
        cfg = self.config
        c1 = cfg.num_classes + 1
        locs, confs, activity, head_cache = [], [], {}, []
        for h in cfg.head:
            feat = feats[h.source]
            loc_v, loc_c, loc_a = self._path_forward(f"{h.source}_loc", feat, cfg.loc_scale, mode, keep_cache)
            conf_v, conf_c, conf_a = self._path_forward(f"{h.source}_conf", feat, cfg.conf_scale, mode, keep_cache)
            for name, a in ((f"{h.source}_loc", loc_a), (f"{h.source}_conf", conf_a)):
                if a is not None:
                    activity[name] = a
            bsz, _, fh, fw = loc_v.shape
            nb = h.boxes_per_cell
            locs.append(loc_v.transpose(0, 2, 3, 1).reshape(bsz, fh * fw * nb, 4))
            confs.append(conf_v.transpose(0, 2, 3, 1).reshape(bsz, fh * fw * nb, c1))
            head_cache.append((h, loc_c, conf_c, loc_v.shape, conf_v.shape))
        loc = np.concatenate(locs, axis=1)
        conf = np.concatenate(confs, axis=1)
        if keep_cache:
            self._cache = (trunk_cache, head_cache)
        if single:
            return loc[0], conf[0], activity
        return loc, conf, activity

    # ------------------------------------------------------------------
    def _split_anchor_grad(self, grad, h_index, shape, per_box):
        """Slice the (B, A, per_box) gradient of one head entry back to (B, M, H, W)."""
        start = 0
        for f, nb in self.bank.layout[:h_index]:
            start += f * f * nb
        bsz, m, fh, fw = shape
        nb = m // per_box
        part = grad[:, start:start + fh * fw * nb]
        return part.reshape(bsz, fh, fw, nb * per_box).transpose(0, 3, 1, 2)

    def _path_backward(self, name, cache, dv, grads, want_weight_grad):
        """Backpropagate through one predictor; returns d(feature)."""
        spec = self.head_layers[name]
        w = self.params[f"{name}.weight"]
        kind, c = cache
        if kind == "conv":
            dx, dw, db = conv2d_backward(c, w, dv, spec.conv_spec)
            grads[f"{name}.weight"] = dw
            grads[f"{name}.bias"] = db
            return dx
        b = self.params[f"{name}.bias"]
        u = conv2d_forward(c["rates_in"], w, b, spec.conv_spec) / self.config.v_th
        du = dv * c["scale"] * ((u > 0) & (u < 1)) / self.config.v_th
        drates, dw, db = conv2d_backward(c["rates_in"], w, du, spec.conv_spec)
        if want_weight_grad:
            grads[f"{name}.weight"] = dw
            grads[f"{name}.bias"] = db
        return _minmax_backward(c["feat"], c["rates_in"], c["span"], c["live"], drates)

    def backward(self, grad_loc, grad_conf):
        """Gradients of the last cached forward w.r.t. every parameter that
        learns by SGD. Spiking predictors are included only in backprop mode."""
        trunk_cache, head_cache = self._cache
        grad_loc = np.asarray(grad_loc).reshape((-1,) + grad_loc.shape[-2:])
        grad_conf = np.asarray(grad_conf).reshape((-1,) + grad_conf.shape[-2:])
        c1 = self.config.num_classes + 1
        backprop_spikes = self.config.spike_learning == "backprop"
        grads, pending = {}, {}
        for i, (h, loc_c, conf_c, loc_shape, conf_shape) in enumerate(head_cache):
            dl = self._split_anchor_grad(grad_loc, i, loc_shape, 4)
            dc = self._split_anchor_grad(grad_conf, i, conf_shape, c1)
            dfeat = self._path_backward(f"{h.source}_loc", loc_c, dl, grads, backprop_spikes)
            dfeat = dfeat + self._path_backward(f"{h.source}_conf", conf_c, dc, grads, backprop_spikes)
            pending[h.source] = pending.get(h.source, 0.0) + dfeat
        g = None
        for spec, x, extra in reversed(trunk_cache):
            if spec.name in pending:
                g = pending[spec.name] if g is None else g + pending[spec.name]
            if g is None:
                continue
            if spec.kind == "conv":
                if spec.relu:
                    g = g * (extra > 0)
                g, dw, db = conv2d_backward(x, self.params[f"{spec.name}.weight"], g, spec.conv_spec)
                grads[f"{spec.name}.weight"] = dw
                grads[f"{spec.name}.bias"] = db
            else:
                g = maxpool2d_backward(g, extra)
        return grads

    def spike_rule_updates(self, matches, neg_masks, lr):
        """Spike-train rule updates for every spiking predictor of the last
        cached forward. Targets: matched offsets for localisation, one-hot
        labels over the selected anchors for classification."""
        cfg = self.config
        _, head_cache = self._cache
        labels = np.stack([m.labels for m in matches])
        offsets = np.stack([m.offsets for m in matches])
        pos = labels > 0
        sel = pos | np.stack(neg_masks)
        c1 = cfg.num_classes + 1
        onehot = np.zeros(labels.shape + (c1,))
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        updates = {}
        for i, (h, loc_c, conf_c, loc_shape, conf_shape) in enumerate(head_cache):
            for suffix, cache, shape, per_box in (("loc", loc_c, loc_shape, 4), ("conf", conf_c, conf_shape, c1)):
                name = f"{h.source}_{suffix}"
                if not self.head_layers[name].spiking:
                    continue
                if suffix == "loc":
                    target = np.clip(0.5 + offsets / cfg.loc_scale, 0.0, 1.0)
                    mask = np.repeat(pos[..., None], 4, axis=-1).astype(np.float64)
                else:
                    target = onehot
                    mask = np.repeat(sel[..., None], c1, axis=-1).astype(np.float64)
                target = self._split_anchor_grad(target, i, shape, per_box)
                mask = self._split_anchor_grad(mask, i, shape, per_box)
                updates[name] = self._spike_rule(name, cache[1], target, mask, lr)
        return updates

    def _spike_rule(self, name, cache, target_rate, mask, lr):
        cfg = self.config
        steps = cfg.timesteps
        spec = self.head_layers[name]
        s_d = encode_rate(target_rate, steps, "periodic") * mask
        s_j = cache["spikes_out"] * mask
        trace = low_pass_trace(cache["spikes_in"], cfg.tau)
        flat = lambda a: a.reshape((-1,) + a.shape[2:])
        n_targets = max(1.0, float(mask.sum()))
        eta = lr * cfg.spike_lr_scale / (steps * n_targets)
        return spike_train_update_conv(self.params[f"{name}.weight"], flat(s_d), flat(s_j), flat(trace),
                                       spec.conv_spec, eta, bias=self.params[f"{name}.bias"])

    def spike_trace_csv(self, image):
        """Output spikes of every spiking predictor for one image as CSV."""
        self.forward(image, keep_cache=True)
        _, head_cache = self._cache
        self._cache = None
        header, rows = "layer,neuron_id,timestep\n", []
        for h, loc_c, conf_c, _, _ in head_cache:
            for suffix, (kind, c) in (("loc", loc_c), ("conf", conf_c)):
                if kind == "spike":
                    text = spike_train_to_csv(c["spikes_out"][:, 0], prefix=f"{h.source}_{suffix}")
                    rows.append(text[len(header):])
        return header + "".join(rows)

    # ------------------------------------------------------------------
    def detect(self, image, conf_threshold=0.01, nms_threshold=0.45, top_k=200):
        """Detections for one image, best score first."""
        if not (0 < conf_threshold < 1 and 0 < nms_threshold < 1):
            raise ValueError("thresholds must lie in (0, 1)")
        loc, conf, _ = self.forward(image)
        if top_k <= 0:
            return []
        return self.postprocess(loc, conf, conf_threshold, nms_threshold, top_k)

    def postprocess(self, loc, conf, conf_threshold=0.01, nms_threshold=0.45, top_k=200):
        scores = softmax(conf, axis=-1)[:, 1:]
        boxes = decode_boxes(self.bank, loc, self.variances)
        anchor_idx, cls = np.nonzero(scores > conf_threshold)
        if anchor_idx.size == 0 or top_k <= 0:
            return []
        cand_scores = scores[anchor_idx, cls]
        keep = nms_arrays(to_corners(boxes[anchor_idx]), cls, cand_scores, nms_threshold, top_k)
        return [Detection(Box(*boxes[anchor_idx[k]]), int(cls[k]), float(cand_scores[k])) for k in keep]


def _minmax_backward(feat, rates, span, live, g):
    """Gradient of per-sample ``(x - min) / (max - min)``, routed through the
    extreme elements (first occurrence on ties)."""
    bsz = feat.shape[0]
    flat = feat.reshape(bsz, -1)
    dx = (g / span).reshape(bsz, -1).copy()
    gsum = g.reshape(bsz, -1).sum(axis=1)
    grsum = (g * rates).reshape(bsz, -1).sum(axis=1)
    s = span.reshape(bsz)
    rows = np.arange(bsz)
    dx[rows, flat.argmin(axis=1)] += (grsum - gsum) / s
    dx[rows, flat.argmax(axis=1)] -= grsum / s
    return np.where(live, dx.reshape(feat.shape), 0.0)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_network(config, seed=0, weights_path=None):
    """Seeded initialisation of every layer, or load from an SCODW1 file."""
    if not isinstance(config, NetworkConfig):
        config = NetworkConfig.from_dict(config)
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for spec in config.resolved_layers():
        if spec.kind != "conv":
            continue
        shape = spec.conv_spec.weight_shape
        w = glorot_uniform(shape, rng)
        b = np.zeros(spec.out_channels)
        if spec.spiking:
            w *= SPIKING_INIT_GAIN
            b += 0.5 * config.v_th
        params[f"{spec.name}.weight"] = w
        params[f"{spec.name}.bias"] = b
    model = Model(config, params)
    if weights_path is not None:
        model.load_params(weights_path)
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def prepare_matches(model, dataset, iou_threshold=0.5):
    return [match_and_encode(model.bank, s.objects, iou_threshold, model.variances, model.config.num_classes)
            for s in dataset]


def train_step(model, batch, matches, lr, neg_ratio=3.0):
    """One SGD / spike-rule update on a batch. Returns the mean loss."""
    images = np.stack([s.image for s in batch])
    loc, conf, _ = model.forward(images, keep_cache=True)
    bsz = len(batch)
    grad_loc = np.zeros_like(loc)
    grad_conf = np.zeros_like(conf)
    total = 0.0
    negs = []
    for i, m in enumerate(matches):
        out = multibox_loss(conf[i], loc[i], m, neg_ratio)
        if not math.isfinite(out.loss):
            raise FloatingPointError(f"non-finite loss on sample {batch[i].image_id or i}; epoch aborted")
        total += out.loss
        grad_loc[i] = out.grad_loc / bsz
        grad_conf[i] = out.grad_conf / bsz
        negs.append(out.neg_mask)
    grads = model.backward(grad_loc, grad_conf)
    spike_updates = {}
    if model.config.spike_learning == "delta" and model.spiking_layers():
        spike_updates = model.spike_rule_updates(matches, negs, lr)
    for name, g in grads.items():
        model.params[name] = sgd_step(model.params[name], g, lr)
    for name, (w, b) in spike_updates.items():
        model.params[f"{name}.weight"] = w
        model.params[f"{name}.bias"] = b
    model._cache = None
    return total / bsz


def train_epoch(model, dataset, lr, seed, batch_size=8, matches=None, neg_ratio=3.0):
    """One pass over ``dataset`` in a seeded order. Returns ``(model, mean_loss)``."""
    if not dataset:
        raise ValueError("dataset is empty")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if matches is None:
        matches = prepare_matches(model, dataset)
    order = np.random.default_rng(seed).permutation(len(dataset))
    losses = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        loss = train_step(model, [dataset[i] for i in idx], [matches[i] for i in idx], lr, neg_ratio)
        losses.append(loss * len(idx))
    return model, float(sum(losses) / len(dataset))
