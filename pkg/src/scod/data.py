"""Annotation parsers, a netpbm reader/writer and the synthetic dark dataset.

Parsers never clamp: a box outside its image is an error, not a fix-up.
"""

from dataclasses import dataclass, field
import csv
import os
import xml.etree.ElementTree as ET

import numpy as np

VOC_CLASSES = ("aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
               "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
               "train", "tvmonitor")
EXDARK_CLASSES = ("Bicycle", "Boat", "Bottle", "Bus", "Car", "Cat", "Chair", "Cup", "Dog", "Motorbike",
                  "People", "Table")
SYNTHETIC_CLASSES = ("square", "circle", "triangle")

BBGT_HEADER = "% bbGt version=3"
SYNTH_SIZE = 64
NOISE_AMPLITUDE = 0.02
MANIFEST_COLUMNS = ("image_path", "annotation_path", "split")


class AnnotationError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotatedObject:
    class_name: str
    box: tuple          # (xmin, ymin, xmax, ymax) in pixels, zero-based
    difficult: bool = False


@dataclass
class Annotation:
    image_id: str
    width: int | None
    height: int | None
    objects: list = field(default_factory=list)


def _check_box(box, width, height, where):
    xmin, ymin, xmax, ymax = box
    if not (0 <= xmin < xmax and 0 <= ymin < ymax):
        raise AnnotationError(f"{where}: degenerate or negative box {box}")
    if width is not None and xmax > width:
        raise AnnotationError(f"{where}: xmax {xmax} exceeds image width {width}")
    if height is not None and ymax > height:
        raise AnnotationError(f"{where}: ymax {ymax} exceeds image height {height}")


def _check_class(name, class_names, where):
    if class_names is not None and name not in class_names:
        raise AnnotationError(f"{where}: class {name!r} not in the configured class set")


# ---------------------------------------------------------------------------
# Pascal VOC XML
# ---------------------------------------------------------------------------

def parse_voc_xml(data, class_names=None):
    """Parse a VOC annotation; corners are shifted from 1-based to 0-based on
    the min side (``xmin - 1``, ``ymin - 1``)."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, col = exc.position
        raise AnnotationError(f"malformed VOC XML at line {line}, column {col}: {exc}") from exc
    size = root.find("size")
    if size is None:
        raise AnnotationError("VOC XML has no <size> element")
    try:
        width = int(float(size.findtext("width")))
        height = int(float(size.findtext("height")))
    except (TypeError, ValueError) as exc:
        raise AnnotationError("VOC <size> lacks a numeric width/height") from exc
    image_id = (root.findtext("filename") or "").rsplit(".", 1)[0]
    ann = Annotation(image_id, width, height)
    for i, obj in enumerate(root.iter("object")):
        where = f"object {i}"
        name = (obj.findtext("name") or "").strip()
        if not name:
            raise AnnotationError(f"{where}: missing <name>")
        _check_class(name, class_names, where)
        bnd = obj.find("bndbox")
        if bnd is None:
            raise AnnotationError(f"{where} ({name}): missing <bndbox>")
        try:
            xmin, ymin, xmax, ymax = (float(bnd.findtext(t)) for t in ("xmin", "ymin", "xmax", "ymax"))
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"{where} ({name}): non-numeric <bndbox>") from exc
        box = (xmin - 1, ymin - 1, xmax, ymax)
        _check_box(box, width, height, f"{where} ({name})")
        difficult = (obj.findtext("difficult") or "0").strip() == "1"
        ann.objects.append(AnnotatedObject(name, box, difficult))
    return ann


# ---------------------------------------------------------------------------
# Ex-Dark bbGt v3
# ---------------------------------------------------------------------------

def parse_exdark_bbgt(data, image_id="", image_size=None, class_names=None):
    """Parse a ``% bbGt version=3`` file. Rows are ``class l t w h ...``.

    ``image_size`` ``(width, height)`` enables the upper-bound box check; the
    format itself does not record it.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    lines = text.splitlines()
    if not lines or lines[0].strip() != BBGT_HEADER:
        raise AnnotationError(f"missing {BBGT_HEADER!r} header on line 1")
    width, height = image_size if image_size is not None else (None, None)
    ann = Annotation(image_id, width, height)
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if not fields:
            continue
        if len(fields) < 5:
            raise AnnotationError(f"line {lineno}: expected at least 5 fields, got {len(fields)}")
        name = fields[0]
        try:
            left, top, w, h = (float(v) for v in fields[1:5])
        except ValueError as exc:
            raise AnnotationError(f"line {lineno}: non-numeric box fields") from exc
        _check_class(name, class_names, f"line {lineno}")
        box = (left, top, left + w, top + h)
        _check_box(box, width, height, f"line {lineno}")
        ann.objects.append(AnnotatedObject(name, box, False))
    return ann


def format_bbgt(objects):
    def num(v):
        return str(int(v)) if float(v).is_integer() else repr(float(v))
    rows = [BBGT_HEADER]
    for obj in objects:
        x0, y0, x1, y1 = obj.box
        rows.append(f"{obj.class_name} {num(x0)} {num(y0)} {num(x1 - x0)} {num(y1 - y0)} 0 0 0 0 0 0 0")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

def _header_tokens(data, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated netpbm header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_image(data, fmt=None):
    """Decode binary PPM (P6) or PGM (P5) with maxval 255 into (3, H, W) in [0, 1]."""
    if isinstance(data, (str, os.PathLike)):
        with open(data, "rb") as fh:
            data = fh.read()
    tokens, pos = _header_tokens(data, 4)
    magic = tokens[0].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    if fmt is not None and fmt.upper() not in (magic, {"P6": "PPM", "P5": "PGM"}[magic]):
        raise ImageFormatError(f"expected {fmt}, found {magic}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise ImageFormatError("non-numeric netpbm header field") from exc
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid image extent {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval} unsupported; only 255 is accepted")
    channels = 3 if magic == "P6" else 1
    need = width * height * channels
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise ImageFormatError(f"payload has {len(raster)} bytes, expected {need}")
    pix = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    img = pix.transpose(2, 0, 1).astype(np.float64) / 255.0
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def encode_ppm(image):
    """(3, H, W) floats in [0, 1] -> P6 bytes. Values are floored to 1/255 steps."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError(f"expected (3, H, W), got {img.shape}")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 1e-9).astype(np.uint8)
    h, w = q.shape[1:]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def resize_image(image, size):
    """Bilinear resize of a (C, H, W) image to (C, size, size)."""
    c, h, w = image.shape
    if (h, w) == (size, size):
        return image
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# synthetic dark dataset
# ---------------------------------------------------------------------------

def _shape_mask(kind, x, y, s, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "square":
        return (xx >= x) & (xx < x + s) & (yy >= y) & (yy < y + s)
    if kind == "circle":
        r = s / 2
        return (xx - (x + r)) ** 2 + (yy - (y + r)) ** 2 <= r * r
    # triangle: apex at top centre, base along the bottom edge of the box
    inside = (yy >= y) & (yy < y + s)
    half = (yy - y) / s * (s / 2)
    return inside & (np.abs(xx - (x + s / 2)) <= half)


def _tight_box(mask):
    ys, xs = np.nonzero(mask)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def synthesize_image(rng, dark_scale, size=SYNTH_SIZE, max_objects=3, min_side=12, max_side=28):
    """One image and its objects. Content lies in [0, 1] before the dark scale,
    then noise of amplitude ``NOISE_AMPLITUDE`` is added."""
    content = rng.uniform(0.0, 0.3, size=(3, size, size))
    objects, taken = [], []
    n = int(rng.integers(1, max_objects + 1))
    attempts = 0
    while len(objects) < n and attempts < 200:
        attempts += 1
        s = int(rng.integers(min_side, max_side + 1))
        x = int(rng.integers(0, size - s + 1))
        y = int(rng.integers(0, size - s + 1))
        if any(x < bx1 + 2 and bx0 < x + s + 2 and y < by1 + 2 and by0 < y + s + 2 for bx0, by0, bx1, by1 in taken):
            continue
        kind = SYNTHETIC_CLASSES[int(rng.integers(0, len(SYNTHETIC_CLASSES)))]
        mask = _shape_mask(kind, x, y, s, size)
        color = rng.uniform(0.6, 1.0, size=3)
        content[:, mask] = color[:, None]
        taken.append((x, y, x + s, y + s))
        objects.append(AnnotatedObject(kind, _tight_box(mask)))
    noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=content.shape)
    image = np.clip(dark_scale * content + noise, 0.0, 1.0)
    return image, objects


def generate_synthetic_dataset(n, seed, dark_scale, out_dir, val_fraction=0.0):
    """Write ``n`` PPM images, bbGt annotations and ``manifest.csv`` to ``out_dir``.

    Returns the manifest rows. Output bytes depend only on the arguments.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 < dark_scale <= 1:
        raise ValueError("dark_scale must lie in (0, 1]")
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "annotations"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir!r}: {exc}") from exc
    rng = np.random.default_rng(seed)
    rows, anns = [], []
    for i in range(n):
        image, objects = synthesize_image(rng, dark_scale)
        stem = f"img_{i:05d}"
        img_rel = f"images/{stem}.ppm"
        ann_rel = f"annotations/{stem}.txt"
        with open(os.path.join(out_dir, img_rel), "wb") as fh:
            fh.write(encode_ppm(image))
        with open(os.path.join(out_dir, ann_rel), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_bbgt(objects))
        rows.append({"image_path": img_rel, "annotation_path": ann_rel, "split": "train"})
        anns.append(Annotation(stem, SYNTH_SIZE, SYNTH_SIZE, objects))
    if val_fraction > 0:
        splits = split_train_val(anns, val_fraction, seed)
        for row, split in zip(rows, splits):
            row["split"] = split
    write_manifest(os.path.join(out_dir, "manifest.csv"), rows)
    return rows


# ---------------------------------------------------------------------------
# manifests and splits
# ---------------------------------------------------------------------------

def write_manifest(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in MANIFEST_COLUMNS})


def read_manifest(path):
    """Rows with paths resolved against the manifest's directory."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.csv")
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise AnnotationError(f"manifest {path} lacks columns {sorted(missing)}")
        rows = []
        for row in reader:
            rows.append({
                "image_path": os.path.join(base, row["image_path"]),
                "annotation_path": os.path.join(base, row["annotation_path"]),
                "split": row["split"],
            })
    return sorted(rows, key=lambda r: os.path.basename(r["image_path"]))


def split_train_val(annotations, val_fraction=0.3, seed=0):
    """Seeded split stratified by each image's first object class.

    Returns a list of ``"train"``/``"val"`` labels aligned with ``annotations``.
    """
    rng = np.random.default_rng(seed)
    groups = {}
    for i, ann in enumerate(annotations):
        key = ann.objects[0].class_name if ann.objects else ""
        groups.setdefault(key, []).append(i)
    labels = ["train"] * len(annotations)
    for key in sorted(groups):
        idx = np.array(groups[key])
        rng.shuffle(idx)
        for i in idx[:int(round(val_fraction * len(idx)))]:
            labels[i] = "val"
    return labels


def load_annotation(path, image_size=None, class_names=None):
    with open(path, "rb") as fh:
        data = fh.read()
    stem = os.path.splitext(os.path.basename(path))[0]
    if path.lower().endswith(".xml"):
        ann = parse_voc_xml(data, class_names)
        ann.image_id = ann.image_id or stem
        return ann
    return parse_exdark_bbgt(data, stem, image_size, class_names)


def load_dataset(manifest, class_names, input_size, split=None, keep_difficult=False):
    """Read images and annotations into normalised training samples.

    Returns ``(samples, annotations)``; ``samples`` hold the resized image and
    ``[(Box, class_id)]`` and ``annotations`` the raw pixel-space records.
    """
    from .multibox import Box
    from .network import Sample

    rows = read_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else manifest
    index = {name: i for i, name in enumerate(class_names)}
    samples, anns = [], []
    for row in rows:
        if split is not None and row["split"] != split:
            continue
        image = read_image(row["image_path"])
        h, w = image.shape[1:]
        ann = load_annotation(row["annotation_path"], (w, h), class_names)
        objects = []
        for obj in ann.objects:
            if obj.difficult and not keep_difficult:
                continue
            x0, y0, x1, y1 = obj.box
            objects.append((Box.from_corners(x0 / w, y0 / h, x1 / w, y1 / h), index[obj.class_name]))
        samples.append(Sample(resize_image(image, input_size), objects, ann.image_id))
        anns.append(ann)
    return samples, anns
