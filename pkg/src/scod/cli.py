"""``scod`` command line: synth, train, eval, detect, profile."""

import argparse
import datetime as _dt
import json
import os
import sys

import numpy as np

from . import __version__

EXIT_RUNTIME = 1
EXIT_USAGE = 2

DEFAULT_EPOCHS = 50
DEFAULT_LR = 0.03
DEFAULT_BATCH = 8


def _sa_value(text):
    if text in ("auto", "near-zero"):
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, 'auto' or 'near-zero', got {text!r}")
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"spiking activity must lie in [0, 1], got {v}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="scod", description="Hybrid spiking single-shot detector toolkit.")
    p.add_argument("--version", action="version", version=f"scod {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{synth,train,eval,detect,profile}")
    sub.required = True

    def common(sp, config_default="toy"):
        sp.add_argument("--config", default=config_default,
                        help=f"config JSON path or bundled name (default: {config_default})")
        sp.add_argument("--seed", type=int, default=0, help="random seed; SCOD_SEED overrides (default: 0)")
        sp.add_argument("--threads", type=_positive_int, default=1, help="BLAS worker threads (default: 1)")

    s = sub.add_parser("synth", help="write a synthetic low-light dataset")
    s.add_argument("--n", type=_positive_int, default=200, help="number of images (default: 200)")
    s.add_argument("--seed", type=int, default=0, help="random seed; SCOD_SEED overrides (default: 0)")
    s.add_argument("--dark", type=float, default=0.2, help="brightness scale in (0, 1] (default: 0.2)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--threads", type=_positive_int, default=1, help="accepted for uniformity; synthesis is serial")

    t = sub.add_parser("train", help="train a detector on a manifest")
    common(t)
    t.add_argument("--data", required=True, help="manifest CSV or dataset directory")
    t.add_argument("--out", required=True, help="output directory for weights and logs")
    t.add_argument("--epochs", type=_positive_int, default=DEFAULT_EPOCHS,
                   help=f"training epochs (default: {DEFAULT_EPOCHS})")
    t.add_argument("--lr", type=float, default=DEFAULT_LR, help=f"learning rate (default: {DEFAULT_LR})")
    t.add_argument("--iou", type=float, default=0.5, help="IoU threshold for anchor matching and mAP (default: 0.5)")
    t.add_argument("--conf", type=float, default=0.01, help="score threshold for mAP logging (default: 0.01)")
    t.add_argument("--topk", type=int, default=200, help="detections kept per image (default: 200)")
    t.add_argument("--timesteps", type=_positive_int, default=None, help="override simulation length T")
    t.add_argument("--protocol", choices=("allpoint", "11point"), default="allpoint",
                   help="AP interpolation (default: allpoint)")
    t.add_argument("--weights", default=None, help="initial SCODW1 weight file")
    t.add_argument("--csv", action="store_true", help="write the epoch log as CSV instead of JSON lines")

    e = sub.add_parser("eval", help="evaluate mAP over a manifest")
    common(e)
    e.add_argument("--data", required=True, help="manifest CSV or dataset directory")
    e.add_argument("--weights", required=True, help="SCODW1 weight file")
    e.add_argument("--out", default=None, help="report directory (default: stdout only)")
    e.add_argument("--iou", type=float, default=0.5, help="IoU threshold for a true positive (default: 0.5)")
    e.add_argument("--conf", type=float, default=0.01, help="detection score threshold (default: 0.01)")
    e.add_argument("--topk", type=int, default=200, help="detections kept per image (default: 200)")
    e.add_argument("--timesteps", type=_positive_int, default=None, help="override simulation length T")
    e.add_argument("--protocol", choices=("allpoint", "11point"), default="allpoint",
                   help="AP interpolation (default: allpoint)")
    e.add_argument("--csv", action="store_true", help="write the report as CSV instead of JSON")

    d = sub.add_parser("detect", help="detections CSV for one image")
    common(d)
    d.add_argument("--data", required=True, help="PPM/PGM image")
    d.add_argument("--weights", required=True, help="SCODW1 weight file")
    d.add_argument("--out", default=None, help="output directory (default: CSV on stdout)")
    d.add_argument("--iou", type=float, default=0.45, help="NMS IoU threshold (default: 0.45)")
    d.add_argument("--conf", type=float, default=0.01, help="score threshold (default: 0.01)")
    d.add_argument("--topk", type=int, default=200, help="maximum detections (default: 200)")
    d.add_argument("--timesteps", type=_positive_int, default=None, help="override simulation length T")
    d.add_argument("--csv", action="store_true", help="accepted for uniformity; detections are always CSV")
    d.add_argument("--trace", action="store_true",
                   help="also write spike_trace.csv (layer, neuron_id, timestep) for every spiking predictor")

    f = sub.add_parser("profile", help="FLOPS and energy report")
    common(f, config_default="reference")
    f.add_argument("--timesteps", type=_positive_int, default=None, help="simulation length T (default: config)")
    f.add_argument("--sa", type=_sa_value, default="auto",
                   help="spiking activity: a value in [0, 1], 'auto' (measured on --data or a seeded random "
                        "input) or 'near-zero' (1e-8) (default: auto)")
    f.add_argument("--data", default=None, help="image used to measure activity with --sa auto")
    f.add_argument("--weights", default=None, help="SCODW1 weight file for --sa auto")
    f.add_argument("--out", default=None, help="output directory (default: stdout only)")
    f.add_argument("--csv", action="store_true", help="write the per-layer table as CSV instead of JSON")
    return p


# ---------------------------------------------------------------------------

class RunLog:
    """Collects what a run wrote and emits ``run_manifest.json`` beside it."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.started = _now()
        self.outputs = []

    def add(self, path):
        self.outputs.append(path)
        return path

    def write(self, out_dir):
        if out_dir is None:
            return
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "config": getattr(self.args, "config", None),
            "seed": getattr(self.args, "seed", None),
            "started": self.started,
            "finished": _now(),
            "outputs": self.outputs,
            "version": __version__,
        }
        with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _makedirs(path):
    if path is not None:
        os.makedirs(path, exist_ok=True)


def _config(args):
    from .config import load_config
    cfg = load_config(args.config)
    if getattr(args, "timesteps", None) is not None:
        cfg.timesteps = args.timesteps
    return cfg


def _write(path, text, log):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    log.add(path)


# ---------------------------------------------------------------------------

def cmd_synth(args, log):
    from .data import generate_synthetic_dataset
    rows = generate_synthetic_dataset(args.n, args.seed, args.dark, args.out)
    for r in rows:
        log.add(os.path.join(args.out, r["image_path"]))
        log.add(os.path.join(args.out, r["annotation_path"]))
    log.add(os.path.join(args.out, "manifest.csv"))
    print(f"wrote {len(rows)} images to {args.out}")
    return args.out


def cmd_train(args, log):
    from .data import load_dataset, read_manifest
    from .evaluate import group_by_class, mean_average_precision
    from .network import build_network, prepare_matches, train_epoch

    cfg = _config(args)
    rows = read_manifest(args.data)
    has_val = any(r["split"] == "val" for r in rows)
    train_rows = [r for r in rows if r["split"] == "train"] if has_val else rows
    samples, _ = load_dataset(train_rows, cfg.classes, cfg.input_size)
    if not samples:
        raise ValueError(f"manifest {args.data} has no training images")
    eval_samples, eval_anns = load_dataset([r for r in rows if r["split"] == "val"] if has_val else train_rows,
                                           cfg.classes, cfg.input_size)
    model = build_network(cfg, seed=args.seed, weights_path=args.weights)
    matches = prepare_matches(model, samples, args.iou)
    _makedirs(args.out)
    lines = ["epoch,loss,map\n"]
    log_path = log.add(os.path.join(args.out, "train_log.csv" if args.csv else "train_log.jsonl"))
    records = []
    for epoch in range(args.epochs):
        model, loss = train_epoch(model, samples, args.lr, seed=(args.seed, epoch), batch_size=DEFAULT_BATCH,
                                  matches=matches)
        dets = [model.detect(s.image, args.conf, 0.45, args.topk) for s in eval_samples]
        grouped_dets, gts, hard = group_by_class(eval_anns, dets, list(cfg.classes))
        report = mean_average_precision(grouped_dets, gts, args.iou, args.protocol, hard)
        rec = {"epoch": epoch + 1, "loss": loss, "map": report.map}
        records.append(rec)
        lines.append(f"{epoch + 1},{loss!r},{report.map!r}\n")
        print(f"epoch {epoch + 1}/{args.epochs} loss {loss:.6f} mAP {report.map:.4f}", flush=True)
    if args.csv:
        text = "".join(lines)
    else:
        text = "".join(json.dumps(r) + "\n" for r in records)
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    weights = log.add(os.path.join(args.out, "weights.scodw"))
    model.save(weights)
    print(f"wrote {weights}")
    return args.out


def cmd_eval(args, log):
    from .data import load_dataset
    from .evaluate import evaluate_model
    from .network import build_network

    cfg = _config(args)
    samples, anns = load_dataset(args.data, cfg.classes, cfg.input_size)
    if not samples:
        raise ValueError(f"manifest {args.data} lists no images")
    model = build_network(cfg, seed=args.seed, weights_path=args.weights)
    report = evaluate_model(model, samples, anns, args.iou, args.protocol, args.conf, 0.45, args.topk)
    sys.stdout.write(report.to_table())
    if args.out is not None:
        _makedirs(args.out)
        if args.csv:
            _write(os.path.join(args.out, "report.csv"), report.to_csv(), log)
        else:
            _write(os.path.join(args.out, "report.json"), report.to_json() + "\n", log)
    return args.out


def cmd_detect(args, log):
    from .data import read_image, resize_image
    from .multibox import detections_to_csv
    from .network import build_network

    cfg = _config(args)
    image = read_image(args.data)
    height, width = image.shape[1:]
    model = build_network(cfg, seed=args.seed, weights_path=args.weights)
    resized = resize_image(image, cfg.input_size)
    found = model.detect(resized, args.conf, args.iou, args.topk)
    if args.trace:
        if args.out is None:
            raise ValueError("--trace needs --out")
        _makedirs(args.out)
        _write(os.path.join(args.out, "spike_trace.csv"), model.spike_trace_csv(resized), log)
    image_id = os.path.splitext(os.path.basename(args.data))[0]
    text = detections_to_csv([(image_id, d) for d in found], cfg.classes, (width, height))
    if args.out is None:
        sys.stdout.write(text)
    else:
        _makedirs(args.out)
        _write(os.path.join(args.out, "detections.csv"), text, log)
        print(f"{len(found)} detections")
    return args.out


def cmd_profile(args, log):
    from .costmodel import NEAR_ZERO_ACTIVITY, profile_network

    cfg = _config(args)
    if args.sa == "near-zero":
        activity = NEAR_ZERO_ACTIVITY
    elif args.sa == "auto":
        activity = _measure_activity(cfg, args)
    else:
        activity = args.sa
    cost = profile_network(cfg, activity, cfg.timesteps, allow_out_of_range=False)
    text = cost.to_csv() if args.csv else cost.to_json() + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        _makedirs(args.out)
        _write(os.path.join(args.out, "profile.csv" if args.csv else "profile.json"), text, log)
        print(f"total FLOPS (CNN) {cost.total_flops_cnn}  backbone share {cost.backbone_share:.3f}")
    return args.out


def _measure_activity(cfg, args):
    from .data import read_image, resize_image
    from .network import build_network

    model = build_network(cfg, seed=args.seed, weights_path=args.weights)
    if args.data is not None:
        image = resize_image(read_image(args.data), cfg.input_size)
    else:
        rng = np.random.default_rng(args.seed)
        image = rng.uniform(0.0, 1.0, size=(cfg.in_channels, cfg.input_size, cfg.input_size))
    _, _, activity = model.forward(image)
    return activity


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "detect": cmd_detect,
            "profile": cmd_profile}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)          # exits 2 on usage errors
    env_seed = os.environ.get("SCOD_SEED")
    if env_seed not in (None, "") and hasattr(args, "seed"):
        try:
            args.seed = int(env_seed)
        except ValueError:
            parser.error(f"SCOD_SEED must be an integer, got {env_seed!r}")
    log = RunLog(args, argv)
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            out_dir = COMMANDS[args.command](args, log)
        log.write(out_dir)
    except (ValueError, OSError, FloatingPointError, KeyError) as exc:
        print(f"scod {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
