"""Command-line entry point: gen, train, calibrate, select, export-latent, bench.

Exit codes: 0 success, 2 usage or validation error, 3 numerical abort,
4 I/O or file-format error.  Every run writes ``<output>.manifest.json``.
"""

import argparse
import contextlib
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .anomaly import (
    THRESHOLD_KINDS,
    SelectionMode,
    Thresholds,
    calibrate,
    export_latent,
    per_count_report,
    score_frames,
    select,
    summed_image,
    write_image_csv,
    write_latent_csv,
    write_pgm,
    write_report_csv,
)
from .bench import DEFAULT_BATCHES, render_timing_csv, time_phases, write_raw_samples
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import BACKGROUND, SIGNAL, GenConfig, TrackConfig, gen_dataset
from .errors import ConfigMismatchError, FormatError, NonFiniteError
from .frameio import read_frames, write_frames
from .trainer import TrainConfig, split_dataset, train, write_metrics_csv
from .vae import ModelConfig

log = logging.getLogger("spadvae")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _file_digest(path):
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def write_manifest(output, args, inputs, outputs, config, started):
    path = Path(str(output) + ".manifest.json")
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    manifest = {
        "subcommand": args.command,
        "tool_version": __version__,
        "seed": getattr(args, "seed", None),
        "flags": _jsonable(flags),
        "config": _jsonable(config),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _labelled(frames_set, which):
    """Frames of one label class (all frames when the file is unlabelled)."""
    if frames_set.labels is None or which == "all":
        return frames_set.frames, frames_set.labels
    code = BACKGROUND if which == "background" else SIGNAL
    keep = frames_set.labels == code
    return frames_set.frames[keep], frames_set.labels[keep]


def _thresholds_for(path, ckpt):
    th = Thresholds.from_dict(json.loads(Path(path).read_text()))
    if th.config_hash is not None and th.config_hash != ckpt.config_hash:
        raise ConfigMismatchError(
            f"thresholds were calibrated for model {th.config_hash:016x}, "
            f"checkpoint is {ckpt.config_hash:016x}"
        )
    return th


# subcommands


def cmd_gen(args):
    started = _now()
    try:
        track = TrackConfig(hit_p=args.hit_p, max_drift=args.max_drift,
                            length_min=args.length_min, length_max=args.length_max)
        cfg = GenConfig(width=args.width, height=args.height, dcr_p=args.dcr,
                        crosstalk_p=args.crosstalk, track=track)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.bg < 0 or args.signal < 0:
        raise UsageError("frame counts must be non-negative")
    ds = gen_dataset(args.bg, args.signal, cfg, args.seed, workers=args.workers)
    write_frames(args.out, ds)
    write_manifest(args.out, args, {}, {"frames": args.out}, ds.provenance, started)
    log.info("wrote %d frames to %s", len(ds), args.out)


def cmd_train(args):
    started = _now()
    data = read_frames(args.input)
    frames, _ = _labelled(data, "background")
    model = ModelConfig(input_height=frames.shape[1], input_width=frames.shape[2],
                        latent_dim=args.latent)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, base_lr=args.lr,
                      split=tuple(args.split), seed=args.seed, model=model,
                      weight_decay=args.weight_decay)
    tr, va, te = split_dataset(frames, cfg.split, cfg.seed)
    ckpt, records = train(frames[tr], frames[va], cfg)
    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.csv")
    split_path = out.with_suffix(".split.json")
    save_checkpoint(out, ckpt)
    write_metrics_csv(metrics, records)
    split_path.write_text(json.dumps({
        "input": str(args.input),
        "input_digest": _file_digest(args.input),
        "config_hash": f"{ckpt.config_hash:016x}",
        "indices_refer_to": "background frames of the input file, in file order",
        "train": tr.tolist(), "val": va.tolist(), "test": te.tolist(),
    }) + "\n")
    write_manifest(out, args, {"frames": args.input},
                   {"checkpoint": out, "metrics": metrics, "split": split_path},
                   cfg.to_dict(), started)


def _calibration_frames(args, ckpt):
    data = read_frames(args.input)
    frames, _ = _labelled(data, "background")
    if args.split:
        split = json.loads(Path(args.split).read_text())
        if split.get("config_hash") not in (None, f"{ckpt.config_hash:016x}"):
            raise ConfigMismatchError("split file belongs to a different model config")
        if split.get("input_digest") not in (None, _file_digest(args.input)):
            raise ConfigMismatchError("split file was made from a different frame file")
        frames = frames[np.asarray(split["test"], dtype=np.int64)]
    return frames


def cmd_calibrate(args):
    started = _now()
    kinds = args.kind or (list(THRESHOLD_KINDS) if args.mixed else ["p98", "max"])
    if "divergence" in kinds and not args.mixed:
        raise UsageError("--kind divergence needs --mixed")
    ckpt = load_checkpoint(args.checkpoint)
    bg = score_frames(ckpt, _calibration_frames(args, ckpt), batch_size=args.eval_batch)
    mixed = None
    if args.mixed:
        mixed = score_frames(ckpt, read_frames(args.mixed).frames, batch_size=args.eval_batch)
    th = calibrate(bg, kinds, mixed, q=args.q, bins=args.bins, config_hash=ckpt.config_hash)
    th.provenance["inputs"] = {"background": str(args.input), "split": args.split,
                               "mixed": args.mixed, "checkpoint": str(args.checkpoint),
                               "n_background": len(bg)}
    Path(args.out).write_text(json.dumps(th.to_dict(), indent=2, sort_keys=True) + "\n")
    inputs = {"checkpoint": args.checkpoint, "frames": args.input}
    if args.mixed:
        inputs["mixed"] = args.mixed
    write_manifest(args.out, args, inputs, {"thresholds": args.out}, th.to_dict(), started)


def cmd_select(args):
    started = _now()
    ckpt = load_checkpoint(args.checkpoint)
    th = _thresholds_for(args.thresholds, ckpt)
    data = read_frames(args.input)
    frames, labels = _labelled(data, args.label)
    scores = score_frames(ckpt, frames, labels=labels, batch_size=args.eval_batch)
    mask = select(scores, th, args.mode, args.kind)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    outs = {
        "selection": Path(f"{prefix}.selection.csv"),
        "report": Path(f"{prefix}.report.csv"),
        "selected_pgm": Path(f"{prefix}.selected.pgm"),
        "unselected_pgm": Path(f"{prefix}.unselected.pgm"),
        "selected_csv": Path(f"{prefix}.selected.csv"),
        "unselected_csv": Path(f"{prefix}.unselected.csv"),
    }
    with open(outs["selection"], "w") as fh:
        fh.write("index,bce,kld,count,selected,label\n")
        for i in range(len(scores)):
            lab = "" if labels is None else int(labels[i])
            fh.write(f"{i},{float(scores.bce[i])!r},{float(scores.kld[i])!r},"
                     f"{int(scores.count[i])},{int(mask[i])},{lab}\n")
    write_report_csv(outs["report"], per_count_report(scores.count, mask, args.c_min, args.c_max))
    sel, unsel = summed_image(frames, mask)
    write_pgm(outs["selected_pgm"], sel)
    write_pgm(outs["unselected_pgm"], unsel)
    write_image_csv(outs["selected_csv"], sel)
    write_image_csv(outs["unselected_csv"], unsel)
    write_manifest(prefix, args, {"checkpoint": args.checkpoint, "thresholds": args.thresholds,
                                  "frames": args.input}, outs,
                   {"mode": args.mode, "kind": args.kind, "thresholds": th.values}, started)
    log.info("selected %d of %d frames", int(mask.sum()), len(mask))


def cmd_export_latent(args):
    started = _now()
    ckpt = load_checkpoint(args.checkpoint)
    data = read_frames(args.input)
    frames, labels = _labelled(data, args.label)
    mask = None
    if args.thresholds:
        th = _thresholds_for(args.thresholds, ckpt)
        mask = select(score_frames(ckpt, frames, batch_size=args.eval_batch), th,
                      args.mode, args.kind)
    table = export_latent(ckpt, frames, mask, labels, with_logvar=args.logvar,
                          batch_size=args.eval_batch)
    write_latent_csv(args.out, table)
    inputs = {"checkpoint": args.checkpoint, "frames": args.input}
    if args.thresholds:
        inputs["thresholds"] = args.thresholds
    write_manifest(args.out, args, inputs, {"latent": args.out},
                   {"latent_dim": ckpt.config.latent_dim}, started)


def cmd_bench(args):
    started = _now()
    ckpt = load_checkpoint(args.checkpoint)
    dtype = {"float32": np.float32, "float64": np.float64}[args.dtype]
    report = time_phases(ckpt, args.batches, n_runs=args.runs, warmup_runs=args.warmup,
                         seed=args.seed, dtype=dtype, parallel=args.parallel)
    for w in report.warnings:
        log.warning(w)
    render_timing_csv(report, args.out)
    outs = {"timing": args.out}
    if args.raw:
        write_raw_samples(report, args.raw)
        outs["raw"] = args.raw
    write_manifest(args.out, args, {"checkpoint": args.checkpoint}, outs,
                   {"label": report.label, "dtype": args.dtype, "warnings": report.warnings},
                   started)


# argument parsing


def _int_list(s):
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _float_list(s):
    try:
        return [float(v) for v in s.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def _selection_flags(p):
    p.add_argument("--mode", choices=[m.value for m in SelectionMode], default="either")
    p.add_argument("--kind", choices=THRESHOLD_KINDS, default="p98")


def build_parser():
    parser = argparse.ArgumentParser(prog="spadvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="cap on worker and BLAS threads")
    common.add_argument("--config", default=None,
                        help="key=value file; keys mirror flag names")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate synthetic frames")
    p.add_argument("--bg", type=int, default=0, help="background frames")
    p.add_argument("--signal", type=int, default=0, help="signal (track) frames")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--dcr", type=float, default=GenConfig.dcr_p, help="dark-count probability")
    p.add_argument("--crosstalk", type=float, default=GenConfig.crosstalk_p)
    p.add_argument("--hit-p", type=float, default=TrackConfig.hit_p)
    p.add_argument("--max-drift", type=int, default=TrackConfig.max_drift)
    p.add_argument("--length-min", type=int, default=TrackConfig.length_min)
    p.add_argument("--length-max", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train on background frames")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default="model.vaec")
    p.add_argument("--metrics", default=None)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--latent", type=int, default=32)
    p.add_argument("--split", type=_float_list, default=[0.6, 0.1, 0.3])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[common], help="compute thresholds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True, help="background frame file")
    p.add_argument("--split", default=None, help="split.json from train; uses its test indices")
    p.add_argument("--mixed", default=None, help="mixed frame file for divergence thresholds")
    p.add_argument("--kind", choices=THRESHOLD_KINDS, action="append", default=None)
    p.add_argument("--q", type=float, default=0.98)
    p.add_argument("--bins", type=int, default=200)
    p.add_argument("--eval-batch", type=int, default=512)
    p.add_argument("--out", default="thresholds.json")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("select", parents=[common], help="select anomalous frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--label", choices=("all", "background", "signal"), default="all")
    _selection_flags(p)
    p.add_argument("--c-min", type=int, default=4)
    p.add_argument("--c-max", type=int, default=9)
    p.add_argument("--eval-batch", type=int, default=512)
    p.add_argument("--out", default="selection", help="output path prefix")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("export-latent", parents=[common], help="dump latent means")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--label", choices=("all", "background", "signal"), default="all")
    p.add_argument("--thresholds", default=None, help="fill the selected column")
    _selection_flags(p)
    p.add_argument("--logvar", action="store_true", help="append logvar columns")
    p.add_argument("--eval-batch", type=int, default=512)
    p.add_argument("--out", default="latent.csv")
    p.set_defaults(func=cmd_export_latent)

    p = sub.add_parser("bench", parents=[common], help="time inference phases")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batches", type=_int_list, default=list(DEFAULT_BATCHES))
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--parallel", action="store_true",
                   help="allow multi-threaded BLAS inside each batch")
    p.add_argument("--raw", default=None, help="also dump every sample")
    p.add_argument("--out", default="timing.csv")
    p.set_defaults(func=cmd_bench)
    return parser


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-")] = v
    return out


def _apply_config(parser, command, path):
    """Install config-file values as subcommand defaults, so flags still win."""
    try:
        values = read_config_file(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    subparser = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        dest = "input" if key == "in" else key.replace("-", "_")
        if dest not in actions or dest in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for {command}")
        a = actions[dest]
        if a.nargs == 0:
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise UsageError(f"config key {key!r} expects a boolean, got {raw!r}")
            defaults[dest] = low in _TRUE
        elif isinstance(a, argparse._AppendAction):
            defaults[dest] = [a.type(v.strip()) if a.type else v.strip() for v in raw.split(",")]
        else:
            # argparse converts string defaults through ``type``
            defaults[dest] = raw
        a.required = False
    subparser.set_defaults(**defaults)


def _peek_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    command = next((t for t in argv if t in commands), None)
    return known.config, command


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    config_path, command = _peek_config(parser, argv)
    if config_path and command:
        try:
            _apply_config(parser, command, config_path)
        except UsageError as exc:
            parser.exit(EXIT_USAGE, f"spadvae: error: {exc}\n")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("spadvae: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.threads is not None and hasattr(args, "workers"):
        args.workers = max(1, min(args.workers, args.threads))
    try:
        with _threads(args.threads):
            args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spadvae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"spadvae {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"spadvae {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:  # includes ConfigMismatchError
        print(f"spadvae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


if __name__ == "__main__":
    sys.exit(main())
