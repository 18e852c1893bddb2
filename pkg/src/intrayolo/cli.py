"""Command-line front end.

Exit status: 0 on success, 1 for usage or configuration errors, 2 when a
stage fails at runtime. Each command writes ``<output>.run.json`` with the
arguments, the effective configuration, seeds and content hashes of its
inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("intrayolo")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# reproducibility record -------------------------------------------------

def git_blob_hash(path: str) -> str:
    """SHA-1 of the file as git would store it (``blob <len>\\0<bytes>``)."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _manifest_files(path: str) -> list[str]:
    from .dataset import load_manifest
    m = load_manifest(path)
    return sorted({os.path.join(m.root, im.path) for im in m.images})


def input_hashes(inputs: dict[str, str]) -> dict[str, dict]:
    out = {}
    for name, path in sorted(inputs.items()):
        if path is None:
            continue
        entry = {"path": os.path.basename(path), "blob": git_blob_hash(path)}
        if name == "data":
            # fold the referenced image files into one tree-style digest
            h = hashlib.sha1()
            for f in _manifest_files(path):
                h.update(f"{os.path.basename(f)} {git_blob_hash(f)}\n".encode())
            entry["images_tree"] = h.hexdigest()
        out[name] = entry
    return out


def write_run_record(out_path: str, command: str, argv: Sequence[str], cfg: RunConfig,
                     seeds: dict, inputs: dict[str, str], extra: Optional[dict] = None) -> str:
    record = {"command": command, "argv": list(argv), "version": __version__, "seeds": seeds,
              "inputs": input_hashes(inputs), "config": cfg.to_dict()}
    if extra:
        record["extra"] = extra
    if os.path.isdir(out_path):
        path = os.path.join(out_path, "run.json")
    else:
        path = out_path + ".run.json"
    with open(path, "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
    return path


# commands ---------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig):
    from .dataset import save_manifest, split_dataset
    from .synth import generate_dataset

    d = cfg.values["data"]
    manifest = generate_dataset(d["n_images"], cfg.synth_params(), args.out)
    train, val = split_dataset(manifest, d["split_ratio"], d["seed"])
    save_manifest(train, os.path.join(args.out, "train.json"))
    save_manifest(val, os.path.join(args.out, "val.json"))
    print(f"wrote {len(manifest.images)} images, {len(manifest.annotations)} lesions "
          f"({len(train.images)} train / {len(val.images)} val) to {args.out}")
    return args.out, {"data": d["seed"]}, {}


def _save_run(run, path: str, extra: dict) -> None:
    run.trainer.save(path, extra={**run.checkpoint_extra(), **extra})
    with open(path + ".log.jsonl", "w") as fh:
        for step, m in enumerate(run.metrics):
            fh.write(json.dumps({"step": step, **m}, sort_keys=True) + "\n")
        for k, s in enumerate(run.ppo_stats):
            fh.write(json.dumps({"ppo_update": k, **s}, sort_keys=True) + "\n")


def cmd_train_teacher(args, cfg: RunConfig):
    from .dataset import load_manifest
    from .pipeline import train_teacher

    settings = cfg.train_settings("teacher")
    manifest = load_manifest(args.data)
    run = train_teacher(manifest, cfg.model_config("teacher"), settings,
                        cfg.values["data"]["patch_size"] or None)
    _save_run(run, args.out, {"role": "teacher"})
    print(f"teacher: {settings.steps} steps, final loss {run.metrics[-1]['total']:.4f} -> {args.out}")
    return args.out, {"train": settings.seed}, {"data": args.data}


def _handle(path: str, cfg: RunConfig):
    from .inference import DetectorHandle

    s = cfg.values["slicer"]
    return DetectorHandle.from_checkpoint(path, tile=s["tile"] or None, overlap=s["overlap"],
                                          tau_merge=s["tau_merge"], include_full_frame=s["include_full_frame"])


def cmd_pseudo_label(args, cfg: RunConfig):
    from .dataset import load_manifest
    from .distill import generate_pseudo_labels, save_pseudo_labels

    d = cfg.values["distill"]
    pseudo = generate_pseudo_labels(_handle(args.teacher, cfg), load_manifest(args.data),
                                    d["use_slicing"], d["score_floor"])
    save_pseudo_labels(pseudo, args.out)
    print(f"{len(pseudo)} pseudo-labels (slicing {'on' if d['use_slicing'] else 'off'}) -> {args.out}")
    return args.out, {}, {"data": args.data, "teacher": args.teacher}


def cmd_train_student(args, cfg: RunConfig):
    from .dataset import load_manifest
    from .distill import load_pseudo_labels, write_decision_log
    from .pipeline import train_detector

    dcfg = cfg.distill_config()
    pseudo = load_pseudo_labels(args.pseudo) if args.pseudo else []
    if dcfg.mode != "none" and not args.pseudo:
        raise UsageError(f"--mode {dcfg.mode} needs --pseudo")
    settings = cfg.train_settings("student")
    run = train_detector(load_manifest(args.data), cfg.model_config("student"), settings, dcfg, pseudo,
                         cfg.ppo_config())
    _save_run(run, args.out, {"role": "student", "distill": cfg.values["distill"]})
    if dcfg.mode == "ppo":
        with open(args.out + ".decisions.jsonl", "w") as fh:
            write_decision_log(run.decisions, fh)
    accepted = sum(m["accepted"] for m in run.metrics)
    print(f"student ({dcfg.mode}): {settings.steps} steps, {accepted} pseudo-label uses, "
          f"final loss {run.metrics[-1]['total']:.4f} -> {args.out}")
    return args.out, {"train": settings.seed}, {"data": args.data, "pseudo": args.pseudo}


def cmd_infer(args, cfg: RunConfig):
    from .dataset import load_manifest
    from .pipeline import infer
    from .slicing import save_detections

    dets = infer(_handle(args.model, cfg), load_manifest(args.data), args.slice,
                 cfg.values["slicer"]["conf_thresh"])
    save_detections(dets, args.out)
    print(f"{sum(map(len, dets.values()))} detections on {len(dets)} images -> {args.out}")
    return args.out, {}, {"data": args.data, "model": args.model}


def cmd_eval(args, cfg: RunConfig):
    from .dataset import load_manifest
    from .evaluation import evaluate, report_rows
    from .slicing import load_detections

    manifest = load_manifest(args.data)
    rows, inputs = [], {"data": args.data}
    for k, spec in enumerate(args.dets):
        name, _, path = spec.rpartition("=")
        name = name or args.name or os.path.splitext(os.path.basename(path))[0]
        rows.append((name, evaluate(load_detections(path), manifest)))
        inputs[f"dets{k}"] = path
    text = report_rows(rows, args.format)
    sys.stdout.write(text)
    out = args.out or os.path.splitext(args.dets[0].rpartition("=")[2])[0] + ".report.txt"
    with open(out, "w") as fh:
        fh.write(text)
    with open(os.path.splitext(out)[0] + ".json", "w") as fh:
        json.dump({name: r.to_json() for name, r in rows}, fh, indent=1, sort_keys=True)
    return out, {}, inputs


def cmd_stats(args, cfg: RunConfig):
    from .dataset import lesion_area_stats, load_manifest

    hist = lesion_area_stats(load_manifest(args.data), tuple(args.thresholds))
    lines = [f"lesions: {hist.total}"]
    edges = [0.0] + list(hist.thresholds) + [1.0]
    for k, c in enumerate(hist.counts):
        share = c / hist.total if hist.total else 0.0
        lines.append(f"[{100 * edges[k]:.3f}%, {100 * edges[k + 1]:.3f}%)  {c:6d}  {100 * share:5.1f}%  "
                     + "#" * int(round(40 * share)))
    for t, f in zip(hist.thresholds, hist.cumulative):
        lines.append(f"fraction below {100 * t:.2f}% of image area: {f:.4f}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    out = args.out or os.path.splitext(args.data)[0] + ".stats.txt"
    with open(out, "w") as fh:
        fh.write(text)
    return out, {}, {"data": args.data}


def cmd_render(args, cfg: RunConfig):
    from .dataset import load_manifest, read_image
    from .render import render_overlays
    from .slicing import load_detections

    manifest = load_manifest(args.data)
    dets = load_detections(args.dets)
    os.makedirs(args.out, exist_ok=True)
    ids = args.image_id or [im.id for im in manifest.images]
    for image_id in ids:
        render_overlays(read_image(manifest, image_id), dets.get(image_id, []),
                        os.path.join(args.out, f"{image_id:05d}.png"))
    print(f"rendered {len(ids)} overlays -> {args.out}")
    return args.out, {}, {"data": args.data, "dets": args.dets}


# parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="intrayolo", description="Small-lesion detection pipeline.")
    p.add_argument("--version", action="version", version=f"intrayolo {__version__}")
    p.add_argument("--config", help="INI run configuration (default: $INTRAYOLO_CONFIG)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value")
    p.add_argument("-v", "--verbose", action="store_true")
    # the same options are accepted after the subcommand name
    common = _Parser(add_help=False)
    common.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
    common.add_argument("--set", action="append", default=[], dest="sub_set", help=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", dest="sub_verbose", help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)
    _add = sub.add_parser
    sub.add_parser = lambda name, **kw: _add(name, parents=[common], **kw)

    s = sub.add_parser("synth", help="generate a synthetic dataset with train/val splits")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, dest="data__n_images")
    s.add_argument("--seed", type=int, dest="data__seed")

    s = sub.add_parser("train-teacher", help="train the teacher on patch crops")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, dest="teacher__steps")
    s.add_argument("--seed", type=int, dest="teacher__seed")

    s = sub.add_parser("pseudo-label", help="run the teacher to produce pseudo-labels")
    s.add_argument("--teacher", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--slice", action=argparse.BooleanOptionalAction, dest="distill__use_slicing")
    s.add_argument("--score-floor", type=float, dest="distill__score_floor")

    s = sub.add_parser("train-student", help="train the student with optional gated distillation")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pseudo")
    s.add_argument("--mode", choices=("none", "static", "ppo"), dest="distill__mode")
    s.add_argument("--phi", type=float, dest="distill__phi")
    s.add_argument("--steps", type=int, dest="student__steps")
    s.add_argument("--seed", type=int, dest="student__seed")

    s = sub.add_parser("infer", help="detect lesions, optionally with sliced inference")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--slice", action="store_true")
    s.add_argument("--tile", type=int, dest="slicer__tile")
    s.add_argument("--conf", type=float, dest="slicer__conf_thresh")

    s = sub.add_parser("eval", help="score detection files against a manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--dets", required=True, action="append", metavar="[NAME=]PATH")
    s.add_argument("--format", choices=("table1", "table2", "table3"), default="table2")
    s.add_argument("--name")
    s.add_argument("--out")

    s = sub.add_parser("stats", help="lesion area-ratio histogram")
    s.add_argument("--data", required=True)
    s.add_argument("--thresholds", type=float, nargs="+", default=[0.001, 0.0058, 0.02])
    s.add_argument("--out")

    s = sub.add_parser("render", help="draw detections over images")
    s.add_argument("--data", required=True)
    s.add_argument("--dets", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--image-id", type=int, action="append")
    return p


COMMANDS = {"synth": cmd_synth, "train-teacher": cmd_train_teacher, "pseudo-label": cmd_pseudo_label,
            "train-student": cmd_train_student, "infer": cmd_infer, "eval": cmd_eval,
            "stats": cmd_stats, "render": cmd_render}


def _apply_overrides(cfg: RunConfig, args) -> None:
    for item in args.set:
        name, sep, value = item.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(section.strip(), key.strip(), value.strip())
    for dest, value in vars(args).items():
        if "__" in dest and value is not None:
            section, key = dest.split("__", 1)
            cfg.set(section, key, value)
    cfg._validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:     # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    args.config = args.sub_config or args.config
    args.set = args.set + args.sub_set
    args.verbose = args.verbose or args.sub_verbose
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        out, seeds, inputs = COMMANDS[args.command](args, cfg)
        write_run_record(out, args.command, argv, cfg, seeds, inputs)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:      # runtime failure of a stage
        log.debug("stage failed", exc_info=True)
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
