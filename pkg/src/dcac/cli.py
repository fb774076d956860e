"""``dcac`` command line: analyze, split, train, evaluate, gradcheck, augment-preview.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command emits a RunManifest (JSON) to ``--run-manifest``, else to
``<out>/run_manifest.json`` when the command has an output directory, else
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from threadpoolctl import threadpool_limits

from . import __version__

logger = logging.getLogger("dcac")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _emit(args, payload: dict, text: Optional[str] = None):
    if args.format == "text" and text is not None:
        print(text)
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))


# ------------------------------------------------------------------ commands

def cmd_analyze(args, run: dict):
    from .backbone import analyze, load_config

    cfg = load_config(args.config)
    if args.config not in ("full", "tiny"):
        run["config_paths"].append(args.config)
    size = (cfg.input_size[0], *args.input_size) if args.input_size else None
    report = analyze(cfg, size)
    _emit(args, report.to_dict(per_layer=True), report.to_text())


def cmd_split(args, run: dict):
    from .datapipe import (check_patient_disjoint, dedup_report, load_manifest, patient_split,
                           read_duplicate_list, remove_duplicates, write_split)

    m = load_manifest(args.manifest)
    run["config_paths"].append(args.manifest)
    dedup = None
    if args.duplicates:
        run["config_paths"].append(args.duplicates)
        dups = read_duplicate_list(args.duplicates)
        dedup = {"before": m.counts(), **dedup_report(m, dups)}
        m = remove_duplicates(m, dups)
        dedup["after"] = m.counts()
    train, val = patient_split(m, args.val_frac, args.seed)
    if check_patient_disjoint(train, val):  # pragma: no cover - guarded by patient_split
        raise RuntimeError("split produced overlapping patients")
    summary = write_split(args.out, train, val, args.seed, args.val_frac)
    if dedup is not None:
        summary["dedup"] = dedup
        Path(args.out, "split_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    run["seeds"]["split"] = args.seed
    run["outputs"] += [str(Path(args.out, f)) for f in ("train.csv", "val.csv", "split_summary.json")]
    _emit(args, summary, "\n".join(f"{k}: {v}" for k, v in sorted(summary.items())))


def _load_train_config(spec: str):
    from .errors import ConfigError
    from .training import TRAIN_PRESETS, TrainConfig

    if spec in TRAIN_PRESETS:
        return TRAIN_PRESETS[spec]()
    if not Path(spec).is_file():
        raise ConfigError(f"{spec!r} is neither a preset {sorted(TRAIN_PRESETS)} nor a file",
                          field="config")
    return TrainConfig.from_json(spec)


def _image_root(data: Path) -> Path:
    return data / "images" if (data / "images").is_dir() else data


def cmd_train(args, run: dict):
    from .backbone import Network
    from .checkpoint import load_checkpoint
    from .datapipe import ImageSource, load_manifest
    from .errors import ConfigError
    from .training import TrainConfig, train_two_phase

    cfg = _load_train_config(args.config)
    run["config_paths"].append(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.pretrained:
        cfg.pretrained_checkpoint = args.pretrained
    data = Path(args.data)
    train = load_manifest(data / "train.csv")
    val = load_manifest(data / "val.csv") if (data / "val.csv").is_file() else None
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        saved = TrainConfig.from_dict(resume.meta["train_config"])
        if saved.to_dict() != cfg.to_dict():
            raise ConfigError("differs from the configuration stored in the resume checkpoint",
                              field="config")
    net = Network(cfg.network_config(), seed=cfg.seed)
    images = ImageSource(args.images or _image_root(data))
    run["seeds"]["train"] = cfg.seed
    ckpt, log = train_two_phase(net, train, val, cfg, images, out_dir=args.out, resume=resume)
    run["outputs"] += [str(Path(args.out, f)) for f in ("last.dcac", "final.dcac", "train_log.jsonl")]
    last = log.records[-1] if log.records else {}
    summary = {"epochs_run": len(log.records), "final": last, "checkpoint": str(Path(args.out, "final.dcac"))}
    _emit(args, summary, "\n".join(json.dumps(r, sort_keys=True) for r in log.records))


def cmd_evaluate(args, run: dict):
    from .checkpoint import load_checkpoint
    from .datapipe import ImageSource, load_manifest
    from .evaluation import evaluate
    from .training import network_from_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ckpt)
    size = args.image_size or ckpt.meta.get("train_config", {}).get("image_size") or net.config.input_size[1]
    manifest = load_manifest(args.manifest)
    run["config_paths"] += [args.checkpoint, args.manifest]
    report = evaluate(net, manifest, ImageSource(args.images), seed=args.seed, image_size=size)
    run["seeds"]["public_private"] = args.seed
    if args.out:
        run["outputs"] += list(report.write(args.out).values())
    d = report.to_dict()
    _emit(args, d, "\n".join(f"{k}: {v}" for k, v in d.items()))


def cmd_gradcheck(args, run: dict):
    from .gradcheck import layer_suite

    if args.preset != "tiny":
        raise UsageError("gradcheck only supports --preset tiny")
    reports = layer_suite(seed=args.seed, corrupt=args.corrupt)
    run["seeds"]["gradcheck"] = args.seed
    rows = [{"layer": label, "input": name, "max_rel_error": err, "status": status}
            for r in reports for label, name, err, status in r.rows()]
    ok = all(r.passed for r in reports)
    lines = [f"{'layer':<22} {'input':<28} {'max rel err':>12}  status"]
    lines += [f"{r['layer']:<22} {r['input']:<28} {r['max_rel_error']:>12.3e}  {r['status']}" for r in rows]
    lines.append(f"{'PASS' if ok else 'FAIL'}: {sum(r.passed for r in reports)}/{len(reports)} layers "
                 f"within {reports[0].tolerance:g}")
    _emit(args, {"passed": ok, "tolerance": reports[0].tolerance, "rows": rows}, "\n".join(lines))
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_augment_preview(args, run: dict):
    from .datapipe import AugmentConfig, augment, load_image, sample_rng, save_image

    cfg = AugmentConfig.identity(args.size) if args.identity else AugmentConfig(output_size=args.size)
    img = load_image(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(args.n):
        p = out / f"aug_{k:03d}.{args.ext}"
        save_image(p, augment(img, cfg, sample_rng(args.seed, k)))
        paths.append(str(p))
    run["seeds"]["augment"] = args.seed
    run["config_paths"].append(args.image)
    run["outputs"] += paths
    _emit(args, {"files": paths}, "\n".join(paths))


def cmd_make_toy(args, run: dict):
    from .datapipe import write_disk_dataset

    m = write_disk_dataset(args.out, n=args.n, size=args.size, seed=args.seed, ext="." + args.ext)
    run["seeds"]["synthetic"] = args.seed
    run["outputs"] += [str(Path(args.out, "train.csv")), str(Path(args.out, "images"))]
    _emit(args, m.counts(), f"wrote {len(m)} images to {args.out}")


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcac", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dcac {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP worker threads (default: $DCAC_THREADS)")
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.add_argument("--run-manifest", default=None, help="write the RunManifest JSON here")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="parameter / MAC footprint of a network config")
    a.add_argument("--config", default="full", help="preset name or NetworkConfig JSON path")
    a.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    a.set_defaults(func=cmd_analyze, out=None)

    s = sub.add_parser("split", help="deduplicate and split a manifest by patient")
    s.add_argument("--manifest", required=True)
    s.add_argument("--duplicates", default=None)
    s.add_argument("--val-frac", type=float, default=0.3)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("--config", required=True, help="train preset (full, toy) or TrainConfig JSON")
    t.add_argument("--data", required=True, help="dir with train.csv, optional val.csv, images/")
    t.add_argument("--out", required=True)
    t.add_argument("--images", default=None, help="image dir (default: <data>/images or <data>)")
    t.add_argument("--resume", default=None)
    t.add_argument("--pretrained", default=None)
    t.add_argument("--seed", type=int, default=None, help="override the config's seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="AUROC with the simulated public/private split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--images", required=True)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--image-size", type=int, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    g.add_argument("--preset", default="tiny")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", action="store_true", help="inject a wrong backward rule")
    g.set_defaults(func=cmd_gradcheck, out=None)

    v = sub.add_parser("augment-preview", help="write K augmented copies of one image")
    v.add_argument("--image", required=True)
    v.add_argument("--seed", type=int, required=True)
    v.add_argument("--n", type=int, default=8)
    v.add_argument("--out", required=True)
    v.add_argument("--size", type=int, default=160)
    v.add_argument("--ext", choices=("png", "ppm"), default="png")
    v.add_argument("--identity", action="store_true", help="disable every random transform")
    v.set_defaults(func=cmd_augment_preview)

    m = sub.add_parser("make-toy", help="write the synthetic bright/dark disk dataset")
    m.add_argument("--out", required=True)
    m.add_argument("--n", type=int, default=64)
    m.add_argument("--size", type=int, default=32)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--ext", choices=("png", "ppm"), default="png")
    m.set_defaults(func=cmd_make_toy)
    return p


def _threads(args) -> Optional[int]:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("DCAC_THREADS"):
        try:
            n = int(os.environ["DCAC_THREADS"])
        except ValueError:
            raise UsageError(f"DCAC_THREADS must be an integer, got {os.environ['DCAC_THREADS']!r}")
    else:
        return None
    if n < 1:
        raise UsageError("--threads must be at least 1")
    return n


def _write_run_manifest(args, run: dict):
    text = json.dumps(run, indent=2, sort_keys=True) + "\n"
    if getattr(args, "run_manifest", None):
        Path(args.run_manifest).write_text(text)
    elif getattr(args, "out", None) and Path(args.out).is_dir():
        Path(args.out, "run_manifest.json").write_text(text)
    else:
        sys.stderr.write(text)


def main(argv: Optional[List[str]] = None) -> int:
    from .errors import ConfigError, DcacError

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        threads = _threads(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    run = {"command": args.command, "argv": argv, "tool_version": __version__,
           "config_paths": [], "seeds": {}, "threads": threads, "outputs": [],
           "started": _now()}
    try:
        with threadpool_limits(limits=threads):
            code = args.func(args, run) or EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (DcacError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    run["finished"] = _now()
    run["exit_code"] = code
    _write_run_manifest(args, run)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
