"""Command-line entry point: dataset scanning, training, synthesis, FID
evaluation, and report figures.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Progress goes to
stderr; machine-readable results go to files.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics, trainer
from .config import apply_overrides, config_from_dict
from .dataset import OTHER, PLANES, load_manifest, normalize_u8, scan_dataset
from .errors import ConfigError, UsgenError
from .imageops import IntensityCDF

ENV_SEED = "USGEN_SEED"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _progress(message: str) -> None:
    print(message, file=sys.stderr)


def _default_seed(explicit) -> int:
    if explicit is not None:
        return explicit
    env = os.environ.get(ENV_SEED)
    return int(env) if env else 0


def _load_image_dir(root) -> np.ndarray:
    """Load every non-grid PNG under a directory as a [-1, 1] batch."""
    from PIL import Image

    files = sorted(p for p in Path(root).rglob("*.png") if not p.stem.endswith("_grid"))
    if not files:
        raise UsgenError(f"no images found under {root}")
    images = []
    for path in files:
        with Image.open(path) as im:
            images.append(normalize_u8(np.asarray(im.convert("L"), dtype=np.uint8))[None, :, :])
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise UsgenError(f"images under {root} have mixed shapes: {sorted(shapes)}")
    return np.stack(images)


def _get_extractor(spec: str) -> metrics.FeatureExtractor:
    if spec == "tiny":
        return metrics.tiny_extractor()
    return metrics.load_extractor(spec)


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_scan(args) -> int:
    manifest = scan_dataset(args.root, args.plane)
    for path, reason in manifest.skipped:
        _progress(f"skipped {path}: {reason}")
    manifest.save(args.out)
    _progress(f"manifest written to {args.out}")
    print(f"count={manifest.count}")
    return 0


def _cmd_train(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        raw = apply_overrides(raw, args.override or [])
        if "seed" not in raw and os.environ.get(ENV_SEED):
            raw["seed"] = int(os.environ[ENV_SEED])
        cfg = config_from_dict(raw)
    except ConfigError as exc:  # bad config/override is a usage error, no work done
        raise _UsageError(f"usgen train: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise _UsageError(f"usgen train: {args.config} is not valid JSON: {exc}") from exc
    _progress(f"running {cfg.pipeline} pipeline into {args.out_dir}")
    artifacts = trainer.run(cfg, args.out_dir)
    _progress(f"traces: {artifacts.traces_csv}")
    _progress(f"fid: {artifacts.fid_csv}")
    _progress(f"checkpoints: {len(artifacts.checkpoints)}")
    return 0


def _cmd_synth(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    histmatch = args.histmatch
    if histmatch is None:
        histmatch = bool(ckpt.config.get("histmatch", False))
    reference = IntensityCDF.load(args.reference_cdf) if args.reference_cdf else None
    seed = _default_seed(args.seed)
    _progress(f"synthesizing {args.count} images from {args.checkpoint} (seed {seed})")
    _, files = trainer.synthesize(ckpt, args.count, seed, apply_histmatch=histmatch,
                                  reference_cdf=reference, out_dir=args.out_dir)
    _progress(f"wrote {len(files)} files under {args.out_dir}")
    return 0


def _cmd_fid(args) -> int:
    manifest = load_manifest(args.real)
    extractor = _get_extractor(args.extractor)
    fakes = _load_image_dir(args.fake)
    seed = _default_seed(args.seed)
    sample_count = args.sample_count or manifest.count
    report = metrics.fid(manifest, fakes, extractor, sample_count, seed,
                         epoch=args.epoch, model_tag=args.tag)
    trainer.append_fid_report(args.out, report)
    _progress(f"fid={report.fid:.6g} appended to {args.out}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    traces_path = run_dir / "traces.csv"
    if not traces_path.exists():
        raise UsgenError(f"{traces_path} not found; is {run_dir} a completed run?")
    rows = []
    header = None
    for line in traces_path.read_text(encoding="utf-8").splitlines():
        if header is None:
            header = line.split(",")
            continue
        if line:
            values = line.split(",")
            row = dict(zip(header, values))
            row["epoch"] = int(row["epoch"])
            rows.append(row)
    reports = trainer.read_fid_reports(run_dir / "fid.csv") if (run_dir / "fid.csv").exists() else []
    config = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    manifest = scan_dataset(config["data_root"], config["plane"])
    sample_dirs = sorted((run_dir / "samples").glob("epoch_*"))
    if not sample_dirs:
        raise UsgenError(f"no samples found under {run_dir}/samples")
    synth = _load_image_dir(sample_dirs[-1])
    from .dataset import load_batch
    real = load_batch(manifest, np.arange(min(32, manifest.count)), synth.shape[-1],
                      channels=1)
    out_dir = args.out_dir or (run_dir / "figures")
    paths = trainer.make_report(rows, reports, out_dir, real, synth, seed=config.get("seed", 0))
    for p in paths:
        _progress(f"figure: {p}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="usgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("scan", help="index a dataset directory into a manifest")
    p.add_argument("--root", required=True, help="directory of raster images")
    p.add_argument("--plane", choices=PLANES, default=OTHER)
    p.add_argument("--out", default="manifest.tsv", help="manifest output path")
    p.set_defaults(func=_cmd_scan)

    p = sub.add_parser("train", help="run a training pipeline from a config file")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="config override, repeatable (e.g. epochs=1 or dsr.timesteps=50)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("synth", help="synthesize images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--histmatch", action=argparse.BooleanOptionalAction, default=None,
                   help="apply histogram matching between diffusion and super-resolution")
    p.add_argument("--reference-cdf", default=None, help="reference CDF file for --histmatch")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fid", help="evaluate FID between a manifest and an image directory")
    p.add_argument("--real", required=True, help="manifest file of real images")
    p.add_argument("--fake", required=True, help="directory of synthesized images")
    p.add_argument("--extractor", default="tiny", help='"tiny" or a feature-extractor file')
    p.add_argument("--sample-count", type=int, default=0, help="real images to use (0 = all)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--tag", default="eval")
    p.add_argument("--out", default="fid.csv")
    p.set_defaults(func=_cmd_fid)

    p = sub.add_parser("report", help="emit report figures for a completed run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (UsgenError, OSError, ValueError) as exc:
        command = getattr(args, "command", "?")
        print(f"usgen {command}: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main(sys.argv[1:]))
