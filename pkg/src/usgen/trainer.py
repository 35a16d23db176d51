"""End-to-end orchestration: the diffusion -> histogram-match -> super-resolve
pipeline and the transformer-GAN pretrain/finetune pipeline, with seeded
checkpoints, periodic FID evaluation, sample grids, and report figures.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image

from . import diffusion, imageops, metrics, superres, tbgan
from .checkpoints import (ChecksumError, ConfigMismatchError, ModelCheckpoint,
                          UnsupportedVersionError, load_checkpoint, module_from_arrays,
                          save_checkpoint)
from .config import TrainConfig, config_to_dict
from .dataset import DatasetManifest, denormalize_u8, load_batch, scan_dataset
from .errors import UsgenError
from .imageops import IntensityCDF
from .seeding import derive_seed, np_rng, seeded_module

TRACE_COLUMNS = ("stage", "epoch", "mean_loss", "g_loss", "d_loss", "content_loss",
                 "r1", "apa_p", "lambda_r", "wall_time_s")
STAGE_HEADERS = {
    "diffusion": diffusion.DIFFUSION_TRACE_HEADER,
    "srgan": superres.SR_TRACE_HEADER,
    "tbgan": tbgan.TBGAN_TRACE_HEADER,
    "tbgan-pretrain": tbgan.TBGAN_TRACE_HEADER,
}
FID_EPOCH_NOTE = "# epoch counts training epochs of the stage named by model_tag"


class TrainerError(UsgenError):
    pass


class StageError(TrainerError):
    """A pipeline stage failed; artifacts produced so far are retained."""

    def __init__(self, stage, artifacts, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.artifacts = artifacts
        self.cause = cause


@dataclass
class RunArtifacts:
    out_dir: str
    config_path: str
    checkpoints: list
    traces_csv: str
    fid_csv: str
    sample_grids: list
    figures: list


# ---------------------------------------------------------------------------
# Image file helpers


def tile_grid(batch: np.ndarray, cols: int = None) -> np.ndarray:
    """Tile a batch into one uint8 image (grayscale or HxWx3)."""
    batch = np.asarray(batch)
    n, c, h, w = batch.shape
    cols = cols or int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    grid = np.zeros((c, rows * h, cols * w), dtype=np.uint8)
    levels = denormalize_u8(batch)
    for i in range(n):
        r, col = divmod(i, cols)
        grid[:, r * h:(r + 1) * h, col * w:(col + 1) * w] = levels[i]
    return grid[0] if c == 1 else grid.transpose(1, 2, 0)


def save_image_batch(batch: np.ndarray, out_dir, prefix: str) -> list:
    """Write each image as an 8-bit PNG plus one tiled grid; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    levels = denormalize_u8(np.asarray(batch))
    paths = []
    for i in range(levels.shape[0]):
        img = levels[i, 0] if levels.shape[1] == 1 else levels[i].transpose(1, 2, 0)
        path = out_dir / f"{prefix}_{i:03d}.png"
        Image.fromarray(img).save(path)
        paths.append(path)
    grid_path = out_dir / f"{prefix}_grid.png"
    Image.fromarray(tile_grid(batch)).save(grid_path)
    paths.append(grid_path)
    return paths


# ---------------------------------------------------------------------------
# Trace / FID persistence


def _format_value(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_traces(path, rows) -> Path:
    """Combined long-format trace table with a stage column."""
    path = Path(path)
    lines = [",".join(TRACE_COLUMNS)]
    for row in rows:
        lines.append(",".join(_format_value(row.get(col, "")) for col in TRACE_COLUMNS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_stage_trace(path, stage: str, rows) -> Path:
    """Per-stage trace in the stage's own CSV schema."""
    header = STAGE_HEADERS[stage]
    lines = [header]
    for row in rows:
        lines.append(",".join(_format_value(row.get(col, "")) for col in header.split(",")))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def append_fid_report(path, report: metrics.FIDReport) -> Path:
    path = Path(path)
    if not path.exists():
        path.write_text(FID_EPOCH_NOTE + "\n" + metrics.FID_CSV_HEADER + "\n", encoding="utf-8")
    with open(path, "a", encoding="utf-8") as f:
        f.write(report.csv_row() + "\n")
    return path


def read_fid_reports(path) -> list:
    reports = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("epoch,"):
            continue
        epoch, tag, n_real, n_fake, dim, checksum, value = line.split(",")
        reports.append(metrics.FIDReport(int(epoch), tag, int(n_real), int(n_fake),
                                         int(dim), checksum, float(value)))
    return reports


# ---------------------------------------------------------------------------
# Checkpoint reconstruction


def _echo_to_dataclass(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            value = data[f.name]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    return cls(**kwargs)


def _unet_from(ckpt: ModelCheckpoint, prefix: str = "model"):
    cfg = _echo_to_dataclass(diffusion.UNetConfig, ckpt.config["unet"])
    model = diffusion.NoisePredictor(cfg)
    module_from_arrays(model, ckpt.arrays, prefix)
    return model


def _srgen_from(ckpt: ModelCheckpoint, prefix: str = "generator"):
    cfg = _echo_to_dataclass(superres.SRConfig, ckpt.config["sr"])
    model = superres.SRGenerator(cfg)
    module_from_arrays(model, ckpt.arrays, prefix)
    return model


def _tbgen_from(ckpt: ModelCheckpoint, prefix: str = "generator"):
    cfg = _echo_to_dataclass(tbgan.GeneratorConfig, ckpt.config["generator"])
    model = tbgan.StyleGenerator(cfg)
    module_from_arrays(model, ckpt.arrays, prefix)
    return model


def synthesize(checkpoint: ModelCheckpoint, count: int, seed: int,
               apply_histmatch: bool = False, reference_cdf: IntensityCDF = None,
               out_dir=None):
    """Generate images from a sampling-capable checkpoint.

    dsr bundles run diffusion sampling, optional histogram matching, then
    super-resolution; tbgan checkpoints generate directly.  Returns the image
    batch and the list of files written (empty when out_dir is None).
    """
    if checkpoint.pipeline == "dsr":
        model = _unet_from(checkpoint, "diffusion/model")
        schedule = diffusion.schedule_from_beta(checkpoint.arrays["diffusion/schedule/beta"])
        low = diffusion.sample(model, schedule, count, model.cfg.image_size,
                               seed, model.cfg.channels).numpy()
        if apply_histmatch:
            cdf = reference_cdf
            if cdf is None and "histmatch/cdf" in checkpoint.arrays:
                cdf = IntensityCDF(checkpoint.arrays["histmatch/cdf"])
            if cdf is None:
                raise TrainerError("histogram matching requested but no reference CDF "
                                   "was given or embedded in the checkpoint")
            low = imageops.histogram_match(low, cdf)
        srg = _srgen_from(checkpoint, "sr/generator")
        batch = superres.sr_generate(srg, torch.from_numpy(low)).numpy()
    elif checkpoint.pipeline == "diffusion":
        model = _unet_from(checkpoint, "model")
        schedule = diffusion.schedule_from_beta(checkpoint.arrays["schedule/beta"])
        batch = diffusion.sample(model, schedule, count, model.cfg.image_size,
                                 seed, model.cfg.channels).numpy()
        if apply_histmatch:
            if reference_cdf is None:
                raise TrainerError("histogram matching requested but no reference CDF given")
            batch = imageops.histogram_match(batch, reference_cdf)
    elif checkpoint.pipeline == "tbgan":
        model = _tbgen_from(checkpoint, "generator")
        batch = tbgan.generate(model, None, seed, count).numpy()
    else:
        raise TrainerError(f"checkpoint pipeline {checkpoint.pipeline!r} does not support "
                           "direct synthesis")
    files = save_image_batch(batch, out_dir, "sample") if out_dir is not None else []
    return batch, files


# ---------------------------------------------------------------------------
# Report figures


def loss_figure(trace_rows):
    stages = sorted({row["stage"] for row in trace_rows})
    fig, axes = plt.subplots(1, len(stages), figsize=(5 * len(stages), 3.5), squeeze=False)
    for ax, stage in zip(axes[0], stages):
        rows = [r for r in trace_rows if r["stage"] == stage]
        epochs = [r["epoch"] for r in rows]
        for key in ("mean_loss", "g_loss", "d_loss", "content_loss"):
            values = [r.get(key) for r in rows]
            if any(v not in (None, "") for v in values):
                ax.plot(epochs, [float(v) for v in values], marker=".", label=key)
        ax.set_title(stage)
        ax.set_xlabel("epoch")
        if ax.get_lines():
            ax.legend()
    fig.suptitle("Training losses")
    fig.tight_layout()
    return fig


def fid_figure(reports):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    tags = sorted({r.model_tag for r in reports})
    for tag in tags:
        rows = sorted((r for r in reports if r.model_tag == tag), key=lambda r: r.epoch)
        ax.plot([r.epoch for r in rows], [r.fid for r in rows], marker="o", label=tag)
    ax.set_xlabel("epoch")
    ax.set_ylabel("FID")
    ax.set_title("FID scores")
    if tags:
        ax.legend()
    fig.tight_layout()
    return fig


def sample_grid_figure(real_images: np.ndarray, synth_images: np.ndarray, seed: int = 0,
                       per_batch: int = 8):
    """Two randomized real batches and two synthesized batches, side by side."""
    rng = np_rng(seed)
    panels = []
    for name, pool in (("real", np.asarray(real_images)), ("synthesized", np.asarray(synth_images))):
        for b in (1, 2):
            take = min(per_batch, pool.shape[0])
            idx = rng.choice(pool.shape[0], size=take, replace=False)
            panels.append((f"{name} B{b}", tile_grid(pool[idx], cols=max(1, take // 2))))
    fig, axes = plt.subplots(2, 2, figsize=(8, 8))
    for ax, (title, grid) in zip(axes.ravel(), panels):
        ax.imshow(grid, cmap="gray", vmin=0, vmax=255)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    return fig


def make_report(trace_rows, fid_reports, out_dir, real_images, synth_images, seed: int = 0) -> list:
    """Emit the three report figures: losses, FID curve, sample grids."""
    if not trace_rows:
        raise TrainerError("make_report needs at least one trace row")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, fig in (("losses.png", loss_figure(trace_rows)),
                      ("fid.png", fid_figure(fid_reports)),
                      ("samples.png", sample_grid_figure(real_images, synth_images, seed))):
        path = out_dir / name
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Full runs


class _Reporter:
    """Collects traces, FID rows, and sample files for one run."""

    def __init__(self, cfg: TrainConfig, out_dir: Path, manifest: DatasetManifest):
        self.cfg = cfg
        self.out = out_dir
        self.manifest = manifest
        self.extractor = metrics.tiny_extractor()
        self.trace_rows = []
        self.reports = []
        self.sample_grids = []
        self.fid_csv = out_dir / "fid.csv"

    def add_trace(self, stage: str, rows) -> None:
        for row in rows:
            merged = dict(row)
            merged["stage"] = stage
            self.trace_rows.append(merged)
        write_stage_trace(self.out / f"traces_{stage.replace('-', '_')}.csv", stage, rows)
        write_traces(self.out / "traces.csv", self.trace_rows)

    def evaluate(self, model_tag: str, epoch: int, images: np.ndarray) -> metrics.FIDReport:
        real_count = self.cfg.eval_real_count or self.manifest.count
        report = metrics.fid(self.manifest, images, self.extractor, real_count,
                             derive_seed(self.cfg.seed, "fid-real-subset"),
                             epoch=epoch, model_tag=model_tag)
        self.reports.append(report)
        append_fid_report(self.fid_csv, report)
        files = save_image_batch(images[:min(16, images.shape[0])],
                                 self.out / "samples" / f"epoch_{epoch}", model_tag)
        self.sample_grids.append(files[-1])
        return report


def _eval_due(done: int, total: int, every: int) -> bool:
    return done % every == 0 or done == total


def _run_dsr(cfg: TrainConfig, out: Path, reporter: _Reporter, ckpt_dir: Path) -> ModelCheckpoint:
    sub = cfg.dsr
    manifest = reporter.manifest
    schedule = diffusion.build_schedule(sub.timesteps, sub.beta_start, sub.beta_end)
    unet = seeded_module(
        lambda: diffusion.NoisePredictor(
            diffusion.unet_config(sub.unet_preset, sub.base_size, cfg.channels)),
        derive_seed(cfg.seed, "unet-init"))

    def diff_eval(done, model, row):
        if _eval_due(done, cfg.epochs, cfg.eval_every):
            images = diffusion.sample(model, schedule, cfg.eval_fake_count, sub.base_size,
                                      derive_seed(cfg.seed, "eval-diffusion", done),
                                      cfg.channels).numpy()
            reporter.evaluate("diffusion", done, images)

    diff_ckpt, diff_trace = diffusion.finetune(
        unet, manifest, schedule, cfg, checkpoint_dir=ckpt_dir, on_epoch=diff_eval)
    reporter.add_trace("diffusion", diff_trace)

    reference = imageops.build_reference_pool(
        manifest, sub.reference_count or manifest.count, derive_seed(cfg.seed, "refpool"))
    reference.save(out / "reference_cdf.tsv")

    sr_arch = superres.SRConfig(channels=cfg.channels, width=sub.sr_width, blocks=sub.sr_blocks)
    g = seeded_module(lambda: superres.SRGenerator(sr_arch), derive_seed(cfg.seed, "sr-g-init"))
    d = seeded_module(lambda: superres.SRDiscriminator(sr_arch), derive_seed(cfg.seed, "sr-d-init"))

    eval_low = diffusion.sample(unet, schedule, cfg.eval_fake_count, sub.base_size,
                                derive_seed(cfg.seed, "eval-low"), cfg.channels).numpy()
    if sub.histmatch:
        eval_low = imageops.histogram_match(eval_low, reference)
    eval_low_t = torch.from_numpy(eval_low)

    def sr_eval(done, g_model, row):
        if _eval_due(done, sub.sr_epochs, cfg.eval_every):
            highs = superres.sr_generate(g_model, eval_low_t).numpy()
            reporter.evaluate("srgan", done, highs)

    sr_ckpt, sr_trace = superres.train_srgan(
        g, d, manifest, cfg, checkpoint_dir=ckpt_dir, on_epoch=sr_eval)
    reporter.add_trace("srgan", sr_trace)

    arrays = {f"diffusion/{k}": v for k, v in diff_ckpt.arrays.items()}
    arrays.update({f"sr/{k}": v for k, v in sr_ckpt.arrays.items()})
    arrays["histmatch/cdf"] = reference.cdf.copy()
    bundle = ModelCheckpoint(
        pipeline="dsr",
        config={"unet": diff_ckpt.config["unet"], "sr": sr_ckpt.config["sr"],
                "base_size": sub.base_size, "high_size": sub.high_size,
                "histmatch": sub.histmatch},
        arrays=arrays,
        epoch=cfg.epochs,
        rng_state=diff_ckpt.rng_state,
        meta={"diffusion": diff_ckpt.meta, "sr": sr_ckpt.meta},
    )
    save_checkpoint(bundle, ckpt_dir / "dsr_final.ckpt")
    return bundle


def _run_tbgan(cfg: TrainConfig, out: Path, reporter: _Reporter, ckpt_dir: Path) -> ModelCheckpoint:
    sub = cfg.tbgan
    g = seeded_module(
        lambda: tbgan.StyleGenerator(tbgan.generator_config(sub.preset, sub.resolution, cfg.channels)),
        derive_seed(cfg.seed, "tb-g-init"))
    d = seeded_module(
        lambda: tbgan.ConvDiscriminator(
            tbgan.discriminator_config(sub.preset, sub.resolution, cfg.channels)),
        derive_seed(cfg.seed, "tb-d-init"))

    def eval_cb(tag, total):
        def cb(done, model, row):
            if _eval_due(done, total, cfg.eval_every):
                images = tbgan.generate(model, None, derive_seed(cfg.seed, "eval", tag, done),
                                        cfg.eval_fake_count).numpy()
                reporter.evaluate(tag, done, images)
        return cb

    if sub.pretrain_epochs > 0 and sub.pretrain_root:
        pre_manifest = scan_dataset(sub.pretrain_root, sub.pretrain_plane)
        pre_cfg = dataclasses.replace(cfg, epochs=sub.pretrain_epochs,
                                      epoch_unit=sub.pretrain_unit)
        _, pre_trace = tbgan.train_tbgan(
            g, d, pre_manifest, pre_cfg, checkpoint_dir=ckpt_dir,
            on_epoch=eval_cb("tbgan-pretrain", sub.pretrain_epochs),
            stage_tag="tbgan_pretrain")
        reporter.add_trace("tbgan-pretrain", pre_trace)

    ckpt, trace = tbgan.train_tbgan(
        g, d, reporter.manifest, cfg, checkpoint_dir=ckpt_dir,
        on_epoch=eval_cb("tbgan", cfg.epochs), stage_tag="tbgan")
    reporter.add_trace("tbgan", trace)
    save_checkpoint(ckpt, ckpt_dir / "tbgan_final.ckpt")
    return ckpt


def run(cfg: TrainConfig, out_dir) -> RunArtifacts:
    """Execute the configured pipeline; see the package README for the layout
    of artifacts written under out_dir."""
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    config_path = out / "config.json"
    config_path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    stage = "scan"
    try:
        manifest = scan_dataset(cfg.data_root, cfg.plane)
        reporter = _Reporter(cfg, out, manifest)
        stage = cfg.pipeline
        if cfg.pipeline == "dsr":
            bundle = _run_dsr(cfg, out, reporter, ckpt_dir)
            final_tag = "dsr"
            histmatch = cfg.dsr.histmatch
        else:
            bundle = _run_tbgan(cfg, out, reporter, ckpt_dir)
            final_tag = "tbgan"
            histmatch = False
        stage = "final-eval"
        final_epoch = cfg.epochs
        images, _ = synthesize(bundle, cfg.eval_fake_count,
                               derive_seed(cfg.seed, "final-synth"),
                               apply_histmatch=histmatch)
        reporter.evaluate(final_tag, final_epoch, images)
        if not reporter.trace_rows:
            write_traces(out / "traces.csv", [])
        stage = "report"
        real_count = min(32, manifest.count)
        real_images = load_batch(manifest, np.arange(real_count), images.shape[-1],
                                 cfg.channels)
        figures = make_report(reporter.trace_rows or
                              [{"stage": cfg.pipeline, "epoch": 0, "wall_time_s": 0.0}],
                              reporter.reports, out / "figures", real_images, images,
                              seed=cfg.seed)
    except Exception as exc:
        produced = sorted(str(p) for p in out.rglob("*") if p.is_file())
        (out / "error.txt").write_text(
            f"stage: {stage}\nerror: {exc}\nartifacts:\n" +
            "".join(f"  {p}\n" for p in produced), encoding="utf-8")
        raise StageError(stage, produced, exc) from exc
    return RunArtifacts(
        out_dir=str(out),
        config_path=str(config_path),
        checkpoints=sorted(str(p) for p in ckpt_dir.glob("*.ckpt")),
        traces_csv=str(out / "traces.csv"),
        fid_csv=str(reporter.fid_csv),
        sample_grids=[str(p) for p in reporter.sample_grids],
        figures=[str(p) for p in figures],
    )
