"""End-to-end run plumbing shared by the CLI and the test harness.

Chains synthesize -> train -> attack -> evaluate over an experiment
config, with every artifact written under one workdir:

    workdir/
      manifest.jsonl       one JSON record per clip
      classes.json         class bank (names, bands, timbres)
      features/<id>.avfb   float32 log-mel features
      video/<id>.avfb      float32 surrogate video features
      config.ini           resolved config actually used
      model.ckpt           checkpoint + optimizer state
      loss_curve.csv
      delta.avfb/.json     universal perturbation + sidecar
      report_*.json        EvalReports
      sweep_*.csv          table-layout sweep results

Every artifact is a pure function of (config, seeds), so identical
configs reproduce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio as au
from . import attacks as atk
from . import metrics as mx
from . import models as M
from .config import ExperimentConfig, SweepPlan, serialize_config
from .container import (
    ClipRecord,
    atomic_write_bytes,
    read_feature_file,
    read_manifest,
    write_feature_file,
    write_manifest,
)
from .errors import ValidationError
from .optim import Adam

__all__ = [
    "ArrayDataset", "build_class_bank", "generate_dataset",
    "run_synth", "load_split", "run_train", "run_attack", "run_eval",
    "run_report", "build_sweep_plan", "run_sweep", "file_sha256",
]


@dataclass
class ArrayDataset:
    audio: np.ndarray          # (B,T,F) float32
    video: np.ndarray          # (B,H,N) float32
    labels: np.ndarray         # (B,C) float64 multi-hot
    ids: list
    class_names: list


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _derive(*parts):
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
               .generate_state(1, np.uint32)[0])


def build_class_bank(ds):
    timbres = tuple(t.strip() for t in ds.timbres.split(",") if t.strip())
    return au.default_class_bank(
        ds.classes, band_lo=ds.band_lo, band_width=ds.band_width,
        band_stride=ds.band_stride, timbres=timbres,
        sample_rate=ds.sample_rate)


def _clip_arrays(ds, bank, split, index):
    """Deterministically synthesize one clip's features, video, and labels."""
    seed = _derive(ds.seed, 0 if split == "train" else 1, index)
    rng = np.random.default_rng(_derive(seed, 17))
    n_labels = int(rng.integers(1, ds.max_labels + 1))
    class_set = sorted(rng.choice(ds.classes, size=n_labels, replace=False).tolist())
    wave, labels = au.synth_clip(
        class_set, bank, duration=ds.duration, seed=seed,
        events_range=(1, ds.events_max), dur_range=(ds.dur_lo, ds.dur_hi),
        amp_range=(ds.amp_lo, ds.amp_hi), amp_shape=ds.amp_shape,
        noise_floor=ds.noise_floor,
        hum_amp=ds.hum_amp, hum_seed=_derive(ds.seed, 31))
    feats = au.log_mel_spectrogram(wave, sample_rate=ds.sample_rate).astype(np.float32)
    video = au.make_video_surrogate(
        labels, ds.video_dim, ds.video_windows, ds.video_noise,
        seed=_derive(seed, 23), prototype_seed=_derive(ds.seed, 29)).astype(np.float32)
    return feats, video, labels, seed


def generate_dataset(ds, split):
    """Build one split fully in memory (no files)."""
    bank = build_class_bank(ds)
    count = ds.train_clips if split == "train" else ds.eval_clips
    feats_list, video_list, label_list, ids = [], [], [], []
    for i in range(count):
        feats, video, labels, _ = _clip_arrays(ds, bank, split, i)
        feats_list.append(feats)
        video_list.append(video)
        label_list.append(labels)
        ids.append(f"{split}_{i:05d}")
    return ArrayDataset(np.stack(feats_list), np.stack(video_list),
                        np.stack(label_list), ids, bank.names())


def run_synth(config, workdir):
    """Synthesize both splits to disk; returns the manifest path."""
    workdir = Path(workdir)
    (workdir / "features").mkdir(parents=True, exist_ok=True)
    (workdir / "video").mkdir(parents=True, exist_ok=True)
    ds = config.dataset
    bank = build_class_bank(ds)
    records = []
    for split, count in (("train", ds.train_clips), ("eval", ds.eval_clips)):
        for i in range(count):
            feats, video, labels, seed = _clip_arrays(ds, bank, split, i)
            clip_id = f"{split}_{i:05d}"
            write_feature_file(workdir / "features" / f"{clip_id}.avfb", feats)
            write_feature_file(workdir / "video" / f"{clip_id}.avfb", video)
            records.append(ClipRecord(
                id=clip_id, features=f"features/{clip_id}.avfb",
                video=f"video/{clip_id}.avfb",
                labels=[int(c) for c in np.flatnonzero(labels)],
                split=split, seed=seed))
    manifest_path = workdir / "manifest.jsonl"
    write_manifest(manifest_path, records)
    classes = [{"id": c.class_id, "name": c.name, "band": list(c.band),
                "timbre": c.timbre} for c in bank.classes]
    atomic_write_bytes(workdir / "classes.json",
                       (json.dumps({"classes": classes, "n_mels": bank.n_mels,
                                    "sample_rate": bank.sample_rate},
                                   sort_keys=True, indent=1) + "\n").encode())
    atomic_write_bytes(workdir / "config.ini", serialize_config(config).encode())
    return manifest_path


def load_split(workdir, split, n_classes):
    """Read one split of a synthesized dataset back into arrays."""
    workdir = Path(workdir)
    records = [r for r in read_manifest(workdir / "manifest.jsonl") if r.split == split]
    if not records:
        raise ValidationError(f"manifest has no {split!r} split")
    feats, video, labels = [], [], []
    for rec in records:
        feats.append(read_feature_file(workdir / rec.features))
        video.append(read_feature_file(workdir / rec.video))
        row = np.zeros(n_classes)
        row[rec.labels] = 1.0
        labels.append(row)
    names = _class_names(workdir, n_classes)
    return ArrayDataset(np.stack(feats), np.stack(video), np.stack(labels),
                        [r.id for r in records], names)


def _class_names(workdir, n_classes):
    path = Path(workdir) / "classes.json"
    if path.exists():
        obj = json.loads(path.read_text())
        return [c["name"] for c in obj["classes"]]
    return [f"class_{c:02d}" for c in range(n_classes)]


def build_model(config, n_mels, n_classes):
    m, t = config.model, config.train
    if m.arch == "resnet":
        cfg = M.ResnetConfig(
            stem_channels=m.stem_channels, blocks=m.resnet_blocks,
            pool_time=m.resnet_pool_time, pool_freq=m.resnet_pool_freq,
            classes=n_classes, n_mels=n_mels)
        return M.ResnetModel(cfg, seed=t.seed)
    cfg = M.CsnConfig(
        conv_channels=m.conv_channels, pool_time=m.pool_time, pool_freq=m.pool_freq,
        transformer_blocks=m.transformer_blocks, heads=m.heads, width=m.width,
        ff_mult=m.ff_mult, classes=n_classes, dropout=t.dropout,
        fusion=M.FusionStage(m.fusion), n_mels=n_mels,
        video_dim=config.dataset.video_dim, early_video_bins=m.early_video_bins)
    return M.CsnModel(cfg, seed=t.seed)


def _needs_video(config):
    return config.model.arch == "csn" and config.model.fusion != "audio_only"


def train_in_memory(config, train_data):
    """Build and train a model on an in-memory split; returns (model, result)."""
    t = config.train
    model = build_model(config, train_data.audio.shape[2], train_data.labels.shape[1])
    steps = t.epochs * max(1, math.ceil(train_data.audio.shape[0] / t.batch))
    video = train_data.video if _needs_video(config) else None
    result = M.train_model(model, train_data.audio, train_data.labels, video=video,
                           steps=steps, batch_size=t.batch, lr=t.lr, seed=t.seed)
    return model, result


def run_train(config, workdir, out=None):
    """Train from the workdir manifest; writes checkpoint + loss curve CSV."""
    workdir = Path(workdir)
    if not (workdir / "manifest.jsonl").exists():
        raise ValidationError(f"no manifest.jsonl under {workdir}; run synth first")
    train_data = load_split(workdir, "train", config.dataset.classes)
    t = config.train
    model = build_model(config, train_data.audio.shape[2], train_data.labels.shape[1])
    optimizer = Adam(model.params, lr=t.lr)
    steps = t.epochs * max(1, math.ceil(train_data.audio.shape[0] / t.batch))
    video = train_data.video if _needs_video(config) else None
    result = M.train_model(model, train_data.audio, train_data.labels, video=video,
                           steps=steps, batch_size=t.batch, lr=t.lr, seed=t.seed,
                           optimizer=optimizer)
    ckpt_path = Path(out) if out else workdir / "model.ckpt"
    M.save_checkpoint(ckpt_path, model, optimizer=optimizer, step=result.steps,
                      rng_state={"seed": t.seed, "step": result.steps})
    curve = "step,loss\n" + "".join(f"{s},{l!r}\n" for s, l in result.loss_curve)
    atomic_write_bytes(workdir / "loss_curve.csv", curve.encode())
    return ckpt_path


def attack_config_from(config):
    a = config.attack
    mask = None
    if a.freq_mask is not None or a.time_mask is not None:
        mask = atk.Mask(freq=a.freq_mask, time=a.time_mask)
    return atk.AttackConfig(norm=a.norm, epsilon=a.eps, alpha=a.alpha, steps=a.steps,
                            mask=mask, seed=a.seed, direction=a.direction,
                            random_start=a.random_start, batch_size=a.batch)


def run_attack(config, workdir, checkpoint, out=None):
    """Train a universal perturbation on the train split; writes delta files."""
    workdir = Path(workdir)
    model, _, _ = M.load_checkpoint(checkpoint)
    train_data = load_split(workdir, "train", config.dataset.classes)
    cfg = attack_config_from(config)
    if cfg.mask is not None:
        cfg.mask.validate(train_data.audio.shape[1:])
    video = train_data.video if _needs_video(config) else None
    pert = atk.train_universal_perturbation(
        model, train_data.audio, train_data.labels, cfg, video=video,
        provenance=file_sha256(workdir / "manifest.jsonl"))
    out_path = Path(out) if out else workdir / "delta.avfb"
    atk.save_perturbation(out_path, pert)
    return out_path


def run_eval(config, workdir, checkpoint, perturbation=None, out=None):
    """Evaluate the eval split, optionally under a saved perturbation."""
    workdir = Path(workdir)
    model, _, _ = M.load_checkpoint(checkpoint)
    eval_data = load_split(workdir, "eval", config.dataset.classes)
    pert = None
    pert_id = "clean"
    if perturbation is not None:
        pert = atk.load_perturbation(perturbation)
        if pert.delta.shape != eval_data.audio.shape[1:]:
            raise ValidationError(
                f"perturbation geometry {pert.delta.shape} does not match the "
                f"dataset's {eval_data.audio.shape[1:]}")
        pert_id = file_sha256(perturbation)
    meta = {"checkpoint": file_sha256(checkpoint), "perturbation": pert_id,
            "seed": config.train.seed}
    video = eval_data.video if _needs_video(config) else None
    report = mx.evaluate(model, eval_data.audio, eval_data.labels, video=video,
                         perturbation=pert, class_names=eval_data.class_names,
                         meta=meta)
    out_path = Path(out) if out else workdir / (
        "report_clean.json" if pert is None else "report_attacked.json")
    atomic_write_bytes(out_path, (report.to_json() + "\n").encode())
    return out_path


def run_report(clean_path, attacked_path, out):
    clean = mx.EvalReport.from_json(Path(clean_path).read_text())
    attacked = mx.EvalReport.from_json(Path(attacked_path).read_text())
    table = mx.compare_reports(clean, attacked)
    atomic_write_bytes(out, table.to_csv().encode())
    return Path(out)


# ---------------------------------------------------------------------------
# sweeps


def _mask_label(rng):
    return "No" if rng is None else f"{rng[0]}-{rng[1]}"


def build_sweep_plan(axis, config, masks=None, eps_list=None, fusions=None,
                     arches=None):
    """Expand one sweep axis into labeled config-override cells.

    freq/time axes cross the mask values with the eps list and include
    one clean row; the fusion/arch axes produce a clean and an attacked
    row per variant.
    """
    eps_values = list(eps_list) if eps_list else [config.attack.eps]
    cells = []
    if axis in ("freq", "time"):
        key = "freq_mask" if axis == "freq" else "time_mask"
        for mask in (masks if masks is not None else [None]):
            for eps in eps_values:
                label = {"mask": _mask_label(mask), "eps": eps}
                cells.append((label, {"attack": {key: mask, "eps": eps}}))
    elif axis == "eps":
        for eps in eps_values:
            cells.append(({"eps": eps}, {"attack": {"eps": eps}}))
    elif axis == "fusion":
        for fusion in (fusions or ["early", "mid1", "mid2", "late"]):
            for attacked in (False, True):
                cells.append(({"fusion": fusion, "attack": "yes" if attacked else "no"},
                              {"model": {"fusion": fusion},
                               "_attacked": attacked}))
    elif axis == "arch":
        for arch in (arches or ["csn", "resnet"]):
            for attacked in (False, True):
                cells.append(({"model": arch, "attack": "yes" if attacked else "no"},
                              {"model": {"arch": arch}, "_attacked": attacked}))
    return SweepPlan(axis=axis, cells=cells)


_SWEEP_HEADERS = {
    "freq": "freq_mask,eps,norm,alpha,map,auc,dprime",
    "time": "time_mask,eps,norm,alpha,map,auc,dprime",
    "eps": "eps,norm,alpha,map,auc,dprime",
    "fusion": "fusion,attack,map,auc,dprime",
    "arch": "model,attack,map,auc,dprime",
}


def _fmt_metric(v):
    return "inf" if v is None else f"{v:.6f}"


def _report_cells(report):
    return f"{report.map:.6f},{report.auc:.6f},{_fmt_metric(report.dprime)}"


def run_sweep(config, workdir, plan, out=None):
    """Run every cell, reusing checkpoints whenever the model is unchanged.

    Emits one CSV row per cell (plus one clean row for attack-axis
    sweeps).  A failing cell is logged to failures.log and skipped; the
    partial CSV is still written and the failure count returned.
    """
    workdir = Path(workdir)
    out_path = Path(out) if out else workdir / f"sweep_{plan.axis}.csv"
    lines = [_SWEEP_HEADERS[plan.axis]]
    failures = []
    checkpoints: dict[str, Path] = {}
    reports_cache: dict[str, mx.EvalReport] = {}

    def checkpoint_for(cell_config, tag):
        key = json.dumps({"model": cell_config.model.__dict__,
                          "train": cell_config.train.__dict__}, sort_keys=True,
                         default=str)
        if key not in checkpoints:
            path = workdir / f"model_{plan.axis}_{len(checkpoints)}.ckpt"
            run_train(cell_config, workdir, out=path)
            checkpoints[key] = path
        return checkpoints[key]

    def clean_report(cell_config, ckpt):
        key = str(ckpt)
        if key not in reports_cache:
            path = run_eval(cell_config, workdir, ckpt,
                            out=workdir / f"{Path(ckpt).stem}_clean.json")
            reports_cache[key] = mx.EvalReport.from_json(path.read_text())
        return reports_cache[key]

    if plan.axis in ("freq", "time", "eps") and plan.cells:
        try:
            ckpt = checkpoint_for(config, "shared")
            clean = clean_report(config, ckpt)
            prefix = {"freq": "No,-,-,-", "time": "No,-,-,-", "eps": "-,-,-"}[plan.axis]
            lines.append(f"{prefix},{_report_cells(clean)}")
        except Exception as exc:   # noqa: BLE001 - cell isolation is the contract
            failures.append(f"clean: {exc!r}")

    for label, overrides in plan.cells:
        try:
            overrides = dict(overrides)
            attacked = overrides.pop("_attacked", True)
            cell_config = config.with_overrides(**overrides)
            ckpt = checkpoint_for(cell_config, label)
            if attacked:
                tag = "_".join(str(v) for v in label.values()).replace(":", "-")
                delta_path = run_attack(cell_config, workdir, ckpt,
                                        out=workdir / f"delta_{plan.axis}_{tag}.avfb")
                report_path = run_eval(cell_config, workdir, ckpt,
                                       perturbation=delta_path,
                                       out=workdir / f"report_{plan.axis}_{tag}.json")
                report = mx.EvalReport.from_json(report_path.read_text())
            else:
                report = clean_report(cell_config, ckpt)
            a = cell_config.attack
            if plan.axis in ("freq", "time"):
                lines.append(f"{label['mask']},{label['eps']},{a.norm},{a.alpha},"
                             f"{_report_cells(report)}")
            elif plan.axis == "eps":
                lines.append(f"{label['eps']},{a.norm},{a.alpha},{_report_cells(report)}")
            elif plan.axis == "fusion":
                lines.append(f"{label['fusion']},{label['attack']},{_report_cells(report)}")
            else:
                lines.append(f"{label['model']},{label['attack']},{_report_cells(report)}")
        except Exception as exc:   # noqa: BLE001
            failures.append(f"{label}: {exc!r}")

    atomic_write_bytes(out_path, ("\n".join(lines) + "\n").encode())
    if failures:
        atomic_write_bytes(workdir / "failures.log",
                           ("\n".join(failures) + "\n").encode())
    return out_path, failures
