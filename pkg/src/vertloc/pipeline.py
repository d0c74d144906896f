"""End-to-end commands: labels, samples, training, prediction, evaluation."""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import PredictionResult, aggregate_centroids
from .config import ConfigError, PipelineConfig
from .dense import dense_labels
from .evaluate import build_report, plot_per_vertebra, score_scan
from .inference import detect_volume, fuse, identify_volume
from .sampler import (Patch, elastic_deform, load_patches, sample_detection_patches,
                      sample_identification_patches, save_patches)
from .synthetic import stub_nets
from .training import (device, load_checkpoint, save_checkpoint, train_detection, train_identification)
from .volume import Geometry, load_centroids, load_volume, resample_isotropic, save_volume

log = logging.getLogger(__name__)

EXIT_OK, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2
STAGES = ("labels", "detection", "identification", "deform", "split")


class PipelineError(RuntimeError):
    pass


def stage_seed(root: int, stage: str, name: str = "") -> int:
    """Per-stage, per-scan seed fanned out from the root seed, stable across platforms."""
    ss = np.random.SeedSequence([int(root), STAGES.index(stage), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def scan_name(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def find_scans(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.name.endswith((".nii.gz", ".nii")))


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _finite(x: float) -> float | None:
    return None if np.isnan(x) else x


def cmd_make_labels(cfg: PipelineConfig) -> int:
    """Resample every training scan and write its dense label map plus a manifest."""
    cfg.require_dirs("train_dir")
    out = Path(cfg.output_dir) / "labels"
    radii = cfg.radii_table()
    scans, failures = [], []
    for path in find_scans(cfg.train_dir):
        name = scan_name(path)
        try:
            raw = load_volume(path)
            vol = resample_isotropic(raw)
            annotation = path.with_name(name + ".csv")
            if not annotation.exists():
                raise PipelineError(f"missing annotation {annotation}")
            centroids, report = load_centroids(annotation, vol, cfg.coordinate_convention, raw.spacing)
            if len(centroids) == 0:
                raise PipelineError(f"empty annotation {annotation}")
            labels = dense_labels(centroids, radii, vol)
        except Exception as exc:
            log.error("%s skipped: %s", name, exc)
            failures.append({"scan": name, "error": str(exc)})
            continue
        save_volume(vol, out / f"{name}_image.nii.gz", {"source": str(path)})
        save_volume(labels, out / f"{name}_labels.nii.gz",
                    {"centroids": centroids.to_records(), "clamped": list(report.clamped),
                     "gaps": list(report.gaps)})
        scans.append(name)
        log.info("%s: %d vertebrae labelled", name, len(centroids))
    _write_json(out / "manifest.json", {"version": __version__, "radii": radii.to_dict(), "scans": scans,
                                        "failures": failures, "coordinate_convention": cfg.coordinate_convention})
    if not scans:
        log.error("no scans labelled")
        return EXIT_FATAL
    return EXIT_PARTIAL if failures else EXIT_OK


def _labelled_scans(cfg: PipelineConfig) -> list[str]:
    manifest = Path(cfg.output_dir) / "labels" / "manifest.json"
    if not manifest.exists():
        raise PipelineError(f"no label manifest at {manifest}; run make-labels first")
    return json.loads(manifest.read_text())["scans"]


def cmd_sample(cfg: PipelineConfig) -> int:
    """Generate detection and (deformed) identification patches for every labelled scan."""
    s = cfg.sampler
    labels_dir = Path(cfg.output_dir) / "labels"
    out = Path(cfg.output_dir) / "samples"
    det_records, id_records, failures = [], [], []
    for name in _labelled_scans(cfg):
        vol = load_volume(labels_dir / f"{name}_image.nii.gz")
        lab = load_volume(labels_dir / f"{name}_labels.nii.gz")
        det_seed = stage_seed(cfg.seed, "detection", name)
        id_seed = stage_seed(cfg.seed, "identification", name)
        try:
            det = sample_detection_patches(vol, lab, s.detection_samples, det_seed, s.detection_patch,
                                           s.positive_fraction, s.max_attempts)
            ids = sample_identification_patches(vol, lab, s.identification_samples, id_seed,
                                                s.identification_patch, s.label_slice, s.max_attempts)
        except Exception as exc:
            log.error("%s: sampling failed: %s", name, exc)
            failures.append(name)
            continue
        det_records += save_patches(det, out / "detection", name, {"scan": name, "seed": det_seed})
        deformed = []
        for i, p in enumerate(ids):
            seed = stage_seed(cfg.seed, "deform", f"{name}/{i}")
            deformed.append(elastic_deform(p, s.deform_sigma, seed, s.deform_points))
        records = save_patches(deformed, out / "identification", name, {"scan": name, "seed": id_seed})
        for i, r in enumerate(records):
            r["deform_seed"] = stage_seed(cfg.seed, "deform", f"{name}/{i}")
        id_records += records
    common = {"version": __version__, "root_seed": cfg.seed, "sampler": asdict(s)}
    _write_json(out / "detection" / "manifest.json", {**common, "patches": det_records})
    _write_json(out / "identification" / "manifest.json", {**common, "patches": id_records})
    if not det_records:
        return EXIT_FATAL
    return EXIT_PARTIAL if failures else EXIT_OK


def split_by_scan(patches_dir: Path, fraction: float, seed: int) -> tuple[list[Patch], list[Patch]]:
    manifest = json.loads((patches_dir / "manifest.json").read_text())["patches"]
    patches = load_patches(patches_dir)
    scans = sorted({r.get("scan", "") for r in manifest})
    n_val = int(round(fraction * len(scans))) if len(scans) > 1 else 0
    rng = np.random.default_rng(stage_seed(seed, "split"))
    val_scans = set(rng.choice(scans, size=n_val, replace=False).tolist()) if n_val else set()
    train = [p for p, r in zip(patches, manifest) if r.get("scan", "") not in val_scans]
    val = [p for p, r in zip(patches, manifest) if r.get("scan", "") in val_scans]
    return train, val


def cmd_train(cfg: PipelineConfig, which: str, resume: bool = False, samples_dir: str | Path | None = None) -> int:
    """Train one network on its persisted samples and write a checkpoint plus epoch log."""
    if which not in ("detection", "identification"):
        raise ConfigError(f"unknown model {which!r}")
    root = Path(cfg.output_dir)
    samples_dir = Path(samples_dir) if samples_dir else root / "samples" / which
    if not (samples_dir / "manifest.json").exists():
        raise PipelineError(f"no samples at {samples_dir}; run sample first")
    train, val = split_by_scan(samples_dir, cfg.validation_fraction, cfg.seed)
    if not train:
        raise PipelineError(f"no training patches in {samples_dir}")
    tcfg = getattr(cfg, which)
    ckpt_path = root / "checkpoints" / f"{which}.pt"
    net, start, opt_state = None, 0, None
    if resume and ckpt_path.exists():
        net, _, ckpt = load_checkpoint(ckpt_path)
        start, opt_state = ckpt["epoch"], ckpt["optimizer"]
        log.info("resuming %s from epoch %d", which, start)
    expected = cfg.sampler.detection_patch if which == "detection" else cfg.sampler.identification_patch
    fit = train_detection if which == "detection" else train_identification
    net, train_log, opt = fit(train, tcfg, net, start, opt_state, shape=expected)
    if val:
        train_log.epochs[-1]["validation"] = validation_metrics(net, val, which)
    save_checkpoint(ckpt_path, net, tcfg, which, start + tcfg.epochs, opt)
    train_log.write(root / "logs" / f"{which}_train.jsonl")
    return EXIT_OK


def validation_metrics(net, patches, which: str) -> dict:
    import torch

    from .nets import identification_loss
    from .training import dice

    images = torch.from_numpy(np.stack([p.image for p in patches]).astype(np.float32))
    labels = torch.from_numpy(np.stack([p.label for p in patches]).astype(np.int64))
    net.eval()
    with torch.no_grad():
        if which == "detection":
            out = net(images[:, None].to(device())).cpu()
            return {"dice": dice(out.argmax(1) == 1, labels == 1)}
        out = net(images.to(device())).cpu()
        return {"masked_l1": float(identification_loss(out[:, 0], labels.float()))}


def _load_nets(cfg: PipelineConfig, stub: bool):
    if stub:
        return stub_nets(cfg.sampler.hu_window)
    ckpts = Path(cfg.output_dir) / "checkpoints"
    nets = []
    for which in ("detection", "identification"):
        path = ckpts / f"{which}.pt"
        if not path.exists():
            raise FileNotFoundError(f"missing {which} checkpoint: {path}")
        net, _, _ = load_checkpoint(path)
        nets.append(net.to(device()))
    return tuple(nets)


def predict_scan(cfg: PipelineConfig, path: Path, nets, save_maps: bool = False) -> PredictionResult:
    det_net, id_net = nets
    t0 = time.perf_counter()
    vol = resample_isotropic(load_volume(path))
    t = cfg.tiling
    dev = device()
    detection = detect_volume(det_net, vol, t.patch, t.step, t.pad, batch_size=t.batch_size, device=dev)
    identification = identify_volume(id_net, vol, t.slab_multiple, device=dev,
                                     width=cfg.sampler.identification_patch[0])
    fused = fuse(detection, identification)
    result = aggregate_centroids(fused, cfg.radii_table())
    name = scan_name(path)
    result.meta.update({"scan": name, "geometry": vol.geometry.to_dict(), "version": __version__})
    out = Path(cfg.output_dir) / "predictions"
    result.save(out / f"{name}.json")
    if save_maps:
        save_volume(detection, out / "maps" / f"{name}_detection.nii.gz")
        save_volume(identification, out / "maps" / f"{name}_identification.nii.gz")
        save_volume(fused, out / "maps" / f"{name}_fused.nii.gz")
    log.info("%s: %d centroids accepted in %.1fs", name, len(result.centroids), time.perf_counter() - t0)
    return result


def cmd_predict(cfg: PipelineConfig, scan: str | Path | None = None, stub: bool = False,
                save_maps: bool = False) -> int:
    """Predict one scan (``scan``) or every scan in the test directory."""
    nets = _load_nets(cfg, stub)
    if scan is not None:
        predict_scan(cfg, Path(scan), nets, save_maps)
        return EXIT_OK
    cfg.require_dirs("test_dir")
    failures = 0
    scans = find_scans(cfg.test_dir)
    for path in scans:
        try:
            predict_scan(cfg, path, nets, save_maps)
        except Exception as exc:
            log.error("%s: prediction failed: %s", path.name, exc)
            failures += 1
    if failures == len(scans):
        return EXIT_FATAL
    if any(p.with_name(scan_name(p) + ".csv").exists() for p in scans):
        code = cmd_evaluate(cfg)
        return max(code, EXIT_PARTIAL if failures else EXIT_OK)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, plot: bool = True) -> int:
    """Score predictions against test annotations; write report JSON, table and plot."""
    cfg.require_dirs("test_dir")
    pred_dir = Path(cfg.output_dir) / "predictions"
    out = Path(cfg.output_dir) / "evaluation"
    truth_files = {p.stem: p for p in sorted(Path(cfg.test_dir).glob("*.csv"))}
    pred_files = {p.stem: p for p in sorted(pred_dir.glob("*.json"))} if pred_dir.is_dir() else {}
    common = sorted(set(truth_files) & set(pred_files))
    if not common:
        log.error("no scans with both predictions and ground truth")
        return EXIT_FATAL
    missing = sorted(set(truth_files) - set(pred_files))
    for name in missing:
        log.warning("%s: no prediction", name)
    scores = []
    for name in common:
        result = PredictionResult.load(pred_files[name])
        geometry = Geometry.from_dict(result.meta["geometry"])
        truth, _ = load_centroids(truth_files[name], geometry, cfg.coordinate_convention)
        scores.append(score_scan(result.centroids, truth, name))
    report = build_report(scores)
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.table())
    _write_json(out / "scans.json", [{"scan": s.name, "mean_error": _finite(s.mean_error), "id_rate": _finite(s.id_rate),
                                      "errors": {str(k): v for k, v in s.errors.items()}} for s in scores])
    print(report.table(), end="")
    if plot and report.per_vertebra:
        plot_per_vertebra(report, out / "per_vertebra.png")
    return EXIT_PARTIAL if missing else EXIT_OK


def cmd_plot(report_path: str | Path, path: str | Path) -> int:
    from .evaluate import RegionReport

    report = RegionReport.from_dict(json.loads(Path(report_path).read_text()))
    plot_per_vertebra(report, path)
    return EXIT_OK
