"""Metrics, tone mapping, equivariance audits and report tables."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import fitting, geometry, hdr_io
from .field import SphericalField, decode_log_image

GAMMA = 2.2
LUMA = np.array([0.2126, 0.7152, 0.0722])


def tone_map(image, align_offset: float = 0.0, gamma: float = GAMMA) -> np.ndarray:
    """Scale by ``exp(align_offset)``, clamp to [0, 1], apply display gamma."""
    scaled = np.asarray(image, dtype=np.float64) * math.exp(align_offset)
    return np.clip(scaled, 0.0, 1.0) ** (1.0 / gamma)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def ssim(a, b) -> float:
    """SSIM of two LDR images in [0, 1] (11 x 11 Gaussian window, sigma 1.5) on luminance."""
    from skimage.metrics import structural_similarity

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a @ LUMA, b @ LUMA
    # images smaller than the 11 x 11 window keep the Gaussian filter but crop a smaller border
    win_size = min(11, 2 * ((min(a.shape) - 1) // 2) + 1)
    if win_size < 3:
        raise ValueError(f"SSIM needs images of at least 3 x 3 pixels, got {a.shape}")
    return float(structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                       win_size=win_size, use_sample_covariance=False))


def hdr_psnr(pred_log, gt_log, mask=None) -> float:
    """Log-space PSNR after the least-squares exposure alignment.

    The peak is the dynamic range (max - min) of the ground-truth log image.
    """
    pred_log = np.asarray(pred_log, dtype=np.float64)
    gt_log = np.asarray(gt_log, dtype=np.float64)
    b = fitting.optimal_scale(pred_log, gt_log, mask)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        pred_log, gt_log = pred_log[m], gt_log[m]
    peak = float(gt_log.max() - gt_log.min()) or 1.0
    return psnr(pred_log + b, gt_log, peak)


def ldr_exposure(gt_hdr) -> float:
    """Log offset that maps the median ground-truth luminance to 0.5."""
    lum = np.asarray(gt_hdr, dtype=np.float64) @ LUMA
    return math.log(0.5 / max(float(np.median(lum)), hdr_io.LOG_FLOOR))


def ldr_pair(pred_hdr, gt_hdr) -> tuple[np.ndarray, np.ndarray]:
    """Tone-mapped (prediction, ground truth) sharing one exposure after alignment."""
    offset = ldr_exposure(gt_hdr)
    b = fitting.optimal_scale(hdr_io.log_radiance(np.asarray(pred_hdr)), hdr_io.log_radiance(np.asarray(gt_hdr)))
    return tone_map(pred_hdr, offset + b), tone_map(gt_hdr, offset)


def score(pred_hdr, gt_hdr) -> dict[str, float]:
    pred_ldr, gt_ldr = ldr_pair(pred_hdr, gt_hdr)
    return {
        "psnr_ldr": psnr(pred_ldr, gt_ldr, 1.0),
        "psnr_hdr": hdr_psnr(hdr_io.log_radiance(np.asarray(pred_hdr)), hdr_io.log_radiance(np.asarray(gt_hdr))),
        "ssim": ssim(pred_ldr, gt_ldr),
    }


@dataclass
class MetricReport:
    names: list = field(default_factory=list)
    psnr_ldr: list = field(default_factory=list)
    psnr_hdr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    runtime: float = 0.0

    def add(self, name: str, scores: dict) -> None:
        self.names.append(name)
        self.psnr_ldr.append(scores["psnr_ldr"])
        self.psnr_hdr.append(scores["psnr_hdr"])
        self.ssim.append(scores["ssim"])

    def mean(self) -> dict[str, float]:
        return {k: float(np.mean(getattr(self, k))) for k in ("psnr_ldr", "psnr_hdr", "ssim")}

    def rows(self) -> list[dict]:
        rows = [{"image": n, "psnr_ldr": a, "psnr_hdr": b, "ssim": c}
                for n, a, b, c in zip(self.names, self.psnr_ldr, self.psnr_hdr, self.ssim)]
        return rows + [{"image": "mean", **self.mean()}]


# -- audits -------------------------------------------------------------------


def equivariance_audit(model: SphericalField, trials: int = 100, rng=0, directions_per_trial: int = 16) -> float:
    """Max |f(R d, R Z) - f(d, Z)| over random rotations, directions and codes.

    Rotations are about +y for the ``so2`` and ``none`` modes and arbitrary for
    ``so3``.  A ``none`` model has no symmetry, so it should score far above the
    others.
    """
    rng = np.random.default_rng(rng)
    dtype = next(model.parameters()).dtype
    worst = 0.0
    with torch.no_grad():
        for _ in range(trials):
            if model.config.mode == "so3":
                R = geometry.random_rotation(rng)
            else:
                R = geometry.rotation_y(rng.uniform(0.0, 2.0 * math.pi))
            d = geometry.sample_directions(directions_per_trial, rng)
            Z = rng.standard_normal((3, model.n_latent))
            base = model(torch.as_tensor(d, dtype=dtype), torch.as_tensor(Z, dtype=dtype))
            moved = model(torch.as_tensor(d @ R.T, dtype=dtype), torch.as_tensor(R @ Z, dtype=dtype))
            worst = max(worst, float((moved - base).abs().max()))
    return worst


TABLE_ANGLES = (5, 20, 45, 90, 180, 270)


def rotation_fit_experiment(model: SphericalField, images, angles=TABLE_ANGLES, config: fitting.FitConfig | None = None) -> list[dict]:
    """Fit codes to unrotated and azimuthally rotated copies and compare them.

    Each row holds the mean relative error E of the best rotation between the
    fitted codes and the mean discrepancy from the true rotation R_y(angle).
    """
    config = config or fitting.FitConfig()
    unrot = [fitting.fit_latent(model, img, config).Z.double().numpy() for img in images]
    rows = []
    for angle in angles:
        R = geometry.rotation_y(math.radians(angle))
        errors, truth = [], []
        for img, Z_u in zip(images, unrot):
            Z_r = fitting.fit_latent(model, hdr_io.rotate_environment(img, R), config).Z.double().numpy()
            errors.append(fitting.rotation_alignment(Z_u, Z_r).E)
            truth.append(fitting.ground_truth_discrepancy(R, Z_u, Z_r))
        rows.append({"angle_deg": angle, "E": float(np.mean(errors)), "gt_relative_error": float(np.mean(truth))})
    return rows


# -- output -------------------------------------------------------------------


def write_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def markdown_table(rows: list[dict], digits: int = 4) -> str:
    keys = list(rows[0].keys())
    cells = [[f"{r[k]:.{digits}f}" if isinstance(r[k], float) else str(r[k]) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    line = lambda vals: "| " + " | ".join(v.rjust(w) for v, w in zip(vals, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 1) + ":" for w in widths) + "|"
    return "\n".join([line(keys), sep] + [line(c) for c in cells]) + "\n"


def write_tables(rows: list[dict], out_dir, stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.md"
    write_csv(rows, csv_path)
    md_path.write_text(markdown_table(rows))
    return csv_path, md_path


def error_heatmap(pred_log, gt_log) -> np.ndarray:
    """RGB heat map of the per-pixel absolute log error, normalised to its maximum."""
    from matplotlib import colormaps

    err = np.abs(np.asarray(pred_log) - np.asarray(gt_log)).mean(axis=-1)
    scale = err.max() or 1.0
    return colormaps["inferno"](err / scale)[..., :3]


def save_triptych(pred_hdr, gt_hdr, path) -> None:
    """Ground truth | reconstruction | log-error heat map, side by side."""
    pred_ldr, gt_ldr = ldr_pair(pred_hdr, gt_hdr)
    b = fitting.optimal_scale(hdr_io.log_radiance(pred_hdr), hdr_io.log_radiance(gt_hdr))
    heat = error_heatmap(hdr_io.log_radiance(pred_hdr) + b, hdr_io.log_radiance(gt_hdr))
    hdr_io.save_png(np.concatenate([gt_ldr, pred_ldr, heat], axis=1), path)


def evaluate_fits(model: SphericalField, images, config: fitting.FitConfig | None = None, names=None) -> tuple[MetricReport, list]:
    """Fit every image, decode at its resolution and score it."""
    t0 = time.perf_counter()
    report = MetricReport(config=dict(vars(config or fitting.FitConfig())))
    decoded = []
    for i, img in enumerate(images):
        Z = fitting.fit_latent(model, img, config).Z
        pred = np.exp(decode_log_image(model, Z, img.height, img.width))
        decoded.append(pred)
        report.add(names[i] if names else str(i), score(pred, img.pixels))
    report.runtime = time.perf_counter() - t0
    return report, decoded
