"""Reference-based and feature-distribution image metrics.

PSNR and SSIM compare generated garments against ground truth per sample;
the Frechet and polynomial-kernel distances compare pooled feature
distributions from the frozen reference encoder.  The report schema
reserves slots for externally computed perceptual metrics (lpips, dists)
so third-party values can be merged without changing the format.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError

PSNR_CAP = 99.0
SSIM_WINDOW = 8  # uniform window at desk resolution (32x24 images)


def _check_image_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    for img in (a, b):
        if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
            raise ValidationError("pixel values outside [0, 1]")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) in dB for [0,1] images, capped at 99.0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_image_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM with a uniform window over positions and channels.

    Inputs are [C, H, W] in [0, 1]; symmetric in its arguments.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_image_pair(a, b)
    if a.ndim != 3:
        raise ShapeError(f"expected [C, H, W] image, got {a.shape}")
    if a.shape[1] < window or a.shape[2] < window:
        raise ConfigError(f"image {a.shape[1]}x{a.shape[2]} smaller than {window}-wide window")
    c1, c2 = k1 * k1, k2 * k2

    def local_means(x):
        win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(1, 2))
        return win.mean(axis=(-1, -2))

    mu_a, mu_b = local_means(a), local_means(b)
    mu_aa, mu_bb = local_means(a * a), local_means(b * b)
    mu_ab = local_means(a * b)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def frechet_from_features(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Gaussian Frechet distance between two feature samples.

    ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}); the matrix square
    root comes from a symmetric eigendecomposition with negative
    eigenvalues clipped at zero.  Covariances of undersampled sets are
    regularized with 1e-6 I (with a warning).
    """
    feat_a = np.asarray(feat_a, dtype=np.float64)
    feat_b = np.asarray(feat_b, dtype=np.float64)
    if feat_a.ndim != 2 or feat_b.ndim != 2 or feat_a.shape[1] != feat_b.shape[1]:
        raise ShapeError(f"feature sets incompatible: {feat_a.shape} vs {feat_b.shape}")
    d = feat_a.shape[1]
    mu_a, mu_b = feat_a.mean(axis=0), feat_b.mean(axis=0)
    cov_a = np.cov(feat_a, rowvar=False).reshape(d, d)
    cov_b = np.cov(feat_b, rowvar=False).reshape(d, d)
    if len(feat_a) <= d or len(feat_b) <= d:
        warnings.warn("feature set smaller than dimension + 1; covariance regularized")
        cov_a = cov_a + 1e-6 * np.eye(d)
        cov_b = cov_b + 1e-6 * np.eye(d)

    def sym_sqrt(m):
        evals, evecs = np.linalg.eigh((m + m.T) / 2.0)
        return (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T

    root_a = sym_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    evals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_mean = 2.0 * np.sum(np.sqrt(np.clip(evals, 0.0, None)))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - trace_mean)
    return max(0.0, value)


def kernel_distance_from_features(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Unbiased squared MMD with the polynomial kernel (x.y/d + 1)^3."""
    feat_a = np.asarray(feat_a, dtype=np.float64)
    feat_b = np.asarray(feat_b, dtype=np.float64)
    if feat_a.ndim != 2 or feat_b.ndim != 2 or feat_a.shape[1] != feat_b.shape[1]:
        raise ShapeError(f"feature sets incompatible: {feat_a.shape} vs {feat_b.shape}")
    m, n = len(feat_a), len(feat_b)
    if m < 2 or n < 2:
        raise ShapeError("kernel distance needs at least 2 samples per set")
    d = feat_a.shape[1]
    k_aa = (feat_a @ feat_a.T / d + 1.0) ** 3
    k_bb = (feat_b @ feat_b.T / d + 1.0) ** 3
    k_ab = (feat_a @ feat_b.T / d + 1.0) ** 3
    sum_aa = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    sum_bb = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(sum_aa + sum_bb - 2.0 * k_ab.mean())


def feature_frechet(set_a: np.ndarray, set_b: np.ndarray, enc) -> float:
    """Frechet distance over pooled features of the frozen encoder."""
    return frechet_from_features(enc.pooled(set_a), enc.pooled(set_b))


def feature_kernel_distance(set_a: np.ndarray, set_b: np.ndarray, enc) -> float:
    """Kernel distance over pooled features of the frozen encoder."""
    return kernel_distance_from_features(enc.pooled(set_a), enc.pooled(set_b))


@dataclass
class MetricsReport:
    """Per-sample values plus aggregates; lpips/dists slots stay external."""

    ids: list[str] = field(default_factory=list)
    psnr_values: list[float] = field(default_factory=list)
    ssim_values: list[float] = field(default_factory=list)
    frechet: float = float("nan")
    kernel: float = float("nan")
    lpips: float | None = None
    dists: float | None = None

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    def add(self, sample_id: str, psnr_db: float, ssim_val: float) -> None:
        self.ids.append(sample_id)
        self.psnr_values.append(psnr_db)
        self.ssim_values.append(ssim_val)

    def to_text(self) -> str:
        lines = [
            f"# ssim_window = {SSIM_WINDOW} (uniform)",
            f"count = {self.count}",
            f"mean_psnr = {self.mean_psnr!r}",
            f"mean_ssim = {self.mean_ssim!r}",
            f"frechet = {self.frechet!r}",
            f"kernel = {self.kernel!r}",
            f"lpips = {'n/a' if self.lpips is None else repr(self.lpips)}",
            f"dists = {'n/a' if self.dists is None else repr(self.dists)}",
        ]
        return "\n".join(lines) + "\n"

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.txt").write_text(self.to_text())
        with open(directory / "per_sample.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "psnr", "ssim"])
            for row in zip(self.ids, self.psnr_values, self.ssim_values):
                writer.writerow([row[0], repr(row[1]), repr(row[2])])


def evaluate_pairs(ids, generated: np.ndarray, reference: np.ndarray,
                   enc) -> MetricsReport:
    """Score aligned batches of generated and ground-truth images."""
    if generated.shape != reference.shape:
        raise ShapeError(f"batch shapes differ: {generated.shape} vs {reference.shape}")
    report = MetricsReport()
    for sid, gen, ref in zip(ids, generated, reference):
        report.add(str(sid), psnr(gen, ref), ssim(gen, ref))
    report.frechet = feature_frechet(generated, reference, enc)
    report.kernel = feature_kernel_distance(generated, reference, enc)
    return report
