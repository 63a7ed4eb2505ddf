"""Full-reference evaluation on the luminance channel, plus feature-space proxies."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import linalg
from scipy.signal import convolve2d

from .nets.autoencoder import Encoder, images_to_tensor

PSNR_CAP = 100.0
Y_WEIGHTS = np.array([0.299, 0.587, 0.114])
REPORT_COLUMNS = ("id", "psnr_y", "ssim_y", "perceptual", "denoiser_evals")


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return img @ Y_WEIGHTS


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    ya, yb = rgb_to_y(a), rgb_to_y(b)
    if ya.shape != yb.shape:
        raise ValueError(f"shape mismatch: {ya.shape} vs {yb.shape}")
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(x: np.ndarray, y: np.ndarray, window: np.ndarray | None = None) -> np.ndarray:
    """Local SSIM over 'valid' window positions of two luminance planes."""
    w = gaussian_window() if window is None else window
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def filt(z):
        return convolve2d(z, w[::-1, ::-1], mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim_y(a: np.ndarray, b: np.ndarray) -> float:
    ya, yb = rgb_to_y(a), rgb_to_y(b)
    if ya.shape != yb.shape:
        raise ValueError(f"shape mismatch: {ya.shape} vs {yb.shape}")
    if min(ya.shape) < 11:
        raise ValueError("SSIM needs images of at least 11x11 pixels")
    return float(np.mean(ssim_map(ya, yb)))


# -- Fréchet feature distance ----------------------------------------------------

@torch.no_grad()
def pooled_features(images, featnet: Encoder, batch: int = 64) -> np.ndarray:
    """Per-channel mean and std of the frozen encoder's latent output."""
    feats = []
    for i in range(0, len(images), batch):
        x = images_to_tensor(images[i:i + batch], dtype=next(featnet.parameters()).dtype)
        z = featnet(x)
        feats.append(torch.cat([z.mean((2, 3)), z.std((2, 3))], dim=1).double().numpy())
    return np.concatenate(feats)


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    diff = mu1 - mu2
    covmean, _ = linalg.sqrtm(cov1 @ cov2, disp=False)
    if not np.isfinite(covmean).all():
        offset = np.eye(cov1.shape[0]) * 1e-6
        covmean = linalg.sqrtm((cov1 + offset) @ (cov2 + offset))
    covmean = np.real(covmean)
    return float(max(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(covmean), 0.0))


def frechet_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    d = fa.shape[1]
    if len(fa) < d + 1 or len(fb) < d + 1:
        raise ValueError(f"need at least {d + 1} samples per set for {d}-dim features")
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


def frechet_feature_distance(set_a, set_b, featnet: Encoder) -> float:
    return frechet_from_features(pooled_features(set_a, featnet), pooled_features(set_b, featnet))


# -- reports ---------------------------------------------------------------------

@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    ffd: float | None = None

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.rows]))

    def std(self, key: str) -> float:
        return float(np.std([r[key] for r in self.rows]))

    def aggregates(self) -> dict:
        out = {}
        for key in REPORT_COLUMNS[1:]:
            out[f"mean_{key}"] = self.mean(key)
            out[f"std_{key}"] = self.std(key)
        if self.ffd is not None:
            out["ffd"] = self.ffd
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
            for k, v in self.aggregates().items():
                fh.write(f"# {k}={v!r}\n")

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsReport":
        with open(path) as fh:
            lines = fh.read().splitlines()
        body = [ln for ln in lines if not ln.startswith("#")]
        rows = []
        for r in csv.DictReader(body):
            rows.append({"id": r["id"], "psnr_y": float(r["psnr_y"]), "ssim_y": float(r["ssim_y"]),
                         "perceptual": float(r["perceptual"]), "denoiser_evals": int(r["denoiser_evals"])})
        ffd = None
        for ln in lines:
            if ln.startswith("# ffd="):
                ffd = float(ln.split("=", 1)[1])
        return cls(rows=rows, ffd=ffd)


@torch.no_grad()
def evaluate(student, test_pairs, ae, with_ffd: bool = True, outputs: list | None = None) -> MetricsReport:
    """One student forward per image; the denoiser counter must advance by exactly one each time."""
    from .losses import perceptual_distance

    dtype = next(ae.parameters()).dtype
    report = MetricsReport()
    sr_images = []
    for i, (lq, hq) in enumerate(zip(test_pairs.lq, test_pairs.hq)):
        before = student.denoiser_evals
        x_hat = student.predict(images_to_tensor(lq, dtype))
        evals = student.denoiser_evals - before
        out = x_hat[0].double().numpy().transpose(1, 2, 0)
        sr_images.append(out)
        perc = float(perceptual_distance(x_hat, images_to_tensor(hq, dtype), ae.encoder))
        report.rows.append({"id": f"{i:06d}", "psnr_y": psnr_y(out, hq), "ssim_y": ssim_y(out, hq),
                            "perceptual": perc, "denoiser_evals": evals})
    if with_ffd and len(sr_images) > 2 * ae.latent_channels:
        report.ffd = frechet_feature_distance(sr_images, test_pairs.hq, ae.encoder)
    if outputs is not None:
        outputs.extend(sr_images)
    return report


@torch.no_grad()
def evaluate_baseline(test_pairs, ae, upscale: int = 4) -> MetricsReport:
    """Bilinear upsampling scored with the same protocol (denoiser_evals = 0)."""
    from .degradation import upsample_bilinear
    from .losses import perceptual_distance

    dtype = next(ae.parameters()).dtype
    report = MetricsReport()
    for i, (lq, hq) in enumerate(zip(test_pairs.lq, test_pairs.hq)):
        up = upsample_bilinear(lq, upscale)
        perc = float(perceptual_distance(images_to_tensor(up, dtype), images_to_tensor(hq, dtype), ae.encoder))
        report.rows.append({"id": f"{i:06d}", "psnr_y": psnr_y(up, hq), "ssim_y": ssim_y(up, hq),
                            "perceptual": perc, "denoiser_evals": 0})
    return report
