"""Procedural HQ images and a simplified single-round Real-ESRGAN-style degradation.

Images are ``(H, W, 3)`` float arrays in [0, 1]. Every random draw comes from
a numpy ``Generator`` seeded with ``(seed, image_index)`` so that generation is
order-independent and can be parallelised across images.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import fft as sfft
from scipy.ndimage import gaussian_filter

NUM_CLASSES = 4
CLASS_NAMES = ("disks", "boxes", "triangles", "stripes")


@dataclass
class DegradationRecipe:
    blur_sigma_range: tuple[float, float] = (0.8, 1.6)
    downscale_factor: int = 4
    noise_sigma_range: tuple[float, float] = (0.02, 0.06)
    compression_block: int = 8
    compression_keep: float = 0.5
    order_seed: int = 0

    def __post_init__(self):
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        self.noise_sigma_range = tuple(float(v) for v in self.noise_sigma_range)
        for name in ("blur_sigma_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.noise_sigma_range[1] > 1:
            raise ValueError("noise sigma is in [0, 1] image units")
        if self.downscale_factor < 1:
            raise ValueError("downscale_factor must be >= 1")
        if not 0 < self.compression_keep <= 1:
            raise ValueError("compression_keep must lie in (0, 1]")
        if self.compression_block < 1:
            raise ValueError("compression_block must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRecipe":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blur_sigma_range"] = list(self.blur_sigma_range)
        d["noise_sigma_range"] = list(self.noise_sigma_range)
        return d


IDENTITY_RECIPE = DegradationRecipe((0.0, 0.0), 1, (0.0, 0.0), 8, 1.0)


# --------------------------------------------------------------------------
# procedural HQ images
# --------------------------------------------------------------------------

def _smoothstep_mask(signed_dist: np.ndarray, width: float = 0.5) -> np.ndarray:
    # soft edges keep the shapes representable by a small autoencoder
    return 1.0 / (1.0 + np.exp(np.clip(signed_dist / width, -50, 50)))


def _band_texture(rng: np.random.Generator, size: int, f_lo: float, f_hi: float) -> np.ndarray:
    white = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2)
    band = (radius >= f_lo) & (radius <= f_hi)
    tex = np.real(np.fft.ifft2(np.fft.fft2(white) * band))
    return tex / (tex.std() + 1e-12)


def _draw_one(rng: np.random.Generator, size: int) -> tuple[np.ndarray, int]:
    label = int(rng.integers(NUM_CLASSES))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    # background: random linear colour gradient
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]

    n_shapes = int(rng.integers(4, 8))
    for _ in range(n_shapes):
        colour = rng.uniform(0.0, 1.0, 3)
        cx, cy = rng.uniform(0.1, 0.9, 2) * size
        r = rng.uniform(0.07, 0.18) * size
        if label == 0:
            sd = np.hypot(xx - cx, yy - cy) - r
        elif label == 1:
            sd = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - r
        elif label == 2:
            # equilateral triangle signed distance (approximate: max over edges)
            theta = rng.uniform(0, 2 * np.pi)
            sd = np.full_like(xx, -np.inf)
            for k in range(3):
                a = theta + 2 * np.pi * k / 3
                sd = np.maximum(sd, np.cos(a) * (xx - cx) + np.sin(a) * (yy - cy) - 0.5 * r)
        else:
            period = rng.uniform(8, 14)
            a = rng.uniform(0, np.pi)
            phase = np.cos(a) * xx + np.sin(a) * yy
            stripes = np.sin(2 * np.pi * phase / period) * period / (2 * np.pi)
            sd = np.maximum(stripes, np.hypot(xx - cx, yy - cy) - 1.4 * r)
        m = _smoothstep_mask(sd)[..., None]
        img = img * (1 - m) + colour * m

    tex = _band_texture(rng, size, 0.08, 0.25)
    amp = rng.uniform(0.01, 0.025)
    img = img + amp * tex[..., None] * rng.uniform(0.6, 1.0, 3)
    return np.clip(img, 0.0, 1.0), label


def synth_hq_labeled(n: int, size: int = 64, seed: int = 0, multiple_of: int = 4) -> tuple[list[np.ndarray], list[int]]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < multiple_of or size % multiple_of:
        raise ValueError(f"size {size} must be a positive multiple of {multiple_of}")
    images, labels = [], []
    for i in range(n):
        img, lab = _draw_one(np.random.default_rng([seed, i]), size)
        images.append(img)
        labels.append(lab)
    return images, labels


def synth_hq(n: int, size: int = 64, seed: int = 0, multiple_of: int = 4) -> list[np.ndarray]:
    return synth_hq_labeled(n, size, seed, multiple_of)[0]


def high_frequency_energy(img: np.ndarray, cutoff: float = 0.125) -> float:
    """Mean spectral power above ``cutoff`` cycles/pixel (Nyquist/4 by default)."""
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    gray = gray - gray.mean()
    # hann taper so the periodic wrap of a ramp does not masquerade as detail
    win = np.outer(np.hanning(gray.shape[0]), np.hanning(gray.shape[1]))
    power = np.abs(np.fft.fft2(gray * win)) ** 2 / gray.size
    fy = np.fft.fftfreq(gray.shape[0])[:, None]
    fx = np.fft.fftfreq(gray.shape[1])[None, :]
    mask = np.sqrt(fx ** 2 + fy ** 2) > cutoff
    return float(power[mask].mean())


def detail_score(images: list[np.ndarray]) -> float:
    """Ratio of high-frequency energy of ``images`` to a pure-gradient image."""
    size = images[0].shape[0]
    yy, xx = np.mgrid[0:size, 0:size] / size
    gradient = np.repeat(((xx + yy) / 2)[..., None], 3, axis=-1)
    ref = high_frequency_energy(gradient)
    return float(np.mean([high_frequency_energy(im) for im in images]) / ref)


# --------------------------------------------------------------------------
# degradation
# --------------------------------------------------------------------------

def resize(img: np.ndarray, height: int, width: int, mode: str = "bicubic") -> np.ndarray:
    """Resize an (H, W, 3) image; bicubic downsampling is antialiased."""
    if img.shape[:2] == (height, width):
        return img.copy()
    x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].double()
    kw = {"align_corners": False}
    if mode == "bicubic":
        kw["antialias"] = height < img.shape[0]
    y = F.interpolate(x, size=(height, width), mode=mode, **kw)
    return y[0].numpy().transpose(1, 2, 0)


def upsample_bilinear(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    return np.clip(resize(img, h * factor, w * factor, mode="bilinear"), 0.0, 1.0)


def compress_blocks(img: np.ndarray, block: int, keep: float) -> np.ndarray:
    """Blockwise orthonormal DCT, keeping the lowest-frequency ``keep`` fraction."""
    if keep >= 1.0:
        return img
    h, w, c = img.shape
    ph, pw = -h % block, -w % block
    x = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect") if (ph or pw) else img
    H, W = x.shape[:2]
    tiles = x.reshape(H // block, block, W // block, block, c).transpose(0, 2, 4, 1, 3)
    coef = sfft.dctn(tiles, axes=(-2, -1), norm="ortho")
    u, v = np.mgrid[0:block, 0:block]
    order = np.lexsort((u.ravel(), (u + v).ravel()))  # zig-zag-ish by frequency sum
    n_keep = max(1, int(round(keep * block * block)))
    mask = np.zeros(block * block, dtype=bool)
    mask[order[:n_keep]] = True
    coef = coef * mask.reshape(block, block)
    tiles = sfft.idctn(coef, axes=(-2, -1), norm="ortho")
    out = tiles.transpose(0, 3, 1, 4, 2).reshape(H, W, c)
    return out[:h, :w]


def degrade(hq: np.ndarray, recipe: DegradationRecipe, rng: np.random.Generator) -> np.ndarray:
    """blur -> bicubic downsample -> gaussian noise -> block compression -> clamp."""
    f = recipe.downscale_factor
    h, w = hq.shape[:2]
    if h % f or w % f:
        raise ValueError(f"image {h}x{w} not divisible by downscale factor {f}")
    x = np.asarray(hq, dtype=np.float64)

    blur = rng.uniform(*recipe.blur_sigma_range)
    if blur > 0:
        x = gaussian_filter(x, sigma=(blur, blur, 0), mode="reflect", truncate=3.0)
    x = np.clip(x, 0.0, 1.0)

    x = np.clip(resize(x, h // f, w // f, mode="bicubic"), 0.0, 1.0)

    noise_sigma = rng.uniform(*recipe.noise_sigma_range)
    noise = rng.standard_normal(x.shape)
    if noise_sigma > 0:
        x = np.clip(x + noise_sigma * noise, 0.0, 1.0)

    x = compress_blocks(x, recipe.compression_block, recipe.compression_keep)
    return np.clip(x, 0.0, 1.0)


@dataclass
class PairedDataset:
    lq: list[np.ndarray]
    hq: list[np.ndarray]
    labels: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.hq)


def make_pairs(hq_set: list[np.ndarray], recipe: DegradationRecipe, seed: int,
               labels: list[int] | None = None) -> PairedDataset:
    lq = [degrade(hq, recipe, np.random.default_rng([seed, recipe.order_seed, i]))
          for i, hq in enumerate(hq_set)]
    return PairedDataset(lq=lq, hq=list(hq_set), labels=list(labels) if labels is not None else [0] * len(hq_set))


# --------------------------------------------------------------------------
# on-disk datasets
# --------------------------------------------------------------------------

def save_png(img: np.ndarray, path: str | Path) -> None:
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_dataset(out: str | Path, n: int, size: int, seed: int, recipe: DegradationRecipe,
                  n_val: int = 0) -> dict:
    """Generate ``n`` training and ``n_val`` validation pairs under ``out``."""
    out = Path(out)
    manifest = {"size": size, "seed": seed, "recipe": recipe.to_dict(), "splits": {}}
    for split, count, split_seed in (("train", n, seed), ("val", n_val, seed + 1_000_003)):
        if count == 0:
            continue
        hq, labels = synth_hq_labeled(count, size, split_seed, multiple_of=recipe.downscale_factor)
        pairs = make_pairs(hq, recipe, split_seed, labels)
        (out / split / "hq").mkdir(parents=True, exist_ok=True)
        (out / split / "lq").mkdir(parents=True, exist_ok=True)
        files = []
        for i, (lo, hi, lab) in enumerate(zip(pairs.lq, pairs.hq, labels)):
            name = f"{i:06d}.png"
            save_png(hi, out / split / "hq" / name)
            save_png(lo, out / split / "lq" / name)
            files.append({"name": name, "label": lab})
        manifest["splits"][split] = {"seed": split_seed, "files": files, "detail_score": detail_score(hq)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def read_dataset(root: str | Path, split: str = "train") -> PairedDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    entries = manifest["splits"][split]["files"]
    return PairedDataset(
        lq=[load_png(root / split / "lq" / e["name"]) for e in entries],
        hq=[load_png(root / split / "hq" / e["name"]) for e in entries],
        labels=[int(e["label"]) for e in entries],
    )
