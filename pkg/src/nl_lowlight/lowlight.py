"""Synthetic low-light degradation with demosaic-correlated noise.

Pipeline, in order: decode gamma to linear, scale by exposure and
white-balance gains, Poisson shot noise scaled by a full-scale photon
count, additive Gaussian read noise, optional RGGB mosaic + bilinear
demosaic (this is what spatially correlates the noise), then clamp,
re-encode gamma, and quantize to 8 bits with ties to even.

Everything is deterministic given (image, config, seed); batch
processing derives one stream per image from (seed, image index), so
thread scheduling can never change outputs.
"""

from __future__ import annotations

import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import backend
from .errors import ArgumentError

# stream tags: one per distinct randomness consumer
_TAG_SHOT = 1
_TAG_READ = 2
_TAG_IMAGE = 3
_TAG_JITTER = 4

_IMAGE_SUFFIXES = {".png", ".ppm"}


@dataclass(frozen=True)
class DegradationConfig:
    exposure: float = 0.15
    gamma: float = 2.2
    photons_full_scale: float = 1500.0  # inf switches shot noise off
    read_sigma: float = 0.003
    wb_gains: tuple = (1.0, 1.0, 1.0)
    demosaic: bool = True
    seed: int = 0


@dataclass(frozen=True)
class JitterRanges:
    """Per-image parameter ranges for batch synthesis; None = keep cfg value.

    exposure and photons_full_scale sample log-uniformly, read_sigma
    uniformly.
    """
    exposure: tuple | None = None
    photons_full_scale: tuple | None = None
    read_sigma: tuple | None = None


DEFAULT_JITTER = JitterRanges(
    exposure=(0.05, 0.3),
    photons_full_scale=(500.0, 5000.0),
    read_sigma=(0.001, 0.01),
)


def validate_config(cfg: DegradationConfig) -> None:
    if not (0.0 < cfg.exposure <= 1.0):
        raise ArgumentError(f"exposure must be in (0,1], got {cfg.exposure}")
    if not cfg.gamma > 0.0:
        raise ArgumentError(f"gamma must be > 0, got {cfg.gamma}")
    if not cfg.photons_full_scale > 0.0:
        raise ArgumentError(f"photons_full_scale must be > 0, got {cfg.photons_full_scale}")
    if cfg.read_sigma < 0.0:
        raise ArgumentError(f"read_sigma must be >= 0, got {cfg.read_sigma}")
    if len(cfg.wb_gains) != 3 or any(g <= 0.0 for g in cfg.wb_gains):
        raise ArgumentError(f"wb_gains must be 3 positive gains, got {cfg.wb_gains}")


def _require_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ArgumentError(f"expected uint8 (H,W,3) image, got {img.dtype} {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ArgumentError(f"zero-sized image: {img.shape}")
    return img


def srgb_to_linear(v01: np.ndarray, gamma: float) -> np.ndarray:
    return np.asarray(v01, dtype=np.float64) ** gamma


def linear_to_srgb8(lin: np.ndarray, gamma: float) -> np.ndarray:
    enc = np.clip(lin, 0.0, 1.0) ** (1.0 / gamma)
    return np.rint(255.0 * enc).astype(np.uint8)  # ties to even


def _mosaic_rggb(lin: np.ndarray) -> np.ndarray:
    raw = np.empty(lin.shape[:2])
    raw[0::2, 0::2] = lin[0::2, 0::2, 0]
    raw[0::2, 1::2] = lin[0::2, 1::2, 1]
    raw[1::2, 0::2] = lin[1::2, 0::2, 1]
    raw[1::2, 1::2] = lin[1::2, 1::2, 2]
    return raw


_K_GREEN = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 4.0
_K_RB = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0


def _conv3_same(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = img.shape
    pad = np.zeros((h + 2, w + 2))
    pad[1:h + 1, 1:w + 1] = img
    out = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * pad[i:i + h, j:j + w]
    return out


def _demosaic_bilinear(raw: np.ndarray) -> np.ndarray:
    """Bilinear interpolation per color plane, border-normalized.

    Interior pixels get the classic bilinear taps; borders renormalize
    over the neighbors that exist (zero padding in both numerator and
    mask denominator).
    """
    h, w = raw.shape
    site = {c: np.zeros((h, w)) for c in "rgb"}
    site["r"][0::2, 0::2] = 1.0
    site["g"][0::2, 1::2] = 1.0
    site["g"][1::2, 0::2] = 1.0
    site["b"][1::2, 1::2] = 1.0
    out = np.empty((h, w, 3))
    for idx, (c, kernel) in enumerate((("r", _K_RB), ("g", _K_GREEN), ("b", _K_RB))):
        num = _conv3_same(raw * site[c], kernel)
        den = _conv3_same(site[c], kernel)
        out[:, :, idx] = num / den
    return out


def _linear_stage(img: np.ndarray, cfg: DegradationConfig) -> np.ndarray:
    lin = srgb_to_linear(img.astype(np.float64) / 255.0, cfg.gamma)
    lin *= cfg.exposure
    lin *= np.asarray(cfg.wb_gains, dtype=np.float64)[None, None, :]
    return lin


def degrade(img, cfg: DegradationConfig) -> np.ndarray:
    """Apply the full degradation pipeline to one uint8 RGB image."""
    img = _require_image(img)
    validate_config(cfg)
    if cfg.demosaic and (img.shape[0] < 2 or img.shape[1] < 2):
        raise ArgumentError("demosaic needs at least a 2x2 image")
    lin = _linear_stage(img, cfg)
    if math.isfinite(cfg.photons_full_scale):
        lam = lin * cfg.photons_full_scale
        counts = backend.poisson_field(lam.ravel(), backend.derive_stream(cfg.seed, _TAG_SHOT))
        lin = counts.astype(np.float64).reshape(lin.shape) / cfg.photons_full_scale
    if cfg.read_sigma > 0.0:
        noise = backend.normal_field(backend.derive_stream(cfg.seed, _TAG_READ), lin.size)
        lin = lin + cfg.read_sigma * noise.reshape(lin.shape)
    if cfg.demosaic:
        lin = _demosaic_bilinear(_mosaic_rggb(lin))
    return linear_to_srgb8(lin, cfg.gamma)


@dataclass
class ChannelCorrelation:
    horizontal: float
    vertical: float
    defined: bool  # False when the noise field has no variance


def _lag1(a: np.ndarray, b: np.ndarray):
    va = a - a.mean()
    vb = b - b.mean()
    denom = math.sqrt(float((va * va).sum()) * float((vb * vb).sum()))
    if denom < 1e-30:
        return 0.0, False
    return float((va * vb).sum()) / denom, True


def noise_autocorrelation(img_clean, img_degraded, cfg: DegradationConfig):
    """Lag-1 Pearson correlation of the linear-domain noise, per channel."""
    img_clean = _require_image(img_clean)
    img_degraded = _require_image(img_degraded)
    if img_clean.shape != img_degraded.shape:
        raise ArgumentError(
            f"dimension mismatch: clean {img_clean.shape} vs degraded {img_degraded.shape}")
    validate_config(cfg)
    expected = _linear_stage(img_clean, cfg)
    if cfg.demosaic:
        expected = _demosaic_bilinear(_mosaic_rggb(expected))
    observed = srgb_to_linear(img_degraded.astype(np.float64) / 255.0, cfg.gamma)
    noise = observed - expected
    report = []
    for c in range(3):
        nc = noise[:, :, c]
        ch, okh = _lag1(nc[:, :-1], nc[:, 1:])
        cv, okv = _lag1(nc[:-1, :], nc[1:, :])
        report.append(ChannelCorrelation(ch, cv, okh and okv))
    return report


# ---------------------------------------------------------------------------
# Image files and batch synthesis.
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as e:
        raise ArgumentError(f"cannot read image {path}: {e}") from e


def write_image(path, arr: np.ndarray) -> None:
    Image.fromarray(_require_image(arr)).save(path)


def _draw_jitter(cfg: DegradationConfig, jitter: JitterRanges | None, index: int):
    if jitter is None:
        return cfg.exposure, cfg.photons_full_scale, cfg.read_sigma
    # three draws always consumed so enabling one range never shifts another
    u = backend.uniform_field(backend.derive_stream(cfg.seed, _TAG_JITTER, index), 3)

    def log_uniform(rng, fallback, ui):
        if rng is None:
            return fallback
        lo, hi = float(rng[0]), float(rng[1])
        if not (0.0 < lo <= hi):
            raise ArgumentError(f"bad log-uniform range {rng}")
        return math.exp(math.log(lo) + ui * (math.log(hi) - math.log(lo)))

    exposure = log_uniform(jitter.exposure, cfg.exposure, u[0])
    photons = log_uniform(jitter.photons_full_scale, cfg.photons_full_scale, u[1])
    if jitter.read_sigma is None:
        sigma = cfg.read_sigma
    else:
        lo, hi = float(jitter.read_sigma[0]), float(jitter.read_sigma[1])
        if not (0.0 <= lo <= hi):
            raise ArgumentError(f"bad uniform range {jitter.read_sigma}")
        sigma = lo + u[2] * (hi - lo)
    return exposure, photons, sigma


def per_image_config(cfg: DegradationConfig, jitter: JitterRanges | None,
                     index: int) -> DegradationConfig:
    """The exact config degrade() sees for image `index` of a batch."""
    exposure, photons, sigma = _draw_jitter(cfg, jitter, index)
    return replace(cfg, exposure=exposure, photons_full_scale=photons,
                   read_sigma=sigma, seed=backend.derive_stream(cfg.seed, _TAG_IMAGE, index))


def _manifest_record(name: str, cfg: DegradationConfig) -> dict:
    photons = cfg.photons_full_scale
    return {
        "file": name,
        "exposure": cfg.exposure,
        "photons_full_scale": "inf" if math.isinf(photons) else photons,
        "read_sigma": cfg.read_sigma,
        "wb_gains": list(cfg.wb_gains),
        "seed": cfg.seed,
    }


def list_images(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise ArgumentError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)


def degrade_dataset(input_dir, output_dir, cfg: DegradationConfig,
                    jitter: JitterRanges | None = None) -> list:
    """Degrade every image in input_dir; returns the manifest records.

    Writes outputs under output_dir (same file names) plus
    manifest.jsonl, one JSON record per image in sorted name order.
    Unreadable files produce a warning record instead of aborting.
    """
    validate_config(cfg)
    paths = list_images(input_dir)
    if not paths:
        raise ArgumentError(f"no .png/.ppm images in {input_dir}")
    out_root = Path(output_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    def work(item):
        index, path = item
        try:
            img = read_image(path)
            cfg_i = per_image_config(cfg, jitter, index)
            write_image(out_root / path.name, degrade(img, cfg_i))
            return _manifest_record(path.name, cfg_i)
        except ArgumentError as e:
            print(f"warning: skipping {path.name}: {e}", file=sys.stderr)
            return {"file": path.name, "error": str(e)}

    with ThreadPoolExecutor(max_workers=backend.threads()) as pool:
        records = list(pool.map(work, enumerate(paths)))

    with open(out_root / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records
