"""Image/watermark data model, paired-task synthesis, and fidelity metrics.

Everything downstream trades in ``ImageBatch`` objects: rank-4 float arrays
(n, c, h, w) in a declared value range ([0, 1] by default).  This module also
provides the procedural stripe-removal task used as the desk-scale stand-in
for a real image-processing dataset, PNG (de)serialization with a manifest,
procedural logo-style watermark images, and PSNR/SSIM.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.signal import convolve2d

from .errors import ConfigurationError, ShapeMismatchError

DOMAINS = ("A", "B", "Bprime", "Bdoubleprime", "free")

#: PSNR reported for numerically identical images (documented cap; keeps
#: reports JSON-friendly instead of emitting +inf).
PSNR_CAP_DB = 99.0


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass
class ImageBatch:
    """A batch of images: float array (n, c, h, w) within ``value_range``.

    ``provenance`` carries optional origin tags (e.g. the checkpoint hash of
    the surrogate model that produced a B'' batch).
    """

    data: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)
    domain: str = "free"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"expected (n, c, h, w), got shape {self.data.shape}")
        n, c, h, w = self.data.shape
        if c not in (1, 3):
            raise ShapeMismatchError(f"channel count must be 1 or 3, got {c}")
        if h < 16 or w < 16:
            raise ShapeMismatchError(f"images must be at least 16x16, got {h}x{w}")
        if self.domain not in DOMAINS:
            raise ConfigurationError(f"unknown domain tag {self.domain!r}")
        lo, hi = self.value_range
        if not np.all(np.isfinite(self.data)):
            raise ShapeMismatchError("image data contains non-finite values")
        if self.data.min() < lo - 1e-6 or self.data.max() > hi + 1e-6:
            raise ShapeMismatchError(
                f"data outside declared range [{lo}, {hi}]: "
                f"[{self.data.min():.4f}, {self.data.max():.4f}]"
            )

    def __len__(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    @property
    def peak(self) -> float:
        lo, hi = self.value_range
        return hi - lo

    def with_domain(self, domain: str) -> "ImageBatch":
        return ImageBatch(self.data, self.value_range, domain, dict(self.provenance))

    def subset(self, indices) -> "ImageBatch":
        return ImageBatch(self.data[np.asarray(indices)], self.value_range,
                          self.domain, dict(self.provenance))


@dataclass
class WatermarkSpec:
    """Target watermark delta, blank delta0, and padding bookkeeping.

    ``delta`` is stored already padded to the cover size; ``native_size`` is
    the watermark's size before padding and ``pad_value`` fills the border.
    ``delta0`` is the all-zeros blank the extractor must emit for clean
    images.
    """

    delta: np.ndarray
    delta0: np.ndarray
    pad_value: float
    native_size: tuple[int, int]

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        self.delta0 = np.asarray(self.delta0, dtype=np.float32)
        if self.delta.ndim != 3:
            raise ShapeMismatchError(f"delta must be (c, h, w), got {self.delta.shape}")
        if self.delta.shape != self.delta0.shape:
            raise ShapeMismatchError("delta and delta0 shapes differ after padding")
        if np.ptp(self.delta0) != 0.0:
            raise ConfigurationError("delta0 must be spatially constant")
        c, h, w = self.delta.shape
        h0, w0 = self.native_size
        if h0 > h or w0 > w:
            raise ConfigurationError("native size exceeds padded size")
        mask = np.ones((h, w), dtype=bool)
        top, left = (h - h0) // 2, (w - w0) // 2
        mask[top:top + h0, left:left + w0] = False
        if mask.any() and not np.allclose(self.delta[:, mask], self.pad_value):
            raise ConfigurationError("padded border must equal pad_value")

    @property
    def channels(self) -> int:
        return self.delta.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.delta.shape[1], self.delta.shape[2]

    @classmethod
    def from_native(cls, delta_native: np.ndarray, cover_size: tuple[int, int],
                    pad_value: float = 1.0) -> "WatermarkSpec":
        """Center ``delta_native`` (c, h0, w0) on a pad_value canvas of cover size."""
        delta_native = np.asarray(delta_native, dtype=np.float32)
        if delta_native.ndim == 2:
            delta_native = delta_native[None]
        c, h0, w0 = delta_native.shape
        h, w = cover_size
        if h0 > h or w0 > w:
            raise ConfigurationError(f"watermark {h0}x{w0} larger than cover {h}x{w}")
        canvas = np.full((c, h, w), pad_value, dtype=np.float32)
        top, left = (h - h0) // 2, (w - w0) // 2
        canvas[:, top:top + h0, left:left + w0] = delta_native
        return cls(canvas, np.zeros_like(canvas), pad_value, (h0, w0))

    def delta_for(self, channels: int) -> np.ndarray:
        """Watermark broadcast to the cover's channel count (gray -> RGB)."""
        if channels == self.channels:
            return self.delta
        if self.channels == 1 and channels == 3:
            return np.repeat(self.delta, 3, axis=0)
        raise ShapeMismatchError(
            f"cannot adapt {self.channels}-channel watermark to {channels} channels")

    def delta0_for(self, channels: int) -> np.ndarray:
        if channels == self.channels:
            return self.delta0
        if self.channels == 1 and channels == 3:
            return np.repeat(self.delta0, 3, axis=0)
        raise ShapeMismatchError(
            f"cannot adapt {self.channels}-channel blank to {channels} channels")


@dataclass
class PairedDataset:
    """Aligned (input, target) pairs with disjoint named splits.

    ``splits`` maps split name -> index array into ``inputs``/``targets``.
    Regeneration from the same seed/config is bit-identical.
    """

    inputs: ImageBatch
    targets: ImageBatch
    splits: dict = field(default_factory=dict)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise ShapeMismatchError("inputs and targets must be pixel-aligned")
        seen = np.concatenate([np.asarray(v) for v in self.splits.values()]) \
            if self.splits else np.array([], dtype=int)
        if len(seen) != len(set(seen.tolist())):
            raise ConfigurationError("splits must be disjoint")
        if len(seen) and (seen.min() < 0 or seen.max() >= len(self.inputs)):
            raise ConfigurationError("split indices out of range")

    def split(self, name: str) -> tuple[ImageBatch, ImageBatch]:
        """Return (inputs, targets) for one split, domain-tagged A / B."""
        if name not in self.splits:
            raise ConfigurationError(f"unknown split {name!r}; have {sorted(self.splits)}")
        idx = self.splits[name]
        return (self.inputs.subset(idx).with_domain("A"),
                self.targets.subset(idx).with_domain("B"))


# ---------------------------------------------------------------------------
# procedural synthesis
# ---------------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Random smooth background: linear ramp + a few low-frequency cosines."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy, xx = yy / h, xx / w
    img = rng.uniform(-0.5, 0.5) * xx + rng.uniform(-0.5, 0.5) * yy
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        img += rng.uniform(0.05, 0.2) * np.cos(2 * np.pi * fx * xx + phase[0]) \
            * np.cos(2 * np.pi * fy * yy + phase[1])
    return img


def _add_shapes(rng: np.random.Generator, img: np.ndarray, n_shapes: int) -> None:
    """Stamp soft-edged discs / rectangles / rings onto ``img`` in place."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(n_shapes):
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        amp = rng.uniform(-0.35, 0.35)
        soft = rng.uniform(1.0, 2.5)  # edge softness in px
        if kind == 0:  # disc
            r = rng.uniform(0.08, 0.25) * min(h, w)
            d = np.hypot(yy - cy, xx - cx)
            img += amp / (1.0 + np.exp((d - r) / soft))
        elif kind == 1:  # axis-aligned rectangle
            ry, rx = rng.uniform(0.08, 0.3, size=2) * np.array([h, w])
            m = (1.0 / (1.0 + np.exp((np.abs(yy - cy) - ry) / soft))
                 * 1.0 / (1.0 + np.exp((np.abs(xx - cx) - rx) / soft)))
            img += amp * m
        else:  # ring
            r = rng.uniform(0.1, 0.3) * min(h, w)
            width = rng.uniform(2.0, 5.0)
            d = np.abs(np.hypot(yy - cy, xx - cx) - r)
            img += amp / (1.0 + np.exp((d - width) / soft))


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round-trips are lossless."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0


@dataclass
class StripeTaskConfig:
    """Knobs of the procedural stripe-removal task."""

    stripe_amplitude: float = 0.25
    period_range: tuple[float, float] = (7.0, 13.0)
    n_shapes_range: tuple[int, int] = (1, 4)
    blur_sigma: float = 1.0
    channels: int = 1


def synthesize_clean_images(seed: int, n: int, size: tuple[int, int],
                            cfg: StripeTaskConfig | None = None) -> ImageBatch:
    """Procedural clean covers: random smooth gradients + soft geometric shapes."""
    cfg = cfg or StripeTaskConfig()
    h, w = size
    if not (16 <= h <= 128 and 16 <= w <= 128):
        raise ConfigurationError(f"desk-scale size must be within [16, 128], got {size}")
    if n < 1:
        raise ConfigurationError("need at least one image")
    rng = np.random.default_rng(seed)
    imgs = np.empty((n, cfg.channels, h, w), dtype=np.float32)
    for i in range(n):
        for c in range(cfg.channels):
            img = _smooth_field(rng, h, w)
            _add_shapes(rng, img, int(rng.integers(cfg.n_shapes_range[0],
                                                   cfg.n_shapes_range[1] + 1)))
            if cfg.blur_sigma > 0:
                img = gaussian_filter(img, cfg.blur_sigma, mode="nearest")
            lo, hi = img.min(), img.max()
            img = 0.15 + 0.7 * (img - lo) / max(hi - lo, 1e-9)
            imgs[i, c] = _quantize(img)
    return ImageBatch(imgs, domain="B")


def _stripe_field(rng: np.random.Generator, h: int, w: int,
                  cfg: StripeTaskConfig) -> np.ndarray:
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(*cfg.period_range)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    carrier = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    return cfg.stripe_amplitude * carrier


def synthesize_task(seed: int, n: int, size: tuple[int, int],
                    task: str = "stripe_removal",
                    cfg: StripeTaskConfig | None = None,
                    split_counts: tuple[int, int, int] | None = None) -> PairedDataset:
    """Generate the paired stripe-removal dataset.

    Targets are procedural clean images; inputs add a deterministic periodic
    stripe field per image.  ``split_counts`` is
    (protector_train, attacker_train, test) and must sum to ``n``; the
    default carves n into 1/2, 3/8, 1/8.
    """
    if task != "stripe_removal":
        raise ConfigurationError(f"unknown task {task!r}")
    cfg = cfg or StripeTaskConfig()
    targets = synthesize_clean_images(seed, n, size, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57E1]))
    h, w = size
    inputs = np.empty_like(targets.data)
    for i in range(n):
        stripe = _stripe_field(rng, h, w, cfg)
        inputs[i] = _quantize(targets.data[i] + stripe[None])
    if split_counts is None:
        n_test = max(n // 8, 1)
        n_prot = n // 2
        split_counts = (n_prot, n - n_prot - n_test, n_test)
    n_prot, n_att, n_test = split_counts
    if n_prot + n_att + n_test != n:
        raise ConfigurationError(
            f"split counts {split_counts} do not sum to n={n}")
    splits = {
        "protector_train": np.arange(0, n_prot),
        "attacker_train": np.arange(n_prot, n_prot + n_att),
        "test": np.arange(n_prot + n_att, n),
    }
    meta = {"task": task, "size": list(size), "n": n,
            "stripe_amplitude": cfg.stripe_amplitude,
            "period_range": list(cfg.period_range),
            "n_shapes_range": list(cfg.n_shapes_range),
            "blur_sigma": cfg.blur_sigma, "channels": cfg.channels}
    return PairedDataset(ImageBatch(inputs, domain="A"), targets, splits, seed, meta)


def make_watermark(seed: int, size: tuple[int, int] = (64, 64),
                   channels: int = 1) -> np.ndarray:
    """Procedural logo-style watermark: bright strokes on a dark canvas.

    Dark background keeps the normalized correlation between *different*
    watermarks well below the 0.95 verification threshold.
    """
    h, w = size
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10F0]))
    img = np.zeros((channels, h, w), dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n_elem = int(rng.integers(3, 6))
    for _ in range(n_elem):
        kind = rng.integers(0, 4)
        inten = rng.uniform(0.6, 1.0, size=channels)
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        if kind == 0:  # filled disc
            r = rng.uniform(0.08, 0.2) * min(h, w)
            m = np.hypot(yy - cy, xx - cx) <= r
        elif kind == 1:  # bar at a random angle
            th = rng.uniform(0, np.pi)
            width = rng.uniform(0.04, 0.1) * min(h, w)
            length = rng.uniform(0.3, 0.6) * min(h, w)
            u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
            v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
            m = (np.abs(u) <= length) & (np.abs(v) <= width)
        elif kind == 2:  # ring
            r = rng.uniform(0.12, 0.3) * min(h, w)
            d = np.hypot(yy - cy, xx - cx)
            m = np.abs(d - r) <= rng.uniform(0.03, 0.08) * min(h, w)
        else:  # checker tile patch
            cell = int(rng.integers(3, 7))
            ry, rx = rng.uniform(0.15, 0.3, size=2) * np.array([h, w])
            patch = ((yy // cell + xx // cell) % 2) == 0
            m = patch & (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        for c in range(channels):
            img[c][m] = inten[c]
    return _quantize(img).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG + manifest persistence
# ---------------------------------------------------------------------------

def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: Path) -> None:
    """Write one (c, h, w) float image in [0, 1] as PNG."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise ShapeMismatchError(f"expected (c, h, w), got {img.shape}")
    arr = _to_uint8(img)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path)


def load_image(path: Path) -> np.ndarray:
    """Read a PNG into a (c, h, w) float array in [0, 1]."""
    im = Image.open(path)
    if im.mode not in ("L", "RGB"):
        im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
    arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.transpose(arr, (2, 0, 1))


def save_batch(batch: ImageBatch, root: Path, prefix: str = "") -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(len(batch)):
        save_image(batch.data[i], root / f"{prefix}{i:05d}.png")


def load_batch(root: Path, domain: str = "free") -> ImageBatch:
    paths = sorted(Path(root).glob("*.png"))
    if not paths:
        raise ConfigurationError(f"no PNG files under {root}")
    return ImageBatch(np.stack([load_image(p) for p in paths]), domain=domain)


def save_dataset(ds: PairedDataset, root: Path) -> None:
    """Materialize as ``<root>/{A,B}/<index>.png`` plus ``manifest.json``."""
    root = Path(root)
    save_batch(ds.inputs, root / "A")
    save_batch(ds.targets, root / "B")
    manifest = {
        "seed": ds.seed,
        "meta": ds.meta,
        "splits": {k: [int(v.min()), int(v.max()) + 1] if len(v) else [0, 0]
                   for k, v in ds.splits.items()},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(root: Path) -> PairedDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    inputs = load_batch(root / "A", domain="A")
    targets = load_batch(root / "B", domain="B")
    splits = {k: np.arange(lo, hi) for k, (lo, hi) in manifest["splits"].items()}
    return PairedDataset(inputs, targets, splits, manifest["seed"], manifest.get("meta", {}))


# ---------------------------------------------------------------------------
# fidelity metrics
# ---------------------------------------------------------------------------

def _check_pair(x: ImageBatch, y: ImageBatch) -> None:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.value_range != y.value_range:
        raise ShapeMismatchError("value ranges differ")


def psnr(x: ImageBatch, y: ImageBatch) -> np.ndarray:
    """Per-image PSNR in dB over all channels jointly.

    Identical images report the documented 99 dB cap.  Peak is the width of
    the declared value range.
    """
    _check_pair(x, y)
    diff = x.data.astype(np.float64) - y.data.astype(np.float64)
    mse = np.mean(diff * diff, axis=(1, 2, 3))
    peak = x.peak
    out = np.full(mse.shape, PSNR_CAP_DB)
    nz = mse > 0
    out[nz] = 10.0 * np.log10(peak * peak / mse[nz])
    return np.minimum(out, PSNR_CAP_DB)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(x: ImageBatch, y: ImageBatch, window_size: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Per-image mean SSIM, Gaussian 11x11 window, computed on valid windows.

    Channels are scored independently and averaged.
    """
    _check_pair(x, y)
    n, c, h, w = x.shape
    if h < window_size or w < window_size:
        raise ShapeMismatchError(
            f"image {h}x{w} smaller than SSIM window {window_size}")
    kern = _gaussian_kernel(window_size, sigma)
    L = x.peak
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    out = np.empty(n)
    xd = x.data.astype(np.float64)
    yd = y.data.astype(np.float64)
    for i in range(n):
        vals = []
        for ch in range(c):
            a, b = xd[i, ch], yd[i, ch]
            mu_a = convolve2d(a, kern, mode="valid")
            mu_b = convolve2d(b, kern, mode="valid")
            aa = convolve2d(a * a, kern, mode="valid") - mu_a * mu_a
            bb = convolve2d(b * b, kern, mode="valid") - mu_b * mu_b
            ab = convolve2d(a * b, kern, mode="valid") - mu_a * mu_b
            num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
            den = (mu_a ** 2 + mu_b ** 2 + c1) * (aa + bb + c2)
            vals.append(np.mean(num / den))
        out[i] = np.mean(vals)
    return out
