"""Forensic decision layer: NC metric, verdicts, reports, diagnostics.

NC is the cosine similarity between the extracted watermark and the target,
computed on raw [0, 1] pixel values over the flattened tensor (convention
recorded in every report).  A verdict runs the extractor (and optionally the
classifier) over a batch and aggregates success rates.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ShapeMismatchError
from .media import ImageBatch, WatermarkSpec, psnr, ssim, save_image

NC_CONVENTION = "inner-product over flattened raw [0,1] pixels; all channels jointly"


def nc(extracted: np.ndarray, delta: np.ndarray) -> float:
    """Normalized correlation <x, d> / (||x|| * ||d||); 0.0 if x has zero norm."""
    value, _ = nc_flagged(extracted, delta)
    return value


def nc_flagged(extracted: np.ndarray, delta: np.ndarray) -> tuple[float, bool]:
    """NC plus a degenerate flag for zero-norm extractions (reported, not raised)."""
    x = np.asarray(extracted, dtype=np.float64).ravel()
    d = np.asarray(delta, dtype=np.float64).ravel()
    if x.shape != d.shape:
        raise ShapeMismatchError(f"shape mismatch {x.shape} vs {d.shape}")
    dn = np.linalg.norm(d)
    if dn == 0.0:
        raise ConfigurationError("target watermark must not be all-zero")
    xn = np.linalg.norm(x)
    if xn == 0.0:
        return 0.0, True
    return float(np.dot(x, d) / (xn * dn)), False


def nc_batch(extracted: ImageBatch, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values = np.empty(len(extracted))
    flags = np.zeros(len(extracted), dtype=bool)
    for i in range(len(extracted)):
        values[i], flags[i] = nc_flagged(extracted.data[i], delta)
    return values, flags


@dataclass
class VerificationReport:
    """Per-image forensic scores plus aggregate success rates."""

    per_image: list
    sr_nc: float
    sr_c: float | None
    threshold_nc: float
    mode: str
    model_provenance: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    notes: str = NC_CONVENTION

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "sr_nc": self.sr_nc,
            "sr_c": self.sr_c,
            "threshold_nc": self.threshold_nc,
            "mode": self.mode,
            "model_provenance": self.model_provenance,
            "config": self.config,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = sorted({k for row in self.per_image for k in row})
        writer = csv.DictWriter(buf, fieldnames=["index"] + keys)
        writer.writeheader()
        for i, row in enumerate(self.per_image):
            writer.writerow({"index": i, **row})
        return buf.getvalue()

    def save(self, directory: Path, stem: str = "report") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{stem}.json"
        path.write_text(self.to_json())
        (directory / f"{stem}.csv").write_text(self.to_csv())
        return path


def assemble_report(nc_values, degenerate, threshold_nc=0.95, classifier_scores=None,
                    classifier_classes=None, expected_class=None, psnr_values=None,
                    ssim_values=None, mode="nc", provenance=None, config=None
                    ) -> VerificationReport:
    """Build a report from raw per-image scores.

    ``classifier_scores`` are P(watermarked) for the binary case or the full
    softmax rows for multi-class; classifier success is score > 0.5 (binary)
    or argmax == expected_class (multi-class).
    """
    nc_values = np.asarray(nc_values, dtype=float)
    n = len(nc_values)
    per_image = []
    c_success = []
    for i in range(n):
        row = {"nc": float(nc_values[i]), "nc_degenerate": bool(degenerate[i]),
               "nc_success": bool(nc_values[i] > threshold_nc)}
        if classifier_scores is not None:
            score = classifier_scores[i]
            if np.ndim(score) == 0:
                row["classifier_score"] = float(score)
                ok = float(score) > 0.5
            else:
                row["classifier_scores"] = [float(s) for s in np.asarray(score)]
                pred = int(np.argmax(score)) if classifier_classes is None \
                    else int(classifier_classes[i])
                row["classifier_class"] = pred
                ok = pred == int(expected_class)
            row["classifier_success"] = bool(ok)
            c_success.append(ok)
        if psnr_values is not None:
            row["psnr"] = float(psnr_values[i])
        if ssim_values is not None:
            row["ssim"] = float(ssim_values[i])
        per_image.append(row)
    sr_nc = float(np.mean(nc_values > threshold_nc))
    sr_c = float(np.mean(c_success)) if c_success else None
    return VerificationReport(per_image, sr_nc, sr_c, threshold_nc, mode,
                              provenance or {}, config or {})


def verdict(bundle, images: ImageBatch, wm: WatermarkSpec, mode: str = "both",
            expected_class: int = 1, threshold_nc: float = 0.95,
            fidelity_ref: ImageBatch | None = None, config: dict | None = None
            ) -> VerificationReport:
    """Run extraction (and optionally classification) and aggregate a report.

    ``bundle`` must expose ``extract(ImageBatch) -> ImageBatch``; when the
    mode includes the classifier it must also expose
    ``classify(ImageBatch) -> (n, k) probabilities`` and
    ``check_provenance()`` (raises on extractor/classifier lineage mismatch).
    """
    if mode not in ("nc", "classifier", "both"):
        raise ConfigurationError(f"unknown verdict mode {mode!r}")
    extracted = bundle.extract(images)
    delta = wm.delta_for(images.shape[1])
    values, flags = nc_batch(extracted, delta)
    scores = classes = None
    if mode in ("classifier", "both"):
        bundle.check_provenance()
        probs = bundle.classify(extracted)
        if probs.shape[1] == 2:
            scores = probs[:, 1]
        else:
            scores = probs
            classes = np.argmax(probs, axis=1)
    psnr_values = ssim_values = None
    if fidelity_ref is not None:
        psnr_values = psnr(images, fidelity_ref)
        ssim_values = ssim(images, fidelity_ref)
    return assemble_report(values, flags, threshold_nc, scores, classes,
                           expected_class, psnr_values, ssim_values, mode,
                           provenance=getattr(bundle, "provenance", {}),
                           config=config)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def grayscale(batch: ImageBatch) -> np.ndarray:
    if batch.shape[1] == 1:
        return batch.data[:, 0]
    w = np.array([0.299, 0.587, 0.114], dtype=np.float64)
    return np.tensordot(batch.data, w, axes=([1], [0]))


def gray_histogram_distance(x: ImageBatch, y: ImageBatch, bins: int = 256) -> float:
    """L1 distance between normalized grayscale histograms (range [0, 2])."""
    gx, gy = grayscale(x).ravel(), grayscale(y).ravel()
    hx, _ = np.histogram(gx, bins=bins, range=(0.0, 1.0))
    hy, _ = np.histogram(gy, bins=bins, range=(0.0, 1.0))
    px = hx / max(hx.sum(), 1)
    py = hy / max(hy.sum(), 1)
    return float(np.abs(px - py).sum())


def diagnostics(b: ImageBatch, b_prime: ImageBatch, out_dir: Path | None = None,
                residual_gain: float = 10.0) -> dict:
    """Residual (enhanced 10x), gray-histogram distance, and fidelity metrics."""
    if b.shape != b_prime.shape:
        raise ShapeMismatchError(f"shape mismatch {b.shape} vs {b_prime.shape}")
    residual = np.clip(np.abs(b_prime.data - b.data) * residual_gain, 0.0, 1.0)
    out = {
        "residual": residual,
        "hist_l1": gray_histogram_distance(b, b_prime),
        "psnr": psnr(b, b_prime),
        "ssim": ssim(b, b_prime),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i in range(residual.shape[0]):
            save_image(residual[i], out_dir / f"residual_{i:05d}.png")
    return out
