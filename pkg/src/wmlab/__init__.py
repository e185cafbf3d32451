"""wmlab: desk-scale lab for invisible model watermarking.

Numpy-side primitives (data model, metrics, spread spectrum, forensics) are
importable without torch; the deep watermarking system lives in
``wmlab.networks`` / ``wmlab.losses`` / ``wmlab.training`` /
``wmlab.surrogate`` / ``wmlab.pipeline`` and pulls torch in on import.
"""

from . import media, spatial, verify
from .errors import (CapacityError, ConfigurationError, ProvenanceError,
                     ShapeMismatchError, TrainingDivergedError)
from .media import (ImageBatch, PairedDataset, WatermarkSpec, load_dataset,
                    make_watermark, psnr, save_dataset, ssim,
                    synthesize_clean_images, synthesize_task)
from .spatial import SpreadSpectrumConfig, spread_patterns, ss_embed, ss_extract
from .verify import VerificationReport, diagnostics, nc, nc_batch, verdict

__version__ = "0.1.0"

__all__ = [
    "media", "spatial", "verify",
    "ImageBatch", "PairedDataset", "WatermarkSpec",
    "synthesize_task", "synthesize_clean_images", "make_watermark",
    "save_dataset", "load_dataset", "psnr", "ssim",
    "SpreadSpectrumConfig", "spread_patterns", "ss_embed", "ss_extract",
    "VerificationReport", "nc", "nc_batch", "verdict", "diagnostics",
    "CapacityError", "ConfigurationError", "ProvenanceError",
    "ShapeMismatchError", "TrainingDivergedError",
    "__version__",
]
