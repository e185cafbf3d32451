"""Loss terms for embedding, extraction, adversary, and classifier.

Pixel losses are mean squared differences (normalized by pixel count); the
perceptual term is the mean squared feature difference of a frozen feature
extractor.  The consistency term averages the mean squared difference over
all unordered pairs of extractions within the batch (the stochastic stand-in
for the full-domain pair sum, which is quadratic in the dataset).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError


@dataclass
class LossWeights:
    """Balance knobs: lam couples the extracting loss into the embedder's
    objective; l1..l6 weight the individual terms (defaults: all 1 except
    the adversarial term l3 = 0.01)."""

    lam: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    l3: float = 0.01
    l4: float = 1.0
    l5: float = 1.0
    l6: float = 1.0

    def __post_init__(self):
        for name in ("lam", "l1", "l2", "l3", "l4", "l5", "l6"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0")

    def to_dict(self):
        return {k: getattr(self, k) for k in ("lam", "l1", "l2", "l3", "l4", "l5", "l6")}


def adversarial_generator_loss(d_fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: -E[log D(fake)]."""
    return F.softplus(-d_fake_logits).mean()


def discriminator_loss(d_real_logits: torch.Tensor, d_fake_logits: torch.Tensor
                       ) -> torch.Tensor:
    """Two-term log loss: -E[log D(real)] - E[log(1 - D(fake))]."""
    return F.softplus(-d_real_logits).mean() + F.softplus(d_fake_logits).mean()


def embedding_loss(b: torch.Tensor, b_prime: torch.Tensor, disc, percep,
                   w: LossWeights) -> tuple[torch.Tensor, dict]:
    """Visual-consistency loss of the embedder: l1*bs + l2*vgg + l3*adv."""
    if b.shape != b_prime.shape:
        raise ConfigurationError(f"shape mismatch {tuple(b.shape)} vs {tuple(b_prime.shape)}")
    l_bs = F.mse_loss(b_prime, b)
    l_vgg = F.mse_loss(percep(b_prime), percep(b))
    l_adv = adversarial_generator_loss(disc(b_prime))
    total = w.l1 * l_bs + w.l2 * l_vgg + w.l3 * l_adv
    parts = {"l_bs": l_bs.item(), "l_vgg": l_vgg.item(), "l_adv": l_adv.item()}
    return total, parts


def _pairwise_consistency(pool: torch.Tensor) -> torch.Tensor:
    n = pool.shape[0]
    if n < 2:
        return pool.new_zeros(())
    flat = pool.flatten(1)
    diffs = flat.unsqueeze(0) - flat.unsqueeze(1)
    iu = torch.triu_indices(n, n, offset=1)
    return diffs[iu[0], iu[1]].pow(2).mean()


def extracting_loss(r_a: torch.Tensor, r_b: torch.Tensor, r_bp: torch.Tensor,
                    delta: torch.Tensor, delta0: torch.Tensor, w: LossWeights,
                    r_bpp: torch.Tensor | None = None, stage: str = "initial",
                    extra_wm=(), extra_clean=()) -> tuple[torch.Tensor, dict]:
    """Extractor objective: l4*wm + l5*clean + l6*cst.

    stage="initial" uses extractions from A, B, B'; stage="adversarial"
    additionally requires the proxy-surrogate extractions ``r_bpp``, which
    join both the watermark and the consistency terms.  ``extra_wm`` /
    ``extra_clean`` take extractions of augmented images (e.g. re-watermarked
    B' under overwrite-robust training) that must also map to delta / delta0.
    """
    if stage not in ("initial", "adversarial"):
        raise ConfigurationError(f"unknown stage {stage!r}")
    if stage == "adversarial" and r_bpp is None:
        raise ConfigurationError("adversarial stage needs proxy-surrogate outputs (B'')")
    if stage == "initial" and r_bpp is not None:
        raise ConfigurationError("B'' extractions are an adversarial-stage input")

    def against(x, target):
        return F.mse_loss(x, target.unsqueeze(0).expand_as(x))

    l_wm = against(r_bp, delta)
    for x in extra_wm:
        l_wm = l_wm + against(x, delta)
    l_clean = against(r_a, delta0) + against(r_b, delta0)
    for x in extra_clean:
        l_clean = l_clean + against(x, delta0)
    pool = [r_bp] + list(extra_wm)
    if r_bpp is not None:
        l_wm = l_wm + against(r_bpp, delta)
        pool.append(r_bpp)
    l_cst = _pairwise_consistency(torch.cat(pool, dim=0))
    total = w.l4 * l_wm + w.l5 * l_clean + w.l6 * l_cst
    parts = {"l_wm": l_wm.item(), "l_clean": l_clean.item(), "l_cst": l_cst.item()}
    return total, parts


def classifier_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross entropy over watermark classes (binary is the 2-class case)."""
    return F.cross_entropy(logits, labels)
