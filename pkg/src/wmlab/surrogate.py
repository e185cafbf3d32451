"""Attack lab: surrogate-model training, B'' generation, attack sweeps.

The attacker trains an imitation network on (A, B') pairs harvested from the
protected service, choosing an architecture (CNet / Res9 / Res16 / UNet) and
a loss combination (L1 / L2 / perceptual / adversarial).  The lab reproduces
those attacks on the disjoint attacker split, evaluates verification success
on held-out surrogate outputs, and runs the overwriting attack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError
from .losses import adversarial_generator_loss, discriminator_loss
from .media import ImageBatch, WatermarkSpec, psnr, ssim
from .networks import (CNet, PatchDiscriminator, PerceptualFeatures,
                       ResnetGenerator, UNetGenerator, init_weights, seeded,
                       state_hash, to_batch, to_tensor)
from .training import (MetricsWriter, NetworkBundle, TrainSchedule,
                       _check_finite, _epoch_batches)
from .verify import VerificationReport, verdict

ARCHS = ("cnet", "res9", "res16", "unet")
LOSSES = ("l1", "l2", "perceptual", "adversarial")
DEFAULT_CHANNELS = {"cnet": 64, "res9": 48, "res16": 48, "unet": 64}

# fixed relative weights of the attacker's loss terms
PIXEL_WEIGHT = 1.0
PERCEPTUAL_WEIGHT = 1.0
ADVERSARIAL_WEIGHT = 0.01


@dataclass
class AttackConfig:
    """One attack cell: architecture, loss combination, capacity, schedule."""

    arch: str = "unet"
    losses: tuple[str, ...] = ("l2",)
    channels: int | None = None
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(
        epochs=40, batch_size=16, lr=1e-4))

    def __post_init__(self):
        self.arch = self.arch.lower()
        self.losses = tuple(l.lower() for l in self.losses)
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; choose from {ARCHS}")
        if not self.losses:
            raise ConfigurationError("losses must be non-empty")
        for loss in self.losses:
            if loss not in LOSSES:
                raise ConfigurationError(f"unknown loss {loss!r}; choose from {LOSSES}")
        if "perceptual" in self.losses and "adversarial" not in self.losses:
            raise ConfigurationError(
                "perceptual loss needs an adversarial companion "
                "(perceptual-only surrogates produce unusable quality)")
        if self.channels is None:
            self.channels = DEFAULT_CHANNELS[self.arch]

    @property
    def key(self) -> str:
        return f"{self.arch}:{'+'.join(sorted(self.losses))}"

    @property
    def is_white_box(self) -> bool:
        # UNet + plain L2 mirrors the proxy used in the adversarial stage
        return self.arch == "unet" and self.losses == ("l2",)

    def to_dict(self) -> dict:
        return {"arch": self.arch, "losses": list(self.losses),
                "channels": self.channels, "schedule": self.schedule.to_dict()}


def build_surrogate_net(cfg: AttackConfig, channels_img: int) -> torch.nn.Module:
    base = max(cfg.channels // 4, 4)
    if cfg.arch == "cnet":
        return CNet(channels_img, channels_img, channels=cfg.channels)
    if cfg.arch == "res9":
        return ResnetGenerator(channels_img, channels_img, base=base, n_blocks=9)
    if cfg.arch == "res16":
        return ResnetGenerator(channels_img, channels_img, base=base, n_blocks=16)
    return UNetGenerator(channels_img, channels_img, base=base)


@dataclass
class SurrogateModel:
    """Trained attacker network plus its config and fidelity vs B'."""

    net: torch.nn.Module
    cfg: AttackConfig
    fidelity: dict = field(default_factory=dict)

    @property
    def checkpoint_id(self) -> str:
        return state_hash(self.net)

    def __call__(self, images: ImageBatch) -> ImageBatch:
        self.net.eval()
        outs = []
        x = to_tensor(images)
        with torch.no_grad():
            for i in range(0, x.shape[0], 32):
                outs.append(self.net(x[i:i + 32]))
        out = to_batch(torch.cat(outs, dim=0), domain="Bdoubleprime")
        out.provenance = {"sm_checkpoint": self.checkpoint_id,
                          "attack": self.cfg.to_dict()}
        return out


def train_surrogate(cfg: AttackConfig, pairs: tuple[ImageBatch, ImageBatch],
                    out_dir: Path | None = None) -> SurrogateModel:
    """Fit the surrogate to (A, B') with the configured loss combination.

    Learning rate is constant for the first half of the epochs, then decays
    linearly to zero (the attacker-side convention).
    """
    a, bp = pairs
    if a.shape != bp.shape:
        raise ConfigurationError("attack pairs must be aligned")
    sched = cfg.schedule
    seeded(sched.seed)
    channels_img = a.shape[1]
    net = init_weights(build_surrogate_net(cfg, channels_img))
    disc = percep = opt_d = None
    if "adversarial" in cfg.losses:
        disc = init_weights(PatchDiscriminator(channels_img, base=16))
        opt_d = torch.optim.Adam(disc.parameters(), sched.lr, betas=sched.betas)
    if "perceptual" in cfg.losses:
        percep = PerceptualFeatures(channels_img, seed=0xA77C)  # attacker's own
    a_t, bp_t = to_tensor(a), to_tensor(bp)
    rng = np.random.default_rng(np.random.SeedSequence([sched.seed, 0x5A5A]))
    net.train()
    opt = torch.optim.Adam(net.parameters(), sched.lr, betas=sched.betas)
    metrics = MetricsWriter(out_dir and Path(out_dir) / "metrics_surrogate.jsonl")
    n = len(a)
    half = max(sched.epochs // 2, 1)
    for epoch in range(sched.epochs):
        scale = 1.0 if epoch < half else 1.0 - (epoch - half) / max(sched.epochs - half, 1)
        for group in opt.param_groups:
            group["lr"] = sched.lr * scale
        total, count = 0.0, 0
        for idx in _epoch_batches(rng, n, sched.batch_size):
            x, y = a_t[idx], bp_t[idx]
            out = net(x)
            if disc is not None:
                d_loss = discriminator_loss(disc(y), disc(out.detach()))
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
            loss = out.new_zeros(())
            if "l1" in cfg.losses:
                loss = loss + PIXEL_WEIGHT * torch.nn.functional.l1_loss(out, y)
            if "l2" in cfg.losses:
                loss = loss + PIXEL_WEIGHT * torch.nn.functional.mse_loss(out, y)
            if "perceptual" in cfg.losses:
                loss = loss + PERCEPTUAL_WEIGHT * torch.nn.functional.mse_loss(
                    percep(out), percep(y))
            if "adversarial" in cfg.losses:
                loss = loss + ADVERSARIAL_WEIGHT * adversarial_generator_loss(disc(out))
            opt.zero_grad()
            loss.backward()
            opt.step()
            _check_finite(loss.item(), {"where": f"surrogate {cfg.key} epoch {epoch}"})
            total += loss.item()
            count += 1
        metrics.write({"epoch": epoch, "loss": total / count, "lr": sched.lr * scale})
    sm = SurrogateModel(net, cfg)
    imitation = sm(a)
    sm.fidelity = {"psnr": float(np.mean(psnr(imitation, bp))),
                   "ssim": float(np.mean(ssim(imitation, bp)))}
    return sm


def generate_Bpp(sm: SurrogateModel, inputs: ImageBatch) -> ImageBatch:
    """Run the surrogate over domain-A inputs; output carries its provenance."""
    return sm(inputs)


def save_surrogate(sm: SurrogateModel, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(sm.net.state_dict(), directory / "weights.pt")
    meta = {"attack": sm.cfg.to_dict(), "fidelity": sm.fidelity,
            "checkpoint_id": sm.checkpoint_id}
    (directory / "surrogate.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_surrogate(directory: Path, channels_img: int = 1) -> SurrogateModel:
    directory = Path(directory)
    meta = json.loads((directory / "surrogate.json").read_text())
    att = meta["attack"]
    sched = TrainSchedule(**{k: tuple(v) if k == "betas" else v
                             for k, v in att["schedule"].items()})
    cfg = AttackConfig(arch=att["arch"], losses=tuple(att["losses"]),
                       channels=att["channels"], schedule=sched)
    net = build_surrogate_net(cfg, channels_img)
    net.load_state_dict(torch.load(directory / "weights.pt", map_location="cpu"))
    return SurrogateModel(net, cfg, meta["fidelity"])


# ---------------------------------------------------------------------------
# Eq.-(2)-style additive sanity surrogate
# ---------------------------------------------------------------------------

def additive_surrogate_outputs(b: ImageBatch, b_prime: ImageBatch) -> ImageBatch:
    """The skip-connection surrogate: output = ground truth + embedding residual.

    This is the simplest perfect surrogate (it *is* B' rearranged); it needs
    zero training and wires the whole verification pipeline for sanity tests.
    """
    residual = b_prime.data - b.data
    out = np.clip(b.data + residual, 0.0, 1.0)
    batch = ImageBatch(out, b.value_range, "Bdoubleprime")
    batch.provenance = {"sm_checkpoint": "additive-identity", "attack": "skip-connection"}
    return batch


# ---------------------------------------------------------------------------
# attack sweeps
# ---------------------------------------------------------------------------

def watermarked_outputs(bundle: NetworkBundle, data, split: str,
                        wm: WatermarkSpec) -> ImageBatch:
    """What the attacker harvests from the protected service for a split."""
    a, b = data.split(split)
    if bundle.H is not None:
        return bundle.embed(b, wm)
    return bundle.run_task(a).with_domain("Bprime")


def train_attack_cells(bundle: NetworkBundle, configs, data, wm: WatermarkSpec,
                       reuse: dict | None = None) -> dict:
    """Train one surrogate per attack config on the attacker split."""
    a_att, _ = data.split("attacker_train")
    bp_att = watermarked_outputs(bundle, data, "attacker_train", wm)
    cells = dict(reuse or {})
    for cfg in configs:
        if cfg.key in cells:
            continue
        cells[cfg.key] = train_surrogate(cfg, (a_att, bp_att))
    return cells


def evaluate_attack_matrix(bundle: NetworkBundle, cells: dict, data,
                           wm: WatermarkSpec, mode: str = "both",
                           out_dir: Path | None = None,
                           matrix_name: str = "attack_matrix") -> dict:
    """Score every trained cell on held-out surrogate outputs.

    Produces ``attack_matrix.json`` (cells keyed by arch x loss combo) and a
    CSV mirror when ``out_dir`` is given.
    """
    a_test, _ = data.split("test")
    bp_test = watermarked_outputs(bundle, data, "test", wm)
    results = {}
    for key, sm in sorted(cells.items()):
        b_pp = generate_Bpp(sm, a_test)
        report = verdict(bundle, b_pp, wm, mode=mode)
        results[key] = {
            "sr_nc": report.sr_nc,
            "sr_c": report.sr_c,
            "mean_nc": float(np.mean([r["nc"] for r in report.per_image])),
            "white_box": sm.cfg.is_white_box,
            "surrogate_fidelity_psnr": float(np.mean(psnr(b_pp, bp_test))),
            "surrogate_fidelity_ssim": float(np.mean(ssim(b_pp, bp_test))),
            "train_fidelity": sm.fidelity,
            "sm_checkpoint": sm.checkpoint_id,
            "attack": sm.cfg.to_dict(),
        }
    matrix = {"cells": results, "mode": mode,
              "extractor_provenance": bundle.provenance,
              "threshold_nc": 0.95}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{matrix_name}.json").write_text(
            json.dumps(matrix, indent=2, sort_keys=True))
        lines = ["cell,sr_nc,sr_c,mean_nc,fidelity_psnr,white_box"]
        for key, row in sorted(results.items()):
            sr_c = "" if row["sr_c"] is None else f"{row['sr_c']:.4f}"
            lines.append(f"{key},{row['sr_nc']:.4f},{sr_c},{row['mean_nc']:.4f},"
                         f"{row['surrogate_fidelity_psnr']:.2f},{row['white_box']}")
        (out_dir / f"{matrix_name}.csv").write_text("\n".join(lines) + "\n")
    return matrix


def run_attack_matrix(bundle: NetworkBundle, configs, data, wm: WatermarkSpec,
                      mode: str = "both", out_dir: Path | None = None,
                      reuse: dict | None = None) -> dict:
    """Train the configured cells and evaluate them against ``bundle``."""
    cells = train_attack_cells(bundle, configs, data, wm, reuse=reuse)
    matrix = evaluate_attack_matrix(bundle, cells, data, wm, mode=mode, out_dir=out_dir)
    matrix["_cells"] = cells
    return matrix


def overwrite_attack(protected: NetworkBundle, attacker: NetworkBundle,
                     attacker_wm: WatermarkSpec, data, wm: WatermarkSpec,
                     cfg: AttackConfig | None = None, mode: str = "nc",
                     ) -> tuple[VerificationReport, dict]:
    """Overwriting attack: re-watermark B' with the attacker's embedder, then
    train a surrogate on the overwritten pairs and verify on its outputs.

    Returns the protector-side report and the surrogate fidelity record.
    """
    from .training import validate_watermarks_disjoint
    validate_watermarks_disjoint([wm, attacker_wm], "protector/attacker watermarks")
    cfg = cfg or AttackConfig(arch="unet", losses=("l2",))
    a_att, _ = data.split("attacker_train")
    bp_att = watermarked_outputs(protected, data, "attacker_train", wm)
    bp_att_ow = attacker.embed(bp_att, attacker_wm)
    sm = train_surrogate(cfg, (a_att, bp_att_ow))
    a_test, _ = data.split("test")
    b_pp = generate_Bpp(sm, a_test)
    report = verdict(protected, b_pp, wm, mode=mode)
    bp_test_ow = attacker.embed(watermarked_outputs(protected, data, "test", wm),
                                attacker_wm)
    fidelity = {"psnr": float(np.mean(psnr(b_pp, bp_test_ow))),
                "ssim": float(np.mean(ssim(b_pp, bp_test_ow))),
                "sm_checkpoint": sm.checkpoint_id}
    return report, fidelity
