"""End-to-end training flows composing the stages with the proxy surrogate.

These are the entry points recipes and tests use: full two-stage protection,
the multi-watermark variant, the self-watermarked variant, and overwrite-
robust training (noise-layer augmentation with a pool embedder).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .losses import LossWeights
from .media import WatermarkSpec
from .surrogate import AttackConfig, generate_Bpp, train_surrogate, watermarked_outputs
from .training import (NetworkBundle, TrainSchedule, build_bundle,
                       build_task_model, make_overwrite_noise_layer,
                       train_adversarial_stage, train_initial_stage,
                       train_multi_watermark, train_self_watermarked,
                       train_task_model, validate_watermarks_disjoint)


def default_proxy_config(seed: int = 0, epochs: int = 40) -> AttackConfig:
    """The protector's in-house proxy: UNet + L2 (the white-box reference)."""
    return AttackConfig(arch="unet", losses=("l2",),
                        schedule=TrainSchedule(epochs=epochs, batch_size=16,
                                               lr=1e-4, seed=seed))


@dataclass
class PipelineResult:
    """Trained bundle plus the pre-adversarial snapshot and the proxy cell."""

    bundle: NetworkBundle
    initial_bundle: NetworkBundle
    proxy: object | None = None

    @property
    def proxy_cell(self) -> dict:
        return {} if self.proxy is None else {self.proxy.cfg.key: self.proxy}


def _proxy_bpp(bundle, data, wms, proxy_cfg, out_dir=None):
    """Train the proxy on protector-split pairs and emit aligned B'' per wm."""
    a_prot, _ = data.split("protector_train")
    proxies, bpps = [], []
    for i, wm in enumerate(wms):
        cfg = proxy_cfg if i == 0 else AttackConfig(
            arch=proxy_cfg.arch, losses=proxy_cfg.losses, channels=proxy_cfg.channels,
            schedule=TrainSchedule(**{**proxy_cfg.schedule.to_dict(),
                                      "betas": proxy_cfg.schedule.betas,
                                      "seed": proxy_cfg.schedule.seed + i}))
        bp_prot = watermarked_outputs(bundle, data, "protector_train", wm)
        proxy = train_surrogate(cfg, (a_prot, bp_prot),
                                out_dir=out_dir and Path(out_dir) / f"proxy_{i}")
        proxies.append(proxy)
        bpps.append(generate_Bpp(proxy, a_prot))
    return proxies, bpps


def train_protected(data, wm: WatermarkSpec, weights: LossWeights | None = None,
                    sched_initial: TrainSchedule | None = None,
                    sched_adversarial: TrainSchedule | None = None,
                    proxy_cfg: AttackConfig | None = None, seed: int = 0,
                    width_multiplier: int = 2, adversarial: bool = True,
                    out_dir: Path | None = None, noise_layer=None) -> PipelineResult:
    """Full protection flow: initial stage, proxy surrogate, adversarial stage."""
    weights = weights or LossWeights()
    sched_initial = sched_initial or TrainSchedule(epochs=50, seed=seed)
    channels = data.targets.shape[1]
    bundle = build_bundle(channels=channels, width_multiplier=width_multiplier,
                          n_classes=2, seed=seed)
    train_initial_stage(bundle, data, wm, weights, sched_initial,
                        out_dir=out_dir, noise_layer=noise_layer)
    initial_snapshot = copy.deepcopy(bundle)
    proxy = None
    if adversarial:
        sched_adversarial = sched_adversarial or TrainSchedule(
            epochs=25, lr=1e-4, seed=seed)
        proxy_cfg = proxy_cfg or default_proxy_config(seed=seed)
        proxies, bpps = _proxy_bpp(bundle, data, [wm], proxy_cfg, out_dir)
        proxy = proxies[0]
        train_adversarial_stage(bundle, data, wm, weights, sched_adversarial,
                                bpps[0], out_dir=out_dir, noise_layer=noise_layer)
    return PipelineResult(bundle, initial_snapshot, proxy)


def train_multi_watermarked(data, wm_set, weights: LossWeights | None = None,
                            sched_initial: TrainSchedule | None = None,
                            sched_adversarial: TrainSchedule | None = None,
                            proxy_cfg: AttackConfig | None = None, seed: int = 0,
                            width_multiplier: int = 2,
                            out_dir: Path | None = None) -> PipelineResult:
    """K watermarks through one H/R pair; C becomes (K+1)-class."""
    weights = weights or LossWeights()
    wms = list(wm_set)
    sched_initial = sched_initial or TrainSchedule(epochs=50, seed=seed)
    sched_adversarial = sched_adversarial or TrainSchedule(epochs=25, lr=1e-4, seed=seed)
    channels = data.targets.shape[1]
    bundle = build_bundle(channels=channels, width_multiplier=width_multiplier,
                          n_classes=len(wms) + 1, seed=seed)
    train_multi_watermark(bundle, data, wms, weights, sched_initial, out_dir=out_dir)
    initial_snapshot = copy.deepcopy(bundle)
    proxy_cfg = proxy_cfg or default_proxy_config(seed=seed)
    proxies, bpps = _proxy_bpp(bundle, data, wms, proxy_cfg, out_dir)
    train_adversarial_stage(bundle, data, wms, weights, sched_adversarial, bpps,
                            out_dir=out_dir)
    result = PipelineResult(bundle, initial_snapshot, proxies[0])
    return result


def self_watermarked(data, wm: WatermarkSpec, weights: LossWeights | None = None,
                     sched_joint: TrainSchedule | None = None,
                     sched_adversarial: TrainSchedule | None = None,
                     proxy_cfg: AttackConfig | None = None, seed: int = 0,
                     width_multiplier: int = 2, adversarial: bool = True,
                     out_dir: Path | None = None) -> PipelineResult:
    """Joint task+watermark training of the target model itself (no barrier)."""
    weights = weights or LossWeights()
    sched_joint = sched_joint or TrainSchedule(epochs=50, seed=seed)
    channels = data.targets.shape[1]
    bundle = build_bundle(channels=channels, width_multiplier=width_multiplier,
                          n_classes=2, seed=seed, with_embedder=False)
    m_net = build_task_model(channels, width_multiplier, seed=seed + 1)
    train_self_watermarked(m_net, bundle, data, wm, weights, sched_joint,
                           out_dir=out_dir)
    initial_snapshot = copy.deepcopy(bundle)
    proxy = None
    if adversarial:
        sched_adversarial = sched_adversarial or TrainSchedule(
            epochs=25, lr=1e-4, seed=seed)
        proxy_cfg = proxy_cfg or default_proxy_config(seed=seed)
        proxies, bpps = _proxy_bpp(bundle, data, [wm], proxy_cfg, out_dir)
        proxy = proxies[0]
        train_adversarial_stage(bundle, data, wm, weights, sched_adversarial,
                                bpps[0], out_dir=out_dir)
    return PipelineResult(bundle, initial_snapshot, proxy)


def train_baseline_task_model(data, seed: int = 0, width_multiplier: int = 2,
                              sched: TrainSchedule | None = None,
                              out_dir: Path | None = None):
    """Watermark-free target model trained identically to the self-wm run."""
    sched = sched or TrainSchedule(epochs=50, seed=seed)
    channels = data.targets.shape[1]
    m_net = build_task_model(channels, width_multiplier, seed=seed + 1)
    return train_task_model(m_net, data, sched, out_dir=out_dir)


def train_overwrite_robust(data, wm: WatermarkSpec, pool_wms,
                           weights: LossWeights | None = None,
                           sched_initial: TrainSchedule | None = None,
                           sched_adversarial: TrainSchedule | None = None,
                           sched_pool: TrainSchedule | None = None,
                           proxy_cfg: AttackConfig | None = None, seed: int = 0,
                           width_multiplier: int = 2, out_dir: Path | None = None,
                           pool_result: PipelineResult | None = None
                           ) -> tuple[PipelineResult, NetworkBundle]:
    """Overwrite-robust protection: train with a re-watermarking noise layer.

    First trains (or reuses) a multi-watermark pool embedder on the
    overwriting pool, then runs the two-stage protection with every B'
    additionally re-watermarked before extraction; pool-only-watermarked
    clean images must still map to the blank.
    """
    weights = weights or LossWeights()
    pool_wms = list(pool_wms)
    if len(pool_wms) < 2:
        raise ConfigurationError("overwriting pool needs at least 2 watermarks")
    validate_watermarks_disjoint([wm] + pool_wms, "target/pool watermarks")
    if pool_result is None:
        sched_pool = sched_pool or TrainSchedule(epochs=40, seed=seed + 101)
        pool_bundle = build_bundle(channels=data.targets.shape[1],
                                   width_multiplier=width_multiplier,
                                   n_classes=len(pool_wms) + 1, seed=seed + 101)
        train_multi_watermark(pool_bundle, data, pool_wms, weights, sched_pool,
                              out_dir=out_dir and Path(out_dir) / "pool")
    else:
        pool_bundle = pool_result.bundle
    noise = make_overwrite_noise_layer(pool_bundle, pool_wms, seed=seed)
    result = train_protected(data, wm, weights, sched_initial, sched_adversarial,
                             proxy_cfg, seed=seed,
                             width_multiplier=width_multiplier,
                             adversarial=True, out_dir=out_dir, noise_layer=noise)
    return result, pool_bundle
