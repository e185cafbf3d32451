"""Experiment recipes: one function per desk-scale reproduction.

Every recipe consumes an ``ExperimentConfig``, writes the merged effective
config plus all artifacts (checkpoints, metrics JSONL, reports) into one run
directory, and is deterministic given the config.  Recipes with
prerequisites (a trained bundle, trained attack cells) name the recipe that
produces them in their error message.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigurationError
from .losses import LossWeights
from .media import (WatermarkSpec, make_watermark, psnr, ssim,
                    synthesize_clean_images)
from .pipeline import (default_proxy_config, self_watermarked,
                       train_baseline_task_model, train_multi_watermarked,
                       train_overwrite_robust, train_protected)
from .spatial import SpreadSpectrumConfig, ss_embed, ss_extract
from .surrogate import (AttackConfig, evaluate_attack_matrix, load_surrogate,
                        overwrite_attack, save_surrogate, train_attack_cells,
                        watermarked_outputs)
from .training import (TrainSchedule, blank_deviation, build_bundle,
                       load_bundle, train_multi_watermark)
from .verify import diagnostics, nc_batch, verdict


def _write_json(path: Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


def _sched(s: TrainSchedule, seed: int, **kw) -> TrainSchedule:
    return replace(s, seed=seed, **kw)


def _attack_configs(cfg: ExperimentConfig):
    out = []
    for i, att in enumerate(cfg.attacks):
        out.append(AttackConfig(arch=att["arch"], losses=tuple(att["losses"]),
                                channels=att.get("channels"),
                                schedule=_sched(cfg.schedules.surrogate,
                                                cfg.seed + 10 + i)))
    return out


def _load_prereq_bundle(cfg: ExperimentConfig, recipe: str, stage: str = "adversarial"):
    if not cfg.bundle_dir:
        raise ConfigurationError(
            f"{recipe} requires a trained bundle: run `wmctl run-recipe table1` "
            f"first and pass bundle_dir=<its output directory>")
    path = Path(cfg.bundle_dir) / "checkpoints" / stage
    if not path.exists():
        raise ConfigurationError(
            f"{recipe}: no {stage} checkpoint under {cfg.bundle_dir}; "
            f"run `wmctl run-recipe table1` to produce it")
    return load_bundle(path)


def _cells_for(cfg: ExperimentConfig, bundle, data, wm, configs, out_dir: Path):
    """Load reusable attack cells, train the missing ones, persist them all."""
    cells = {}
    if cfg.cells_dir:
        root = Path(cfg.cells_dir)
        for sub in sorted(root.glob("*/surrogate.json")):
            sm = load_surrogate(sub.parent, channels_img=cfg.dataset.channels)
            cells[sm.cfg.key] = sm
    cells = train_attack_cells(bundle, configs, data, wm, reuse=cells)
    for key, sm in cells.items():
        save_surrogate(sm, out_dir / "cells" / key.replace(":", "_"))
    return cells


def _embedding_report(bundle, data, wm, out_dir: Path, mode: str = "both"):
    a_test, b_test = data.split("test")
    bp = bundle.embed(b_test, wm) if bundle.H is not None else bundle.run_task(a_test)
    report = verdict(bundle, bp, wm, mode=mode, fidelity_ref=b_test)
    diag = diagnostics(b_test, bp, out_dir=out_dir / "diagnostics")
    dev_clean = np.concatenate([blank_deviation(bundle, a_test, wm),
                                blank_deviation(bundle, b_test, wm)])
    summary = {
        "psnr": float(np.mean(diag["psnr"])),
        "ssim": float(np.mean(diag["ssim"])),
        "hist_l1": diag["hist_l1"],
        "mean_nc": float(np.mean([r["nc"] for r in report.per_image])),
        "sr_nc": report.sr_nc,
        "sr_c": report.sr_c,
        "tau_blank": bundle.tau_blank,
        "clean_dev_mean": float(dev_clean.mean()),
        "clean_dev_max": float(dev_clean.max()),
        "clean_below_tau_fraction": float((dev_clean < bundle.tau_blank).mean()),
    }
    report.save(out_dir, "report_per_image")
    return summary


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------

def recipe_table1(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Two-stage protection run + embedding/extracting quality report."""
    data = cfg.dataset.build()
    wm = cfg.watermark.build(cfg.dataset.size, cfg.dataset.channels)
    res = train_protected(
        data, wm, cfg.weights,
        sched_initial=_sched(cfg.schedules.initial, cfg.seed),
        sched_adversarial=_sched(cfg.schedules.adversarial, cfg.seed),
        proxy_cfg=default_proxy_config(seed=cfg.seed,
                                       epochs=cfg.schedules.surrogate.epochs),
        seed=cfg.seed, width_multiplier=cfg.width_multiplier, out_dir=out_dir)
    save_surrogate(res.proxy, out_dir / "proxy")
    summary = _embedding_report(res.bundle, data, wm, out_dir)
    return {"table": "table1", "row": summary}


def recipe_table2(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Attack matrix against the adversarially trained extractor."""
    bundle = _load_prereq_bundle(cfg, "table2", "adversarial")
    data = cfg.dataset.build()
    wm = cfg.watermark.build(cfg.dataset.size, cfg.dataset.channels)
    cells = _cells_for(cfg, bundle, data, wm, _attack_configs(cfg), out_dir)
    matrix = evaluate_attack_matrix(bundle, cells, data, wm, mode="both",
                                    out_dir=out_dir)
    return {"table": "table2", "cells": matrix["cells"]}


def recipe_table2_dagger(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Same matrix evaluated with the pre-adversarial extractor (NC only)."""
    bundle = _load_prereq_bundle(cfg, "table2_dagger", "initial")
    data = cfg.dataset.build()
    wm = cfg.watermark.build(cfg.dataset.size, cfg.dataset.channels)
    cells = _cells_for(cfg, bundle, data, wm, _attack_configs(cfg), out_dir)
    matrix = evaluate_attack_matrix(bundle, cells, data, wm, mode="nc",
                                    out_dir=out_dir, matrix_name="attack_matrix_dagger")
    return {"table": "table2_dagger", "cells": matrix["cells"]}


def recipe_table4(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Watermark overwriting: non-robust vs overwrite-robust extractor."""
    non_robust = _load_prereq_bundle(cfg, "table4", "adversarial")
    data = cfg.dataset.build()
    size, channels = cfg.dataset.size, cfg.dataset.channels
    wm = cfg.watermark.build(size, channels)
    pool_wms = [WatermarkSpec.from_native(make_watermark(s, size, channels), size)
                for s in cfg.options.pool_seeds]
    robust_res, pool_bundle = train_overwrite_robust(
        data, wm, pool_wms, cfg.weights,
        sched_initial=_sched(cfg.schedules.initial, cfg.seed),
        sched_adversarial=_sched(cfg.schedules.adversarial, cfg.seed),
        sched_pool=_sched(cfg.schedules.initial, cfg.seed + 101,
                          epochs=max(cfg.schedules.initial.epochs * 4 // 5, 1)),
        proxy_cfg=default_proxy_config(seed=cfg.seed,
                                       epochs=cfg.schedules.surrogate.epochs),
        seed=cfg.seed, width_multiplier=cfg.width_multiplier,
        out_dir=out_dir / "robust")
    robust = robust_res.bundle

    attacker_wms = [WatermarkSpec.from_native(make_watermark(s, size, channels), size)
                    for s in cfg.options.attacker_seeds]
    attacker_bundle = build_bundle(channels=channels,
                                   width_multiplier=cfg.width_multiplier,
                                   n_classes=len(attacker_wms) + 1,
                                   seed=cfg.seed + 777)
    if len(attacker_wms) >= 2:
        train_multi_watermark(attacker_bundle, data, attacker_wms, cfg.weights,
                              _sched(cfg.schedules.initial, cfg.seed + 777,
                                     epochs=max(cfg.schedules.initial.epochs * 4 // 5, 1)),
                              out_dir=out_dir / "attacker_embedder")
    else:
        from .training import train_initial_stage
        train_initial_stage(attacker_bundle, data, attacker_wms, cfg.weights,
                            _sched(cfg.schedules.initial, cfg.seed + 777,
                                   epochs=max(cfg.schedules.initial.epochs * 4 // 5, 1)),
                            out_dir=out_dir / "attacker_embedder")

    sm_cfg = AttackConfig(arch="unet", losses=("l2",),
                          schedule=_sched(cfg.schedules.surrogate, cfg.seed + 55))
    rows = {}
    for label, bundle in (("non_robust", non_robust), ("robust", robust)):
        per_wm = {}
        # the "no overwriting" column: a plain surrogate on this bundle's B'
        a_att, _ = data.split("attacker_train")
        from .surrogate import train_surrogate, generate_Bpp
        plain_sm = train_surrogate(sm_cfg, (a_att, watermarked_outputs(
            bundle, data, "attacker_train", wm)))
        a_test, _ = data.split("test")
        plain_report = verdict(bundle, generate_Bpp(plain_sm, a_test), wm, mode="nc")
        per_wm["none"] = {"sr_nc": plain_report.sr_nc,
                          "fidelity_psnr": plain_sm.fidelity["psnr"]}
        for seed, attacker_wm in zip(cfg.options.attacker_seeds, attacker_wms):
            report, fidelity = overwrite_attack(bundle, attacker_bundle, attacker_wm,
                                                data, wm, cfg=sm_cfg, mode="nc")
            per_wm[f"wm{seed}"] = {"sr_nc": report.sr_nc,
                                   "fidelity_psnr": fidelity["psnr"]}
        rows[label] = per_wm
    return {"table": "table4", "rows": rows}


def recipe_table5_lambda(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Coupling-weight sweep: embedding quality vs extraction at each lambda."""
    data = cfg.dataset.build()
    wm = cfg.watermark.build(cfg.dataset.size, cfg.dataset.channels)
    rows = []
    for lam in cfg.options.lambdas:
        weights = replace(cfg.weights, lam=float(lam))
        res = train_protected(data, wm, weights,
                              sched_initial=_sched(cfg.schedules.initial, cfg.seed),
                              seed=cfg.seed, width_multiplier=cfg.width_multiplier,
                              adversarial=False,
                              out_dir=out_dir / f"lambda_{lam}")
        summary = _embedding_report(res.bundle, data, wm, out_dir / f"lambda_{lam}",
                                    mode="nc")
        rows.append({"lambda": float(lam), **summary})
    lines = ["lambda,psnr,ssim,mean_nc,sr_nc"]
    for r in rows:
        lines.append(f"{r['lambda']},{r['psnr']:.2f},{r['ssim']:.4f},"
                     f"{r['mean_nc']:.4f},{r['sr_nc']:.4f}")
    (out_dir / "table5.csv").write_text("\n".join(lines) + "\n")
    return {"table": "table5_lambda", "rows": rows}


def recipe_table6_size(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Watermark-size sweep: native sizes padded up to the cover size."""
    data = cfg.dataset.build()
    size, channels = cfg.dataset.size, cfg.dataset.channels
    sizes = sorted({min(int(s), size[0]) for s in cfg.options.wm_sizes} | {size[0]})
    rows = []
    for s in sizes:
        wm = WatermarkSpec.from_native(make_watermark(cfg.watermark.seed, (s, s),
                                                      channels), size,
                                       cfg.watermark.pad_value)
        res = train_protected(data, wm, cfg.weights,
                              sched_initial=_sched(cfg.schedules.initial, cfg.seed),
                              seed=cfg.seed, width_multiplier=cfg.width_multiplier,
                              adversarial=False, out_dir=out_dir / f"size_{s}")
        summary = _embedding_report(res.bundle, data, wm, out_dir / f"size_{s}",
                                    mode="nc")
        rows.append({"size": s, **summary})
    return {"table": "table6_size", "rows": rows}


def recipe_table7_multi(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """K watermarks through one embedder/extractor pair."""
    data = cfg.dataset.build()
    size, channels = cfg.dataset.size, cfg.dataset.channels
    seeds = list(cfg.options.multi_seeds)[:cfg.options.k]
    if len(seeds) < cfg.options.k:
        raise ConfigurationError("options.multi_seeds must provide k seeds")
    wms = [WatermarkSpec.from_native(make_watermark(s, size, channels), size)
           for s in seeds]
    res = train_multi_watermarked(
        data, wms, cfg.weights,
        sched_initial=_sched(cfg.schedules.initial, cfg.seed),
        sched_adversarial=_sched(cfg.schedules.adversarial, cfg.seed),
        proxy_cfg=default_proxy_config(seed=cfg.seed,
                                       epochs=cfg.schedules.surrogate.epochs),
        seed=cfg.seed, width_multiplier=cfg.width_multiplier, out_dir=out_dir)
    bundle = res.bundle
    a_test, b_test = data.split("test")
    rows = []
    for k, (seed, wm) in enumerate(zip(seeds, wms)):
        bp = bundle.embed(b_test, wm)
        report = verdict(bundle, bp, wm, mode="both", expected_class=k + 1,
                         fidelity_ref=b_test)
        rows.append({"watermark": seed,
                     "psnr": float(np.mean([r["psnr"] for r in report.per_image])),
                     "ssim": float(np.mean([r["ssim"] for r in report.per_image])),
                     "mean_nc": float(np.mean([r["nc"] for r in report.per_image])),
                     "sr_nc": report.sr_nc, "sr_c": report.sr_c})
    clean_probs = np.concatenate([bundle.classify(bundle.extract(a_test)),
                                  bundle.classify(bundle.extract(b_test))])
    clean_acc = float((np.argmax(clean_probs, axis=1) == 0).mean())
    return {"table": "table7_multi", "rows": rows,
            "clean_class0_accuracy": clean_acc, "tau_blank": bundle.tau_blank}


def recipe_table8_self(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Self-watermarked model vs an identically trained watermark-free one."""
    data = cfg.dataset.build()
    wm = cfg.watermark.build(cfg.dataset.size, cfg.dataset.channels)
    res = self_watermarked(
        data, wm, cfg.weights,
        sched_joint=_sched(cfg.schedules.task, cfg.seed),
        sched_adversarial=_sched(cfg.schedules.adversarial, cfg.seed),
        proxy_cfg=default_proxy_config(seed=cfg.seed,
                                       epochs=cfg.schedules.surrogate.epochs),
        seed=cfg.seed, width_multiplier=cfg.width_multiplier, out_dir=out_dir)
    baseline = train_baseline_task_model(
        data, seed=cfg.seed, width_multiplier=cfg.width_multiplier,
        sched=_sched(cfg.schedules.task, cfg.seed), out_dir=out_dir / "baseline")
    a_test, b_test = data.split("test")
    b_star = res.bundle.run_task(a_test)
    import torch
    from .networks import to_tensor, to_batch
    with torch.no_grad():
        baseline.eval()
        b_plain = to_batch(baseline(to_tensor(a_test)), domain="B")
    report = verdict(res.bundle, b_star, wm, mode="both")
    row = {
        "task_psnr_watermarked": float(np.mean(psnr(b_star, b_test))),
        "task_psnr_baseline": float(np.mean(psnr(b_plain, b_test))),
        "task_ssim_watermarked": float(np.mean(ssim(b_star, b_test))),
        "task_ssim_baseline": float(np.mean(ssim(b_plain, b_test))),
        "mean_nc": float(np.mean([r["nc"] for r in report.per_image])),
        "sr_nc": report.sr_nc, "sr_c": report.sr_c,
        "tau_blank": res.bundle.tau_blank,
    }
    return {"table": "table8_self", "row": row}


def recipe_channel_sweep(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """CNet capacity sweep: extraction success vs surrogate fidelity."""
    bundle = _load_prereq_bundle(cfg, "channel_sweep", "adversarial")
    data = cfg.dataset.build()
    wm = cfg.watermark.build(cfg.dataset.size, cfg.dataset.channels)
    configs = [AttackConfig(arch="cnet", losses=("l2",), channels=int(w),
                            schedule=_sched(cfg.schedules.surrogate, cfg.seed + 30 + i))
               for i, w in enumerate(cfg.options.widths)]
    cells = {}
    for cfg_att in configs:  # distinct widths share the arch:loss key, keep per-width
        sm = train_attack_cells(bundle, [cfg_att], data, wm)[cfg_att.key]
        cells[f"cnet_{cfg_att.channels}"] = sm
        save_surrogate(sm, out_dir / "cells" / f"cnet_{cfg_att.channels}")
    matrix = evaluate_attack_matrix(bundle, cells, data, wm, mode="both",
                                    out_dir=out_dir, matrix_name="channel_sweep")
    rows = [{"width": int(k.split("_")[1]), **{kk: vv for kk, vv in v.items()
                                               if kk in ("sr_nc", "sr_c", "mean_nc",
                                                         "surrogate_fidelity_psnr")}}
            for k, v in matrix["cells"].items()]
    rows.sort(key=lambda r: r["width"])
    return {"table": "channel_sweep", "rows": rows}


def recipe_ss_baseline(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Spread-spectrum round trip: fidelity and recovery at desk scale."""
    opt = cfg.options
    covers = synthesize_clean_images(cfg.dataset.seed, opt.n_covers, cfg.dataset.size)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB175]))
    bits = rng.integers(0, 2, opt.n_bits)
    ss_cfg = SpreadSpectrumConfig(alpha=opt.alpha, block_size=opt.block_size,
                                  n_bits=opt.n_bits, pattern_seed=cfg.seed)
    wmk, clip_fraction = ss_embed(covers, bits, ss_cfg)
    rec, _ = ss_extract(wmk, ss_cfg)
    base, _ = ss_extract(covers, ss_cfg)
    row = {
        "alpha": opt.alpha, "n_bits": opt.n_bits, "n_covers": opt.n_covers,
        "psnr_mean": float(np.mean(psnr(covers, wmk))),
        "psnr_min": float(np.min(psnr(covers, wmk))),
        "ssim_mean": float(np.mean(ssim(covers, wmk))),
        "bit_accuracy": float((rec == bits[None]).mean()),
        "clean_bit_accuracy": float((base == bits[None]).mean()),
        "clip_fraction_max": float(clip_fraction.max()),
    }
    return {"table": "ss_baseline", "row": row}


RECIPE_FUNCS = {
    "table1": recipe_table1,
    "table2": recipe_table2,
    "table2_dagger": recipe_table2_dagger,
    "table4": recipe_table4,
    "table5_lambda": recipe_table5_lambda,
    "table6_size": recipe_table6_size,
    "table7_multi": recipe_table7_multi,
    "table8_self": recipe_table8_self,
    "channel_sweep": recipe_channel_sweep,
    "ss_baseline": recipe_ss_baseline,
}


def run_recipe(cfg: ExperimentConfig, out_dir: Path | None = None) -> Path:
    """Execute a recipe; returns the run directory containing all artifacts."""
    out_dir = Path(out_dir or cfg.out_dir or f"runs/{cfg.recipe}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(cfg.to_yaml())
    result = RECIPE_FUNCS[cfg.recipe](cfg, out_dir)
    _write_json(out_dir / "report.json", result)
    return out_dir
