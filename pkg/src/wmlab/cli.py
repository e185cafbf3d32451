"""wmctl: command-line orchestrator for the watermarking lab.

Subcommands: synth-data, train, attack, verify, report, ss-embed,
ss-extract, run-recipe.  Exit codes: 0 success, 2 configuration/usage
error, 1 runtime failure; errors are emitted as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigurationError, ShapeMismatchError


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _parse_size(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise ConfigurationError(f"bad size {text!r}; use H or HxW")


def cmd_synth_data(args) -> int:
    from .media import StripeTaskConfig, save_dataset, synthesize_task
    size = _parse_size(args.size)
    counts = tuple(int(c) for c in args.split.split(",")) if args.split else None
    cfg = StripeTaskConfig(stripe_amplitude=args.stripe_amplitude,
                           channels=args.channels)
    ds = synthesize_task(args.seed, args.n, size, cfg=cfg, split_counts=counts)
    save_dataset(ds, Path(args.out))
    print(f"dataset: {args.n} pairs of {size[0]}x{size[1]} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    from .config import ExperimentConfig, apply_overrides, micro_preset
    from .recipes import run_recipe
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.micro:
        cfg = micro_preset(cfg)
    cfg = apply_overrides(cfg, [f"recipe=table1"] + list(args.set or ()))
    out = run_recipe(cfg, args.out)
    print(f"trained bundle + report under {out}")
    return 0


def cmd_attack(args) -> int:
    from .media import load_dataset, WatermarkSpec, load_image
    from .surrogate import AttackConfig, run_attack_matrix
    from .training import TrainSchedule, load_bundle
    bundle = load_bundle(Path(args.bundle))
    data = load_dataset(Path(args.data))
    wm_img = load_image(Path(args.watermark))
    wm = WatermarkSpec.from_native(wm_img, data.targets.shape[2:])
    losses = tuple(args.losses.split("+"))
    cfg = AttackConfig(arch=args.arch, losses=losses, channels=args.channels,
                       schedule=TrainSchedule(epochs=args.epochs, batch_size=16,
                                              lr=1e-4, seed=args.seed))
    matrix = run_attack_matrix(bundle, [cfg], data, wm,
                               mode="both" if bundle.C is not None else "nc",
                               out_dir=Path(args.out))
    cell = matrix["cells"][cfg.key]
    print(f"{cfg.key}: SR_NC={cell['sr_nc']:.2%} SR_C="
          f"{'n/a' if cell['sr_c'] is None else format(cell['sr_c'], '.2%')} "
          f"fidelity {cell['surrogate_fidelity_psnr']:.2f} dB -> {args.out}")
    return 0


def cmd_verify(args) -> int:
    from .media import WatermarkSpec, load_batch, load_image
    from .training import load_bundle
    from .verify import verdict
    bundle = load_bundle(Path(args.extractor))
    images = load_batch(Path(args.images))
    wm_img = load_image(Path(args.watermark))
    wm = WatermarkSpec.from_native(wm_img, images.shape[2:])
    mode = args.mode
    if mode == "auto":
        mode = "both" if bundle.C is not None else "nc"
    report = verdict(bundle, images, wm, mode=mode)
    out = Path(args.out) if args.out else Path(args.images)
    path = report.save(out, "verification")
    print(f"sr_nc={report.sr_nc:.2%}"
          + ("" if report.sr_c is None else f" sr_c={report.sr_c:.2%}")
          + f" n={len(report.per_image)} report={path}")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    found = sorted(run.glob("*.json"))
    if not found:
        raise ConfigurationError(f"no JSON reports under {run}")
    for path in found:
        obj = json.loads(path.read_text())
        print(f"== {path.name}")
        print(json.dumps(obj, indent=2, sort_keys=True)[:2000])
    return 0


def cmd_ss_embed(args) -> int:
    from .media import load_batch, save_batch
    from .spatial import SpreadSpectrumConfig, hex_to_bits, ss_embed
    cover = load_batch(Path(args.images))
    hex_str = Path(args.bits).read_text() if Path(args.bits).exists() else args.bits
    cfg = SpreadSpectrumConfig(alpha=args.alpha, block_size=args.block_size,
                               n_bits=args.n_bits, pattern_seed=args.seed)
    bits = hex_to_bits(hex_str, cfg.n_bits)
    out_batch, clip_fraction = ss_embed(cover, bits, cfg)
    save_batch(out_batch, Path(args.out))
    print(f"embedded {cfg.n_bits} bits into {len(cover)} images -> {args.out} "
          f"(max clip fraction {clip_fraction.max():.4f})")
    return 0


def cmd_ss_extract(args) -> int:
    from .media import load_batch
    from .spatial import SpreadSpectrumConfig, bits_to_hex, hex_to_bits, ss_extract
    images = load_batch(Path(args.images))
    cfg = SpreadSpectrumConfig(alpha=args.alpha, block_size=args.block_size,
                               n_bits=args.n_bits, pattern_seed=args.seed)
    bits, scores = ss_extract(images, cfg)
    for i in range(bits.shape[0]):
        line = bits_to_hex(bits[i])
        extra = ""
        if args.expect:
            want = hex_to_bits(args.expect, cfg.n_bits)
            extra = f" accuracy={float((bits[i] == want).mean()):.4f}"
        print(f"image {i}: {line}{extra}")
    return 0


def cmd_run_recipe(args) -> int:
    from .config import ExperimentConfig, apply_overrides, micro_preset
    from .recipes import run_recipe
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        overrides = [f"recipe={args.recipe}"]
    else:
        cfg = ExperimentConfig(recipe=args.recipe)
        overrides = []
    if args.micro:
        cfg = micro_preset(cfg)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
        overrides.append(f"dataset.seed={args.seed}")
    cfg = apply_overrides(cfg, overrides + list(args.set or ()))
    out = run_recipe(cfg, args.out)
    print(f"recipe {args.recipe} complete -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wmctl",
                                description="desk-scale model watermarking lab")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate the paired stripe-removal dataset")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--size", default="64")
    sp.add_argument("--split", default=None, help="protector,attacker,test counts")
    sp.add_argument("--stripe-amplitude", type=float, default=0.25)
    sp.add_argument("--channels", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="run the two-stage protection training")
    sp.add_argument("--config", default=None)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--micro", action="store_true", help="smoke-scale preset")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="train one surrogate cell and evaluate it")
    sp.add_argument("--bundle", required=True, help="bundle checkpoint directory")
    sp.add_argument("--data", required=True, help="materialized dataset directory")
    sp.add_argument("--watermark", required=True, help="watermark PNG")
    sp.add_argument("--arch", default="unet", choices=["cnet", "res9", "res16", "unet"])
    sp.add_argument("--losses", default="l2", help="e.g. l2 or l1+adversarial")
    sp.add_argument("--channels", type=int, default=None)
    sp.add_argument("--epochs", type=int, default=40)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("verify", help="verify watermark presence in images")
    sp.add_argument("--extractor", required=True, help="bundle checkpoint directory")
    sp.add_argument("--images", required=True, help="directory of PNGs")
    sp.add_argument("--watermark", required=True, help="watermark PNG")
    sp.add_argument("--mode", default="auto", choices=["auto", "nc", "classifier", "both"])
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="print the reports of a run directory")
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("ss-embed", help="spread-spectrum embed bits into PNGs")
    sp.add_argument("--images", required=True, help="directory of cover PNGs")
    sp.add_argument("--bits", required=True, help="hex string or file containing one")
    sp.add_argument("--alpha", type=float, default=0.03)
    sp.add_argument("--block-size", type=int, default=8)
    sp.add_argument("--n-bits", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ss_embed)

    sp = sub.add_parser("ss-extract", help="spread-spectrum extract bits from PNGs")
    sp.add_argument("--images", required=True)
    sp.add_argument("--alpha", type=float, default=0.03)
    sp.add_argument("--block-size", type=int, default=8)
    sp.add_argument("--n-bits", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--expect", default=None, help="expected hex payload")
    sp.set_defaults(func=cmd_ss_extract)

    sp = sub.add_parser("run-recipe", help="run a paper-table recipe end to end")
    sp.add_argument("recipe", choices=["table1", "table2", "table2_dagger", "table4",
                                       "table5_lambda", "table6_size", "table7_multi",
                                       "table8_self", "channel_sweep", "ss_baseline"])
    sp.add_argument("--config", default=None)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--desk", action="store_true", help="desk-scale defaults (default)")
    sp.add_argument("--micro", action="store_true", help="smoke-scale preset")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_run_recipe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigurationError, CapacityError, ShapeMismatchError) as e:
        return _fail(type(e).__name__, str(e), 2)
    except FileNotFoundError as e:
        return _fail("FileNotFoundError", str(e), 2)
    except Exception as e:  # runtime failure
        return _fail(type(e).__name__, str(e), 1)


if __name__ == "__main__":
    sys.exit(main())
