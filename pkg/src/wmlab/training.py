"""Two-stage training of the watermarking networks and its extensions.

Stage 1 ("initial") jointly trains the embedder H, extractor R, and patch
discriminator D so that H hides the target watermark invisibly while R
recovers it from watermarked images and emits the blank from clean ones.
Stage 2 ("adversarial") freezes H, fine-tunes R on a mix that includes a
proxy surrogate's outputs, and trains the verification classifier C on R's
extractions.

Also here: multi-watermark training (random watermark per batch, K+1-class
classifier), self-watermarked task models (task loss + coupled extracting
loss), the overwrite-robust noise layer, checkpointing with content hashes,
and the blank-threshold (tau_blank) calibration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, ProvenanceError, TrainingDivergedError
from .losses import (LossWeights, classifier_loss, discriminator_loss,
                     embedding_loss, extracting_loss)
from .media import ImageBatch, WatermarkSpec, psnr
from .networks import (ExtractorNet, PatchDiscriminator, PerceptualFeatures,
                       UNetGenerator, WatermarkClassifier,
                       init_weights, seeded, state_hash, to_batch, to_tensor)
from .verify import nc_batch


@dataclass
class TrainSchedule:
    """Optimization schedule: Adam with plateau-triggered lr decay.

    The learning rate is multiplied by ``plateau_factor`` whenever the epoch
    loss fails to improve on its best value by ``plateau_min_improvement``
    (relative) for ``plateau_patience`` consecutive epochs.
    """

    epochs: int = 50
    batch_size: int = 8
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    plateau_patience: int = 5
    plateau_factor: float = 0.2
    plateau_min_improvement: float = 1e-3
    seed: int = 0
    eval_every: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class PlateauTracker:
    def __init__(self, sched: TrainSchedule, optimizers):
        self.sched = sched
        self.optimizers = optimizers
        self.best = float("inf")
        self.stale = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.sched.plateau_min_improvement):
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.sched.plateau_patience:
                self.stale = 0
                for opt in self.optimizers:
                    for group in opt.param_groups:
                        group["lr"] *= self.sched.plateau_factor
        return self.optimizers[0].param_groups[0]["lr"]


class MetricsWriter:
    """Append-only JSONL stream of per-epoch metrics (no timestamps)."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")
        self.rows = []

    def write(self, row: dict):
        self.rows.append(row)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class NetworkBundle:
    """Handles for the trained networks plus provenance bookkeeping.

    ``H`` embeds, ``R`` extracts, ``D`` discriminates during training, ``C``
    classifies extractions (present after the adversarial stage), ``M`` is a
    self-watermarked task model when that mode is used.
    """

    R: torch.nn.Module
    H: torch.nn.Module | None = None
    D: torch.nn.Module | None = None
    C: torch.nn.Module | None = None
    M: torch.nn.Module | None = None
    percep: torch.nn.Module | None = None
    channels: int = 1
    n_classes: int = 2
    width_multiplier: int = 2
    lineage: str = ""
    lineages: dict = field(default_factory=dict)
    tau_blank: float | None = None
    config: dict = field(default_factory=dict)

    def _net_items(self):
        for name in ("H", "R", "D", "C", "M"):
            net = getattr(self, name)
            if net is not None:
                yield name, net

    def checkpoint_id(self) -> str:
        h = hashlib.sha256()
        for name, net in self._net_items():
            h.update(name.encode())
            h.update(state_hash(net).encode())
        return h.hexdigest()

    @property
    def provenance(self) -> dict:
        return {"lineage": self.lineage, "checkpoint_id": self.checkpoint_id(),
                "hashes": {name: state_hash(net) for name, net in self._net_items()}}

    def check_provenance(self):
        if self.C is None:
            raise ConfigurationError("bundle has no classifier; use mode='nc'")
        r_lin = self.lineages.get("R", self.lineage)
        c_lin = self.lineages.get("C", self.lineage)
        if r_lin != c_lin:
            raise ProvenanceError(
                f"extractor lineage {r_lin!r} != classifier lineage {c_lin!r}")

    def _batched(self, net, data: torch.Tensor, bs: int = 32) -> torch.Tensor:
        net.eval()
        outs = []
        with torch.no_grad():
            for i in range(0, data.shape[0], bs):
                outs.append(net(data[i:i + bs]))
        return torch.cat(outs, dim=0)

    def embed(self, cover: ImageBatch, wm: WatermarkSpec) -> ImageBatch:
        if self.H is None:
            raise ConfigurationError("bundle has no embedder (self-watermarked mode?)")
        x = to_tensor(cover)
        delta = torch.from_numpy(wm.delta_for(self.channels))
        inp = torch.cat([x, delta.unsqueeze(0).expand(x.shape[0], -1, -1, -1)], dim=1)
        return to_batch(self._batched(self.H, inp), domain="Bprime")

    def extract(self, images: ImageBatch) -> ImageBatch:
        return to_batch(self._batched(self.R, to_tensor(images)), domain="free")

    def run_task(self, inputs: ImageBatch) -> ImageBatch:
        if self.M is None:
            raise ConfigurationError("bundle has no task model")
        return to_batch(self._batched(self.M, to_tensor(inputs)), domain="B")

    def classify(self, extracted: ImageBatch) -> np.ndarray:
        if self.C is None:
            raise ConfigurationError("bundle has no classifier")
        logits = self._batched(self.C, to_tensor(extracted))
        return torch.softmax(logits, dim=1).numpy()


def build_bundle(channels: int = 1, width_multiplier: int = 2, n_classes: int = 2,
                 seed: int = 0, with_embedder: bool = True,
                 percep_seed: int = 0x1DEA) -> NetworkBundle:
    """Construct and deterministically initialize a fresh bundle."""
    if width_multiplier < 1:
        raise ConfigurationError("width_multiplier must be >= 1")
    seeded(seed)
    w = width_multiplier
    H = None
    if with_embedder:
        H = init_weights(UNetGenerator(2 * channels, channels, base=8 * w,
                                       residual_channels=channels))
    R = init_weights(ExtractorNet(channels, channels, base=4 * w))
    D = init_weights(PatchDiscriminator(channels, base=8 * w))
    C = init_weights(WatermarkClassifier(channels, n_classes=n_classes, base=8 * w))
    percep = PerceptualFeatures(channels, seed=percep_seed)
    config = {"channels": channels, "width_multiplier": w, "n_classes": n_classes,
              "seed": seed, "percep_seed": percep_seed}
    lineage = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
    bundle = NetworkBundle(R=R, H=H, D=D, C=C, percep=percep, channels=channels,
                           n_classes=n_classes, width_multiplier=w,
                           lineage=lineage, config=config)
    bundle.lineages = {name: lineage for name, _ in bundle._net_items()}
    return bundle


def save_bundle(bundle: NetworkBundle, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weights = {name: net.state_dict() for name, net in bundle._net_items()}
    torch.save(weights, directory / "weights.pt")
    manifest = {
        "config": bundle.config,
        "lineage": bundle.lineage,
        "lineages": bundle.lineages,
        "tau_blank": bundle.tau_blank,
        "checkpoint_id": bundle.checkpoint_id(),
        "hashes": {name: state_hash(net) for name, net in bundle._net_items()},
        "networks": sorted(name for name, _ in bundle._net_items()),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_bundle(directory: Path) -> NetworkBundle:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = manifest["config"]
    bundle = build_bundle(channels=cfg["channels"],
                          width_multiplier=cfg["width_multiplier"],
                          n_classes=cfg["n_classes"], seed=cfg["seed"],
                          with_embedder="H" in manifest["networks"],
                          percep_seed=cfg.get("percep_seed", 0x1DEA))
    weights = torch.load(directory / "weights.pt", map_location="cpu")
    if "M" in weights and bundle.M is None:
        bundle.M = UNetGenerator(bundle.channels, bundle.channels,
                                 base=8 * bundle.width_multiplier,
                                 residual_channels=bundle.channels,
                                 residual_scale=0.6)
    for name, net in bundle._net_items():
        if name in weights:
            net.load_state_dict(weights[name])
    bundle.lineage = manifest["lineage"]
    bundle.lineages = manifest["lineages"]
    bundle.tau_blank = manifest["tau_blank"]
    got = bundle.checkpoint_id()
    if got != manifest["checkpoint_id"]:
        raise ProvenanceError(f"checkpoint hash mismatch under {directory}")
    return bundle


def load_classifier_from(bundle: NetworkBundle, directory: Path) -> NetworkBundle:
    """Swap in a classifier from another checkpoint (tracked as foreign lineage)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    weights = torch.load(directory / "weights.pt", map_location="cpu")
    if "C" not in weights:
        raise ConfigurationError(f"{directory} holds no classifier")
    bundle.C.load_state_dict(weights["C"])
    bundle.lineages["C"] = manifest["lineage"]
    return bundle


# ---------------------------------------------------------------------------
# shared loop plumbing
# ---------------------------------------------------------------------------

def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int):
    perm = rng.permutation(n)
    n_full = (n // batch_size) * batch_size  # ragged tail dropped for stable shapes
    for i in range(0, n_full, batch_size):
        yield perm[i:i + batch_size]


def _coupled_step(primary_loss, ext_loss, lam, primary_net, r_net, opt_primary, opt_r):
    """One optimizer step where the primary net minimizes primary + lam*ext
    and R minimizes the extracting loss alone.

    For lam > 0 a single backward of the coupled loss suffices: R's grads
    come out scaled by lam and are divided back.  For lam == 0 the extracting
    gradient is taken separately so it cannot leak into the primary net.
    """
    opt_primary.zero_grad()
    opt_r.zero_grad()
    if lam > 0:
        (primary_loss + lam * ext_loss).backward()
        if lam != 1.0:
            for p in r_net.parameters():
                if p.grad is not None:
                    p.grad.div_(lam)
    else:
        primary_loss.backward(retain_graph=True)
        grads = torch.autograd.grad(ext_loss, list(r_net.parameters()))
        for p, g in zip(r_net.parameters(), grads):
            p.grad = g
    opt_primary.step()
    opt_r.step()


def _check_finite(value: float, snapshot: dict):
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss at {snapshot.get('where', '?')}", snapshot)


def _wm_list(wm) -> list[WatermarkSpec]:
    wms = list(wm) if isinstance(wm, (list, tuple)) else [wm]
    if not wms:
        raise ConfigurationError("need at least one watermark")
    return wms


def _deltas(wms, channels):
    deltas = [torch.from_numpy(w.delta_for(channels)) for w in wms]
    delta0 = torch.from_numpy(wms[0].delta0_for(channels))
    return deltas, delta0


def blank_deviation(bundle: NetworkBundle, images: ImageBatch,
                    wm: WatermarkSpec) -> np.ndarray:
    """Per-image mean absolute deviation of the extraction from the blank."""
    extracted = bundle.extract(images)
    delta0 = wm.delta0_for(images.shape[1])
    return np.mean(np.abs(extracted.data - delta0[None]), axis=(1, 2, 3))


def compute_tau_blank(bundle: NetworkBundle, clean_batches, wm: WatermarkSpec,
                      factor: float = 3.0) -> float:
    """Blank threshold: ``factor`` x mean clean deviation on the calibration set."""
    devs = np.concatenate([blank_deviation(bundle, b, wm) for b in clean_batches])
    return float(factor * devs.mean())


def make_overwrite_noise_layer(pool_bundle: NetworkBundle, pool_wms, seed: int = 0):
    """Noise layer: re-watermark a batch with a random pool watermark.

    Returns a callable(tensor[0,1]) -> tensor[0,1] using the (frozen) pool
    embedder; watermark choice is deterministic in the layer's own rng.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0F00]))
    pool_wms = list(pool_wms)
    pool_bundle.H.eval()

    def layer(x: torch.Tensor) -> torch.Tensor:
        k = int(rng.integers(len(pool_wms)))
        delta = torch.from_numpy(pool_wms[k].delta_for(x.shape[1]))
        inp = torch.cat([x, delta.unsqueeze(0).expand(x.shape[0], -1, -1, -1)], dim=1)
        with torch.no_grad():
            return pool_bundle.H(inp)

    return layer


def validate_watermarks_disjoint(wms, label="watermarks", nc_bound: float = 0.99):
    """Reject duplicate or near-duplicate watermarks (pairwise NC check)."""
    from .verify import nc as _nc
    flat = [np.asarray(w.delta, dtype=np.float64) for w in wms]
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            if flat[i].shape == flat[j].shape and _nc(flat[i], flat[j]) > nc_bound:
                raise ConfigurationError(
                    f"{label} {i} and {j} overlap (NC > {nc_bound})")


# ---------------------------------------------------------------------------
# stage 1: initial training
# ---------------------------------------------------------------------------

def _eval_row(bundle, a_test, b_test, wms):
    rows = {}
    psnrs, ncs = [], []
    for k, wm in enumerate(wms):
        bp = bundle.embed(b_test, wm) if bundle.H is not None else bundle.run_task(a_test)
        psnrs.append(float(np.mean(psnr(b_test, bp))))
        values, _ = nc_batch(bundle.extract(bp), wm.delta_for(b_test.shape[1]))
        ncs.append(float(np.mean(values)))
    rows["eval_psnr"] = float(np.mean(psnrs))
    rows["eval_nc"] = float(np.mean(ncs))
    dev = np.concatenate([blank_deviation(bundle, a_test, wms[0]),
                          blank_deviation(bundle, b_test, wms[0])])
    rows["eval_blank_dev"] = float(np.mean(dev))
    return rows


def train_initial_stage(bundle: NetworkBundle, data, wm, weights: LossWeights,
                        sched: TrainSchedule, out_dir: Path | None = None,
                        noise_layer=None) -> NetworkBundle:
    """Joint H/R/D training on the protector split (Eq.-(4)-style coupling).

    D minimizes the two-term log loss; H minimizes embedding + lam *
    extracting loss; R minimizes the extracting loss alone.  With
    ``noise_layer`` set, re-watermarked copies of B' join the watermark term
    and pool-only-watermarked copies of B join the clean term.
    """
    if bundle.H is None:
        raise ConfigurationError("initial stage needs an embedder")
    wms = _wm_list(wm)
    deltas, delta0 = _deltas(wms, bundle.channels)
    a_train, b_train = data.split("protector_train")
    a_test, b_test = data.split("test")
    a_t, b_t = to_tensor(a_train), to_tensor(b_train)

    rng = np.random.default_rng(np.random.SeedSequence([sched.seed, 0x111]))
    torch.manual_seed(sched.seed)
    H, R, D = bundle.H, bundle.R, bundle.D
    for net in (H, R, D):
        net.train()
    opt_h = torch.optim.Adam(H.parameters(), sched.lr, betas=sched.betas)
    opt_r = torch.optim.Adam(R.parameters(), sched.lr, betas=sched.betas)
    opt_d = torch.optim.Adam(D.parameters(), sched.lr, betas=sched.betas)
    plateau = PlateauTracker(sched, [opt_h, opt_r, opt_d])
    metrics = MetricsWriter(out_dir and Path(out_dir) / "metrics_initial.jsonl")

    n = len(a_train)
    for epoch in range(sched.epochs):
        sums, count = {}, 0
        for idx in _epoch_batches(rng, n, sched.batch_size):
            k = int(rng.integers(len(wms)))
            a = a_t[idx]
            b = b_t[idx]
            delta = deltas[k]
            inp = torch.cat([b, delta.unsqueeze(0).expand(b.shape[0], -1, -1, -1)], dim=1)
            b_prime = H(inp)

            d_loss = discriminator_loss(D(b), D(b_prime.detach()))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            emb, emb_parts = embedding_loss(b, b_prime, D, bundle.percep, weights)
            stack = [a, b, b_prime]
            if noise_layer is not None:
                stack += [noise_layer(b_prime), noise_layer(b)]
            parts = torch.split(R(torch.cat(stack, dim=0)), a.shape[0], dim=0)
            extra_wm = [parts[3]] if noise_layer is not None else []
            extra_clean = [parts[4]] if noise_layer is not None else []
            ext, ext_parts = extracting_loss(parts[0], parts[1], parts[2], delta,
                                             delta0, weights, extra_wm=extra_wm,
                                             extra_clean=extra_clean)
            total_h = emb + weights.lam * ext
            _coupled_step(emb, ext, weights.lam, H, R, opt_h, opt_r)
            row = {"loss_total": total_h.item(), "loss_emd": emb.item(),
                   "loss_ext": ext.item(), "d_loss": d_loss.item(),
                   **emb_parts, **ext_parts}
            _check_finite(row["loss_total"], {"where": f"initial epoch {epoch}", **row})
            for key, val in row.items():
                sums[key] = sums.get(key, 0.0) + val
            count += 1
        epoch_row = {"epoch": epoch, **{k: v / count for k, v in sums.items()}}
        epoch_row["lr"] = plateau.step(epoch_row["loss_total"])
        if sched.eval_every and (epoch + 1) % sched.eval_every == 0:
            epoch_row.update(_eval_row(bundle, a_test, b_test, wms))
            for net in (H, R, D):
                net.train()
        metrics.write(epoch_row)

    bundle.tau_blank = compute_tau_blank(bundle, [a_test, b_test], wms[0])
    if out_dir:
        save_bundle(bundle, Path(out_dir) / "checkpoints" / "initial")
    return bundle


def train_multi_watermark(bundle: NetworkBundle, data, wm_set, weights: LossWeights,
                          sched: TrainSchedule, out_dir: Path | None = None
                          ) -> NetworkBundle:
    """Initial-stage training of a single H/R pair over K watermarks."""
    wms = _wm_list(wm_set)
    if not (2 <= len(wms) <= 16):
        raise ConfigurationError("multi-watermark mode supports 2..16 watermarks")
    validate_watermarks_disjoint(wms, "multi-watermark set")
    if bundle.n_classes != len(wms) + 1:
        raise ConfigurationError(
            f"classifier must have K+1={len(wms) + 1} classes, has {bundle.n_classes}")
    return train_initial_stage(bundle, data, wms, weights, sched, out_dir)


# ---------------------------------------------------------------------------
# stage 2: adversarial training
# ---------------------------------------------------------------------------

def train_adversarial_stage(bundle: NetworkBundle, data, wm, weights: LossWeights,
                            sched: TrainSchedule, bpp, out_dir: Path | None = None,
                            noise_layer=None, train_classifier: bool = True
                            ) -> NetworkBundle:
    """Freeze H, fine-tune R on A/B/B'/B'', and train the classifier C.

    ``bpp`` holds the proxy surrogate outputs aligned to the protector
    split: one ImageBatch (single watermark) or a list of K ImageBatches.
    """
    wms = _wm_list(wm)
    bpps = list(bpp) if isinstance(bpp, (list, tuple)) else [bpp]
    if len(bpps) != len(wms):
        raise ConfigurationError(f"need B'' per watermark: {len(bpps)} vs {len(wms)}")
    if any(b is None for b in bpps):
        raise ConfigurationError("adversarial stage requires proxy-surrogate outputs")
    deltas, delta0 = _deltas(wms, bundle.channels)
    a_train, b_train = data.split("protector_train")
    a_test, b_test = data.split("test")
    if any(len(b) != len(a_train) for b in bpps):
        raise ConfigurationError("B'' must be aligned with the protector split")
    a_t, b_t = to_tensor(a_train), to_tensor(b_train)
    bpp_t = [to_tensor(b) for b in bpps]

    h_hash_before = state_hash(bundle.H) if bundle.H is not None else None
    if bundle.H is not None:
        bundle.H.eval()
        for p in bundle.H.parameters():
            p.requires_grad_(False)
        # B' is frozen along with H: precompute it per watermark
        bp_t = [to_tensor(bundle.embed(b_train, w)) for w in wms]
    else:
        bundle.M.eval()
        bp_t = [to_tensor(bundle.run_task(a_train)) for _ in wms]

    rng = np.random.default_rng(np.random.SeedSequence([sched.seed, 0x222]))
    torch.manual_seed(sched.seed)
    R, C = bundle.R, bundle.C
    R.train()
    opt_r = torch.optim.Adam(R.parameters(), sched.lr, betas=sched.betas)
    opts = [opt_r]
    if train_classifier:
        C.train()
        opt_c = torch.optim.Adam(C.parameters(), sched.lr, betas=sched.betas)
        opts.append(opt_c)
    plateau = PlateauTracker(sched, opts)
    metrics = MetricsWriter(out_dir and Path(out_dir) / "metrics_adversarial.jsonl")

    n = len(a_train)
    for epoch in range(sched.epochs):
        sums, count = {}, 0
        for idx in _epoch_batches(rng, n, sched.batch_size):
            k = int(rng.integers(len(wms)))
            a, b = a_t[idx], b_t[idx]
            b_prime, b_pp = bp_t[k][idx], bpp_t[k][idx]
            stack = [a, b, b_prime, b_pp]
            if noise_layer is not None:
                stack += [noise_layer(b_prime), noise_layer(b_pp), noise_layer(b)]
            parts = torch.split(R(torch.cat(stack, dim=0)), a.shape[0], dim=0)
            r_a, r_b, r_bp, r_bpp = parts[:4]
            extra_wm = list(parts[4:6]) if noise_layer is not None else []
            extra_clean = [parts[6]] if noise_layer is not None else []
            ext, ext_parts = extracting_loss(r_a, r_b, r_bp, deltas[k], delta0,
                                             weights, r_bpp=r_bpp, stage="adversarial",
                                             extra_wm=extra_wm, extra_clean=extra_clean)
            opt_r.zero_grad()
            ext.backward()
            opt_r.step()
            row = {"loss_ext": ext.item(), **ext_parts}
            if train_classifier:
                wm_pool = torch.cat([r_bp, r_bpp] + extra_wm, dim=0).detach()
                clean_pool = torch.cat([r_a, r_b] + extra_clean, dim=0).detach()
                logits = C(torch.cat([clean_pool, wm_pool], dim=0))
                labels = torch.cat([
                    torch.zeros(clean_pool.shape[0], dtype=torch.long),
                    torch.full((wm_pool.shape[0],), k + 1, dtype=torch.long),
                ])
                c_loss = classifier_loss(logits, labels)
                opt_c.zero_grad()
                c_loss.backward()
                opt_c.step()
                row["c_loss"] = c_loss.item()
            _check_finite(row["loss_ext"], {"where": f"adversarial epoch {epoch}", **row})
            for key, val in row.items():
                sums[key] = sums.get(key, 0.0) + val
            count += 1
        epoch_row = {"epoch": epoch, **{k2: v / count for k2, v in sums.items()}}
        epoch_row["lr"] = plateau.step(epoch_row["loss_ext"])
        if sched.eval_every and (epoch + 1) % sched.eval_every == 0:
            epoch_row.update(_eval_row(bundle, a_test, b_test, wms))
            R.train()
            if train_classifier:
                C.train()
        metrics.write(epoch_row)

    if bundle.H is not None and state_hash(bundle.H) != h_hash_before:
        raise RuntimeError("frozen-H contract violated during adversarial stage")
    bundle.tau_blank = compute_tau_blank(bundle, [a_test, b_test], wms[0])
    if out_dir:
        save_bundle(bundle, Path(out_dir) / "checkpoints" / "adversarial")
    return bundle


# ---------------------------------------------------------------------------
# task models / self-watermarked mode
# ---------------------------------------------------------------------------

def build_task_model(channels: int = 1, width_multiplier: int = 2, seed: int = 0
                     ) -> torch.nn.Module:
    """UNet task model (stripe removal): bounded residual on its input."""
    seeded(seed)
    return init_weights(UNetGenerator(channels, channels, base=8 * width_multiplier,
                                      residual_channels=channels, residual_scale=0.6))


def train_task_model(m_net: torch.nn.Module, data, sched: TrainSchedule,
                     out_dir: Path | None = None) -> torch.nn.Module:
    """Watermark-free baseline: plain L2 regression on the protector split."""
    a_train, b_train = data.split("protector_train")
    a_t, b_t = to_tensor(a_train), to_tensor(b_train)
    rng = np.random.default_rng(np.random.SeedSequence([sched.seed, 0x333]))
    torch.manual_seed(sched.seed)
    m_net.train()
    opt = torch.optim.Adam(m_net.parameters(), sched.lr, betas=sched.betas)
    plateau = PlateauTracker(sched, [opt])
    metrics = MetricsWriter(out_dir and Path(out_dir) / "metrics_task.jsonl")
    for epoch in range(sched.epochs):
        total, count = 0.0, 0
        for idx in _epoch_batches(rng, len(a_train), sched.batch_size):
            loss = torch.nn.functional.mse_loss(m_net(a_t[idx]), b_t[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            _check_finite(loss.item(), {"where": f"task epoch {epoch}"})
            total += loss.item()
            count += 1
        metrics.write({"epoch": epoch, "loss_task": total / count,
                       "lr": plateau.step(total / count)})
    return m_net


def train_self_watermarked(m_net: torch.nn.Module, bundle: NetworkBundle, data,
                           wm: WatermarkSpec, weights: LossWeights,
                           sched: TrainSchedule, out_dir: Path | None = None
                           ) -> NetworkBundle:
    """Absorb the embedding into the task model: task loss + lam * extracting.

    The task model's raw outputs must both solve the task and carry the
    watermark; R is trained alongside (and should be fine-tuned with the
    adversarial stage afterwards).  Returns the bundle with M attached.
    """
    wms = _wm_list(wm)
    deltas, delta0 = _deltas(wms, bundle.channels)
    a_train, b_train = data.split("protector_train")
    a_test, b_test = data.split("test")
    a_t, b_t = to_tensor(a_train), to_tensor(b_train)
    rng = np.random.default_rng(np.random.SeedSequence([sched.seed, 0x444]))
    torch.manual_seed(sched.seed)
    bundle.M = m_net
    bundle.H = None
    bundle.lineages["M"] = bundle.lineage
    R = bundle.R
    m_net.train()
    R.train()
    opt_m = torch.optim.Adam(m_net.parameters(), sched.lr, betas=sched.betas)
    opt_r = torch.optim.Adam(R.parameters(), sched.lr, betas=sched.betas)
    plateau = PlateauTracker(sched, [opt_m, opt_r])
    metrics = MetricsWriter(out_dir and Path(out_dir) / "metrics_selfwm.jsonl")
    for epoch in range(sched.epochs):
        sums, count = {}, 0
        for idx in _epoch_batches(rng, len(a_train), sched.batch_size):
            k = int(rng.integers(len(wms)))
            a, b0 = a_t[idx], b_t[idx]
            b_star = m_net(a)
            l_task = torch.nn.functional.mse_loss(b_star, b0)
            parts = torch.split(R(torch.cat([a, b0, b_star], dim=0)), a.shape[0], dim=0)
            ext, ext_parts = extracting_loss(parts[0], parts[1], parts[2], deltas[k],
                                             delta0, weights)
            total_m = l_task + weights.lam * ext
            _coupled_step(l_task, ext, weights.lam, m_net, R, opt_m, opt_r)
            row = {"loss_total": total_m.item(), "loss_task": l_task.item(),
                   "loss_ext": ext.item(), **ext_parts}
            _check_finite(row["loss_total"], {"where": f"selfwm epoch {epoch}", **row})
            for key, val in row.items():
                sums[key] = sums.get(key, 0.0) + val
            count += 1
        epoch_row = {"epoch": epoch, **{k2: v / count for k2, v in sums.items()}}
        epoch_row["lr"] = plateau.step(epoch_row["loss_total"])
        if sched.eval_every and (epoch + 1) % sched.eval_every == 0:
            epoch_row.update(_eval_row(bundle, a_test, b_test, wms))
            m_net.train()
            R.train()
        metrics.write(epoch_row)
    bundle.tau_blank = compute_tau_blank(bundle, [a_test, b_test], wms[0])
    if out_dir:
        save_bundle(bundle, Path(out_dir) / "checkpoints" / "selfwm")
    return bundle
