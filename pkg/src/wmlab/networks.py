"""Network zoo: embedder/extractor/discriminator/classifier and surrogates.

Every image network exchanges [0, 1] tensors at its boundary; inputs are
remapped to [-1, 1] internally and outputs squashed back, so range closure
holds for any weights.  All constructors are deterministic given the global
torch seed (use ``build_*`` helpers / ``seeded`` to pin it).
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .media import ImageBatch


def seeded(seed: int):
    torch.manual_seed(seed)


def init_weights(net: nn.Module, gain: float = 0.02) -> nn.Module:
    """Normal(0, gain) init for conv/linear weights, the pix2pix convention."""
    def init_func(m):
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.constant_(m.bias, 0.0)
    net.apply(init_func)
    return net


def to_tensor(batch: ImageBatch) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch.data))


def to_batch(t: torch.Tensor, domain: str = "free") -> ImageBatch:
    arr = t.detach().clamp(0.0, 1.0).cpu().numpy().astype(np.float32)
    return ImageBatch(arr, domain=domain)


def state_hash(module: nn.Module) -> str:
    """Content hash of a module's parameters and buffers."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class _Squash01(nn.Module):
    def forward(self, x):
        return (torch.tanh(x) + 1.0) * 0.5


def _in(ch):
    return nn.InstanceNorm2d(ch, affine=True)


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1), _in(ch), nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1), _in(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class UNetGenerator(nn.Module):
    """Encoder-decoder with multi-scale skip connections.

    ``residual_channels`` > 0 switches the head to a bounded additive
    residual on the first ``residual_channels`` input channels:
    out = clamp01(x[:, :rc] + residual_scale * tanh(head)).  Used by the
    embedder, where the output is a small perturbation of the cover.
    """

    def __init__(self, in_ch, out_ch, base=16, depth=4,
                 residual_channels=0, residual_scale=0.25):
        super().__init__()
        self.residual_channels = residual_channels
        self.residual_scale = residual_scale
        widths = [min(base * (2 ** i), base * 4) for i in range(depth)]
        downs, ch = [], in_ch
        for i, w in enumerate(widths):
            block = [nn.Conv2d(ch, w, 4, 2, 1)]
            if i > 0:
                block.append(_in(w))
            block.append(nn.LeakyReLU(0.2, inplace=True))
            downs.append(nn.Sequential(*block))
            ch = w
        self.downs = nn.ModuleList(downs)
        ups = []
        for i in reversed(range(1, depth)):
            w = widths[i - 1]
            ups.append(nn.Sequential(
                nn.ConvTranspose2d(ch, w, 4, 2, 1), _in(w), nn.ReLU(inplace=True)))
            ch = w + widths[i - 1]  # skip concat
        self.ups = nn.ModuleList(ups)
        self.head = nn.ConvTranspose2d(ch, out_ch, 4, 2, 1)

    def forward(self, x):
        y = x * 2.0 - 1.0
        skips = []
        for down in self.downs:
            y = down(y)
            skips.append(y)
        y = skips.pop()
        for up in self.ups:
            y = up(y)
            y = torch.cat([y, skips.pop()], dim=1)
        y = self.head(y)
        if self.residual_channels:
            base = x[:, :self.residual_channels]
            return (base + self.residual_scale * torch.tanh(y)).clamp(0.0, 1.0)
        return (torch.tanh(y) + 1.0) * 0.5


class ExtractorNet(nn.Module):
    """Watermark extractor: 3-conv encoder, residual trunk, deconv + 2 convs.

    The encoder downsamples 4x and the single transposed conv restores the
    full resolution (kernel 8, stride 4), keeping the nine residual blocks
    at quarter resolution.
    """

    def __init__(self, in_ch, out_ch, base=12, n_blocks=9):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(in_ch, base, 7, 1, 3), _in(base), nn.ReLU(inplace=True),
            nn.Conv2d(base, base * 2, 3, 2, 1), _in(base * 2), nn.ReLU(inplace=True),
            nn.Conv2d(base * 2, base * 4, 3, 2, 1), _in(base * 4), nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(base * 4) for _ in range(n_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(base * 4, base, 8, 4, 2), _in(base), nn.ReLU(inplace=True),
            nn.Conv2d(base, base, 3, 1, 1), _in(base), nn.ReLU(inplace=True),
            nn.Conv2d(base, out_ch, 3, 1, 1), _Squash01(),
        )

    def forward(self, x):
        y = x * 2.0 - 1.0
        return self.decoder(self.blocks(self.encoder(y)))


class ResnetGenerator(nn.Module):
    """Residual translator without cross-bottleneck skips (surrogate family)."""

    def __init__(self, in_ch, out_ch, base=16, n_blocks=9):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, base, 7, 1, 3), _in(base), nn.ReLU(inplace=True),
            nn.Conv2d(base, base * 2, 3, 2, 1), _in(base * 2), nn.ReLU(inplace=True),
            nn.Conv2d(base * 2, base * 4, 3, 2, 1), _in(base * 4), nn.ReLU(inplace=True),
            *[ResidualBlock(base * 4) for _ in range(n_blocks)],
            nn.ConvTranspose2d(base * 4, base * 2, 3, 2, 1, output_padding=1),
            _in(base * 2), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(base * 2, base, 3, 2, 1, output_padding=1),
            _in(base), nn.ReLU(inplace=True),
            nn.Conv2d(base, out_ch, 7, 1, 3), _Squash01(),
        )

    def forward(self, x):
        return self.net(x * 2.0 - 1.0)


class CNet(nn.Module):
    """Plain convolutional stack (no up/downsampling), ReLU in the middle."""

    def __init__(self, in_ch, out_ch, channels=64, n_layers=5):
        super().__init__()
        layers = [nn.Conv2d(in_ch, channels, 3, 1, 1), nn.ReLU(inplace=True)]
        for _ in range(n_layers - 2):
            layers += [nn.Conv2d(channels, channels, 3, 1, 1), nn.ReLU(inplace=True)]
        layers += [nn.Conv2d(channels, out_ch, 3, 1, 1), _Squash01()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x * 2.0 - 1.0)


class PatchDiscriminator(nn.Module):
    """3-layer patch discriminator; returns raw patch logits."""

    def __init__(self, in_ch, base=16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, base, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base, base * 2, 4, 2, 1), _in(base * 2), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base * 2, 1, 4, 1, 1),
        )

    def forward(self, x):
        return self.net(x * 2.0 - 1.0)


class WatermarkClassifier(nn.Module):
    """3-conv classifier over extracted watermarks -> class logits.

    Two classes in single-watermark mode (0 = clean, 1 = watermarked);
    K+1 classes in multi-watermark mode (0 = no watermark).
    """

    def __init__(self, in_ch, n_classes=2, base=16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_ch, base, 3, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base, base * 2, 3, 2, 1), _in(base * 2), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base * 2, base * 4, 3, 2, 1), _in(base * 4), nn.LeakyReLU(0.2, inplace=True),
        )
        self.fc = nn.Linear(base * 4, n_classes)

    def forward(self, x):
        y = self.features(x * 2.0 - 1.0)
        y = F.adaptive_avg_pool2d(y, 1).flatten(1)
        return self.fc(y)


class PerceptualFeatures(nn.Module):
    """Frozen feature extractor for the perceptual loss.

    Default is a fixed-seed randomly initialized 4-layer conv stack; a
    pretrained state dict can be loaded instead via ``load_state``.  Weights
    are immutable during all training.
    """

    def __init__(self, in_ch, seed: int = 0x1DEA, base=16, tap: int = 4):
        super().__init__()
        self.tap = tap
        gen_state = torch.get_rng_state()
        torch.manual_seed(seed)
        self.layers = nn.ModuleList([
            nn.Sequential(nn.Conv2d(in_ch, base, 3, 1, 1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(base, base * 2, 3, 2, 1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(base * 2, base * 2, 3, 1, 1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(base * 2, base * 4, 3, 2, 1), nn.ReLU()),
        ])
        for layer in self.layers:
            nn.init.kaiming_normal_(layer[0].weight)
            nn.init.zeros_(layer[0].bias)
        torch.set_rng_state(gen_state)
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):  # stays frozen even inside a training loop
        return super().train(False)

    def load_state(self, path):
        self.load_state_dict(torch.load(path, map_location="cpu"))
        self.freeze()

    def forward(self, x):
        y = x * 2.0 - 1.0
        for layer in self.layers[:self.tap]:
            y = layer(y)
        return y
