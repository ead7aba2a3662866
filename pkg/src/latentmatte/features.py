"""Small convolutional autoencoder; its encoder supplies perceptual features.

Stands in for a large pretrained classifier: trained for reconstruction on
the synthetic dataset, then frozen, with a designated mid-depth encoder
layer feeding the perceptual loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import save_checkpoint, load_checkpoint
from .errors import DivergenceError, LatentMatteError
from .torchutil import init_conv_, new_generator, state_to_arrays, load_state_from_arrays

FEATURE_LAYERS = ("enc1", "enc2", "enc3")


class FeatureNet(nn.Module):
    def __init__(self, widths=(12, 24, 32), seed: int = 0):
        super().__init__()
        c1, c2, c3 = widths
        self.widths = tuple(widths)
        self.enc1 = nn.Conv2d(3, c1, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.dec1 = nn.Conv2d(c3, c2, 3, padding=1)
        self.dec2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec3 = nn.Conv2d(c1, 3, 3, padding=1)
        self.reset_parameters(new_generator(seed))

    def reset_parameters(self, gen):
        for m in (self.enc1, self.enc2, self.enc3, self.dec1, self.dec2, self.dec3):
            init_conv_(m, gen)

    def features(self, img: torch.Tensor, layer: str = "enc2") -> torch.Tensor:
        if layer not in FEATURE_LAYERS:
            raise ValueError(f"layer must be one of {FEATURE_LAYERS}, got {layer!r}")
        unbatched = img.dim() == 3
        x = img.unsqueeze(0) if unbatched else img
        x = F.silu(self.enc1(x))
        if layer != "enc1":
            x = F.silu(self.enc2(x))
        if layer == "enc3":
            x = F.silu(self.enc3(x))
        return x.squeeze(0) if unbatched else x

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = F.silu(self.enc1(img))
        x = F.silu(self.enc2(x))
        x = F.silu(self.enc3(x))
        x = F.silu(self.dec1(F.interpolate(x, scale_factor=2, mode="nearest")))
        x = F.silu(self.dec2(F.interpolate(x, scale_factor=2, mode="nearest")))
        return torch.sigmoid(self.dec3(F.interpolate(x, scale_factor=2, mode="nearest")))


@dataclass
class FeatTrainConfig:
    batch: int = 16
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999


def train_feature_net(samples, steps: int, seed: int,
                      cfg: FeatTrainConfig | None = None) -> FeatureNet:
    cfg = cfg or FeatTrainConfig()
    net = FeatureNet(seed=seed)
    images = torch.from_numpy(
        np.stack([s.image for s in samples]).transpose(0, 3, 1, 2).copy())
    rng = np.random.default_rng(seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    for step in range(steps):
        idx = rng.integers(0, len(samples), size=cfg.batch)
        batch = images[idx]
        loss = F.mse_loss(net(batch), batch)
        if not torch.isfinite(loss):
            raise DivergenceError(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return net


def save_feature_net(net: FeatureNet, seed: int, path: str) -> None:
    save_checkpoint(path, state_to_arrays(net, "feat."),
                    {"kind": "feat", "widths": list(net.widths), "seed": seed})


def load_feature_net(path: str) -> FeatureNet:
    arrays, desc = load_checkpoint(path)
    if desc.get("kind") != "feat":
        raise LatentMatteError(f"{path}: not a feature-net checkpoint")
    net = FeatureNet(widths=tuple(desc["widths"]))
    load_state_from_arrays(net, arrays, "feat.")
    return net
