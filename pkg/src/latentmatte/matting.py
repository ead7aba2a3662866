"""Reference trimap and alpha models, frozen during latent optimization.

Both are small encoder-decoder convolutional networks with additive skip
connections. The trimap model maps an image to 3-class logits (BG, UNK, FG
in channel order matching the label values); the matting model maps an
image concatenated with a trimap encoding (one-hot labels or a soft
confidence map) to an alpha matte. A trimap-free variant predicts alpha
plus an auxiliary 3-class confidence from the image alone.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import save_checkpoint, load_checkpoint
from .dataset import BG, UNK, FG
from .errors import DivergenceError, LatentMatteError
from .generator import ShapeError
from .torchutil import init_conv_, new_generator, state_to_arrays, \
    load_state_from_arrays, param_hash, to_chw

VARIANTS = ("trimap_based", "trimap_free")


class UNet(nn.Module):
    """Two-stage encoder-decoder with additive skips; raw logits out."""

    def __init__(self, in_ch: int, out_ch: int, widths=(16, 32, 48)):
        super().__init__()
        c0, c1, c2 = widths
        self.conv_in = nn.Conv2d(in_ch, c0, 3, padding=1)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = nn.Conv2d(c1, c1, 3, padding=1)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(c2, c2, 3, padding=1)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.mid1 = nn.Conv2d(c1, c1, 3, padding=1)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.head = nn.Conv2d(c0, out_ch, 3, padding=1)

    def reset_parameters(self, gen):
        for m in (self.conv_in, self.down1, self.enc1, self.down2, self.enc2,
                  self.up1, self.mid1, self.up0):
            init_conv_(m, gen)
        init_conv_(self.head, gen, std_scale=0.5)

    def forward(self, x):
        e0 = F.silu(self.conv_in(x))
        e1 = F.silu(self.down1(e0))
        e1 = F.silu(self.enc1(e1))
        e2 = F.silu(self.down2(e1))
        e2 = F.silu(self.enc2(e2))
        d1 = F.silu(self.up1(F.interpolate(e2, scale_factor=2, mode="nearest"))) + e1
        d1 = F.silu(self.mid1(d1))
        d0 = F.silu(self.up0(F.interpolate(d1, scale_factor=2, mode="nearest"))) + e0
        return self.head(d0)


def trimap_from_confidence(conf: np.ndarray) -> np.ndarray:
    """Argmax labels with ties broken UNK, then FG, then BG."""
    order = np.array([UNK, FG, BG])
    reordered = np.asarray(conf)[..., order]
    return order[np.argmax(reordered, axis=-1)].astype(np.uint8)


def one_hot_labels(labels: np.ndarray) -> np.ndarray:
    return np.eye(3, dtype=np.float32)[labels]


class MattingStack:
    """Holds the trimap and matting models (or the combined trimap-free net)."""

    def __init__(self, resolution: int = 64, variant: str = "trimap_based",
                 widths=(16, 32, 48), seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.resolution = resolution
        self.variant = variant
        self.widths = tuple(widths)
        self.seed = seed
        gen = new_generator(seed)
        if variant == "trimap_based":
            self.trimap_net = UNet(3, 3, widths)
            self.trimap_net.reset_parameters(gen)
            self.matting_net = UNet(6, 1, widths)
            self.matting_net.reset_parameters(gen)
        else:
            # channel 0: alpha logit; channels 1..3: trimap confidence logits
            self.combined_net = UNet(3, 4, widths)
            self.combined_net.reset_parameters(gen)

    def modules(self):
        if self.variant == "trimap_based":
            return [self.trimap_net, self.matting_net]
        return [self.combined_net]

    def param_hash(self) -> str:
        return param_hash(*self.modules())

    def freeze(self):
        for m in self.modules():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
        return self

    def _check_resolution(self, t):
        if t.shape[-2:] != (self.resolution, self.resolution):
            raise ShapeError(
                f"matting stack trained at {self.resolution}x{self.resolution}, "
                f"got {tuple(t.shape[-2:])}")

    # torch paths (differentiable; inputs (3, H, W) or (B, 3, H, W))

    def trimap_confidence_t(self, img: torch.Tensor) -> torch.Tensor:
        self._check_resolution(img)
        unbatched = img.dim() == 3
        x = img.unsqueeze(0) if unbatched else img
        if self.variant == "trimap_based":
            logits = self.trimap_net(x)
        else:
            logits = self.combined_net(x)[:, 1:4]
        conf = torch.softmax(logits, dim=1)
        return conf.squeeze(0) if unbatched else conf

    def alpha_t(self, img: torch.Tensor, trimap: torch.Tensor) -> torch.Tensor:
        """Alpha from image plus a soft confidence (or one-hot) trimap."""
        if self.variant != "trimap_based":
            raise LatentMatteError("trimap-free stack: use alpha_trimap_free_t")
        self._check_resolution(img)
        unbatched = img.dim() == 3
        x = img.unsqueeze(0) if unbatched else img
        t = trimap.unsqueeze(0) if unbatched else trimap
        if t.shape[-3] != 3:
            raise ShapeError(f"trimap encoding must have 3 channels, got {tuple(t.shape)}")
        out = torch.sigmoid(self.matting_net(torch.cat([x, t], dim=1)))[:, 0]
        return out.squeeze(0) if unbatched else out

    def alpha_trimap_free_t(self, img: torch.Tensor):
        if self.variant != "trimap_free":
            raise LatentMatteError("trimap-based stack: use alpha_t")
        self._check_resolution(img)
        unbatched = img.dim() == 3
        x = img.unsqueeze(0) if unbatched else img
        out = self.combined_net(x)
        alpha = torch.sigmoid(out[:, 0])
        conf = torch.softmax(out[:, 1:4], dim=1)
        if unbatched:
            return alpha.squeeze(0), conf.squeeze(0)
        return alpha, conf


def predict_trimap_confidence(stack: MattingStack, image: np.ndarray) -> np.ndarray:
    """H x W x 3 softmax confidence for an H x W x 3 image."""
    with torch.no_grad():
        conf = stack.trimap_confidence_t(to_chw(image))
    return conf.numpy().transpose(1, 2, 0)


def predict_alpha(stack: MattingStack, image: np.ndarray, trimap) -> np.ndarray:
    """Alpha matte from an image and a trimap (labels or confidence)."""
    t = np.asarray(trimap)
    if t.ndim == 2:
        t = one_hot_labels(t.astype(np.int64))
    with torch.no_grad():
        alpha = stack.alpha_t(to_chw(image), to_chw(t))
    return alpha.numpy()


def predict_alpha_trimap_free(stack: MattingStack, image: np.ndarray):
    with torch.no_grad():
        alpha, conf = stack.alpha_trimap_free_t(to_chw(image))
    return alpha.numpy(), conf.numpy().transpose(1, 2, 0)


@dataclass
class MattingTrainConfig:
    batch: int = 16
    lr: float = 1.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    unk_weight: float = 2.0   # L1 weight inside the unknown region
    aux_ce_weight: float = 0.5  # confidence-head weight, trimap-free variant


def _dataset_tensors(samples):
    images = torch.from_numpy(
        np.stack([s.image for s in samples]).transpose(0, 3, 1, 2).copy())
    alphas = torch.from_numpy(np.stack([s.alpha for s in samples])[:, None])
    labels = torch.from_numpy(np.stack([s.trimap for s in samples]).astype(np.int64))
    onehot = torch.from_numpy(
        np.stack([one_hot_labels(s.trimap) for s in samples]).transpose(0, 3, 1, 2).copy())
    return images, alphas, labels, onehot


def _weighted_l1(pred, gt, labels, unk_weight):
    w = torch.where(labels == UNK, unk_weight, 1.0)
    return (w * (pred - gt).abs()).mean()


def train_trimap_model(stack: MattingStack, samples, steps: int, seed: int,
                       cfg: MattingTrainConfig | None = None) -> dict:
    """Cross-entropy against derived GT trimaps; returns the trained arrays."""
    cfg = cfg or MattingTrainConfig()
    if stack.variant != "trimap_based":
        raise LatentMatteError("trimap model only exists in the trimap_based variant")
    images, _, labels, _ = _dataset_tensors(samples)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(stack.trimap_net.parameters(), lr=cfg.lr,
                           betas=(cfg.beta1, cfg.beta2))
    for step in range(steps):
        idx = rng.integers(0, len(samples), size=cfg.batch)
        logits = stack.trimap_net(images[idx])
        loss = F.cross_entropy(logits, labels[idx])
        if not torch.isfinite(loss):
            raise DivergenceError(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return state_to_arrays(stack.trimap_net, "trimap.")


def train_matting_model(stack: MattingStack, samples, steps: int, seed: int,
                        cfg: MattingTrainConfig | None = None) -> dict:
    """L1 on alpha (UNK region up-weighted); trains the combined net for the
    trimap-free variant with an extra cross-entropy on its confidence head."""
    cfg = cfg or MattingTrainConfig()
    images, alphas, labels, onehot = _dataset_tensors(samples)
    rng = np.random.default_rng(seed)
    if stack.variant == "trimap_based":
        net = stack.matting_net
    else:
        net = stack.combined_net
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    for step in range(steps):
        idx = rng.integers(0, len(samples), size=cfg.batch)
        lab = labels[idx]
        if stack.variant == "trimap_based":
            pred = torch.sigmoid(net(torch.cat([images[idx], onehot[idx]], dim=1)))[:, 0]
            loss = _weighted_l1(pred, alphas[idx, 0], lab, cfg.unk_weight)
        else:
            out = net(images[idx])
            pred = torch.sigmoid(out[:, 0])
            loss = _weighted_l1(pred, alphas[idx, 0], lab, cfg.unk_weight) \
                + cfg.aux_ce_weight * F.cross_entropy(out[:, 1:4], lab)
        if not torch.isfinite(loss):
            raise DivergenceError(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    prefix = "alpha." if stack.variant == "trimap_based" else "combined."
    return state_to_arrays(net, prefix)


@dataclass
class MattingCheckpoint:
    stack: MattingStack
    seed: int

    def save(self, path: str) -> None:
        arrays = {}
        if self.stack.variant == "trimap_based":
            arrays.update(state_to_arrays(self.stack.trimap_net, "trimap."))
            arrays.update(state_to_arrays(self.stack.matting_net, "alpha."))
        else:
            arrays.update(state_to_arrays(self.stack.combined_net, "combined."))
        save_checkpoint(path, arrays, {
            "kind": "matting", "variant": self.stack.variant,
            "resolution": self.stack.resolution, "widths": list(self.stack.widths),
            "seed": self.seed})

    @staticmethod
    def load(path: str) -> "MattingCheckpoint":
        arrays, desc = load_checkpoint(path)
        if desc.get("kind") != "matting":
            raise LatentMatteError(f"{path}: not a matting checkpoint")
        stack = MattingStack(resolution=desc["resolution"], variant=desc["variant"],
                             widths=tuple(desc["widths"]), seed=desc["seed"])
        if stack.variant == "trimap_based":
            load_state_from_arrays(stack.trimap_net, arrays, "trimap.")
            load_state_from_arrays(stack.matting_net, arrays, "alpha.")
        else:
            load_state_from_arrays(stack.combined_net, arrays, "combined.")
        return MattingCheckpoint(stack, desc["seed"])


def clone_stack(stack: MattingStack) -> MattingStack:
    out = copy.deepcopy(stack)
    for m in out.modules():
        for p in m.parameters():
            p.requires_grad_(True)
    return out
