"""Style-based generator and discriminator, desk scale.

Synthesis is driven by two latent surfaces that later get optimized
directly: a per-layer style matrix (one row per synthesis layer, rows free
to diverge) and one single-channel noise map per block scale carrying
high-frequency detail. Styles modulate features per channel; noise is added
per block through a learned per-channel gain. The output is squashed to
[0, 1] by a sigmoid so gradients never vanish at the bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import save_checkpoint, load_checkpoint
from .errors import DivergenceError, LatentMatteError
from .torchutil import init_conv_, init_linear_, new_generator, state_to_arrays, \
    load_state_from_arrays


class ShapeError(LatentMatteError):
    pass


@dataclass
class GanArch:
    resolution: int = 64
    z_dim: int = 64
    w_dim: int = 64
    base_res: int = 8
    base_channels: int = 48
    min_channels: int = 16
    mapping_layers: int = 3

    def block_resolutions(self):
        res = [self.base_res]
        while res[-1] < self.resolution:
            res.append(res[-1] * 2)
        return res

    def channels(self, res: int) -> int:
        halvings = int(np.log2(res // self.base_res))
        return max(self.min_channels, self.base_channels // (2 ** halvings))

    @property
    def num_layers(self) -> int:
        return 2 * len(self.block_resolutions())


@dataclass
class LatentPair:
    """The optimization variables: style rows plus per-scale noise maps."""
    w: torch.Tensor          # (L, w_dim)
    n: list                  # noise maps, each (r, r)

    def clone(self) -> "LatentPair":
        return LatentPair(self.w.clone(), [m.clone() for m in self.n])

    def detach(self) -> "LatentPair":
        return LatentPair(self.w.detach().clone(), [m.detach().clone() for m in self.n])

    def requires_grad_(self, flag: bool = True) -> "LatentPair":
        self.w.requires_grad_(flag)
        for m in self.n:
            m.requires_grad_(flag)
        return self

    def tensors(self):
        return [self.w] + list(self.n)

    def to_arrays(self, prefix: str = "latent.") -> dict:
        out = {prefix + "w": self.w.detach().cpu().numpy()}
        for i, m in enumerate(self.n):
            out[f"{prefix}n{i}"] = m.detach().cpu().numpy()
        return out

    @staticmethod
    def from_arrays(arrays: dict, prefix: str = "latent.") -> "LatentPair":
        w = torch.from_numpy(np.asarray(arrays[prefix + "w"]))
        n = []
        i = 0
        while f"{prefix}n{i}" in arrays:
            n.append(torch.from_numpy(np.asarray(arrays[f"{prefix}n{i}"])))
            i += 1
        return LatentPair(w, n)


class MappingNet(nn.Module):
    def __init__(self, arch: GanArch):
        super().__init__()
        dims = [arch.z_dim] + [arch.w_dim] * arch.mapping_layers
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(arch.mapping_layers))

    def reset_parameters(self, gen):
        for layer in self.layers:
            init_linear_(layer, gen)

    def forward(self, z):
        x = z
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.silu(x)
        return x


class ModulatedConv(nn.Module):
    """Per-channel feature modulation from a style row, then a 3x3 conv."""

    def __init__(self, in_ch, out_ch, w_dim):
        super().__init__()
        self.affine = nn.Linear(w_dim, in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def reset_parameters(self, gen):
        init_linear_(self.affine, gen, std_scale=0.25)
        with torch.no_grad():
            self.affine.bias.fill_(1.0)
        init_conv_(self.conv, gen)

    def forward(self, x, w_row):
        s = self.affine(w_row)
        return self.conv(x * s.unsqueeze(-1).unsqueeze(-1))


class SynthesisBlock(nn.Module):
    def __init__(self, in_ch, out_ch, w_dim, upsample):
        super().__init__()
        self.upsample = upsample
        self.conv1 = ModulatedConv(in_ch, out_ch, w_dim)
        self.conv2 = ModulatedConv(out_ch, out_ch, w_dim)
        self.noise_gain = nn.Parameter(torch.empty(out_ch))

    def reset_parameters(self, gen):
        self.conv1.reset_parameters(gen)
        self.conv2.reset_parameters(gen)
        with torch.no_grad():
            self.noise_gain.fill_(0.5)

    def forward(self, x, w_rows, noise):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.silu(self.conv1(x, w_rows[:, 0]))
        x = self.conv2(x, w_rows[:, 1])
        x = x + self.noise_gain.view(1, -1, 1, 1) * noise
        return F.silu(x)


class Generator(nn.Module):
    def __init__(self, arch: GanArch | None = None, seed: int = 0):
        super().__init__()
        self.arch = arch or GanArch()
        a = self.arch
        res_list = a.block_resolutions()
        self.const = nn.Parameter(torch.empty(a.channels(a.base_res), a.base_res, a.base_res))
        blocks = []
        in_ch = a.channels(a.base_res)
        for i, res in enumerate(res_list):
            out_ch = a.channels(res)
            blocks.append(SynthesisBlock(in_ch, out_ch, a.w_dim, upsample=i > 0))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(in_ch, 3, 1)
        self.mapping = MappingNet(a)
        self.reset_parameters(new_generator(seed))

    def reset_parameters(self, gen):
        with torch.no_grad():
            self.const.normal_(0.0, 1.0, generator=gen)
        for b in self.blocks:
            b.reset_parameters(gen)
        init_conv_(self.to_rgb, gen)
        self.mapping.reset_parameters(gen)

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        """Feed-forward map from the input latent to the intermediate space."""
        return self.mapping(z)

    def broadcast(self, wv: torch.Tensor) -> torch.Tensor:
        """One style vector copied onto every synthesis layer."""
        return wv.unsqueeze(-2).repeat_interleave(self.arch.num_layers, dim=-2)

    def noise_shapes(self):
        return [(r, r) for r in self.arch.block_resolutions()]

    def zero_noise(self, dtype=torch.float32) -> list:
        return [torch.zeros(r, r, dtype=dtype) for r, _ in self.noise_shapes()]

    def random_noise(self, gen, dtype=torch.float32) -> list:
        return [torch.randn(r, r, generator=gen, dtype=dtype)
                for r, _ in self.noise_shapes()]

    def random_latents(self, gen, dtype=torch.float32) -> LatentPair:
        z = torch.randn(self.arch.z_dim, generator=gen, dtype=dtype)
        w = self.broadcast(self.map_latent(z)).detach()
        return LatentPair(w, self.random_noise(gen, dtype=dtype))

    def mean_style(self, samples: int = 256, seed: int = 17) -> torch.Tensor:
        """Average intermediate latent; the inversion starting point."""
        gen = new_generator(seed)
        dtype = self.const.dtype
        with torch.no_grad():
            z = torch.randn(samples, self.arch.z_dim, generator=gen, dtype=dtype)
            return self.map_latent(z).mean(dim=0)

    def _check_latents(self, w, noise):
        a = self.arch
        if w.shape[-2:] != (a.num_layers, a.w_dim):
            raise ShapeError(
                f"style matrix must be {a.num_layers}x{a.w_dim} (layers x w_dim), "
                f"got {tuple(w.shape)}")
        res_list = a.block_resolutions()
        if len(noise) != len(res_list):
            raise ShapeError(f"expected {len(res_list)} noise maps, got {len(noise)}")
        for i, (m, r) in enumerate(zip(noise, res_list)):
            if m.shape[-2:] != (r, r):
                raise ShapeError(
                    f"noise map {i} (block at {r}x{r}) has shape {tuple(m.shape)}")

    def synthesize(self, latents, noise=None) -> torch.Tensor:
        """Image in [0, 1] from a LatentPair or (style matrix, noise list).

        Unbatched input (L, w_dim) yields (3, H, W); batched (B, L, w_dim)
        with (B, 1, r, r) noise maps yields (B, 3, H, W).
        """
        if isinstance(latents, LatentPair):
            w, noise = latents.w, latents.n
        else:
            w = latents
        self._check_latents(w, noise)
        unbatched = w.dim() == 2
        if unbatched:
            w = w.unsqueeze(0)
            noise = [m.view(1, 1, *m.shape[-2:]) for m in noise]
        x = self.const.unsqueeze(0).expand(w.shape[0], -1, -1, -1)
        for i, block in enumerate(self.blocks):
            x = block(x, w[:, 2 * i:2 * i + 2], noise[i])
        img = torch.sigmoid(self.to_rgb(x))
        return img.squeeze(0) if unbatched else img


class Discriminator(nn.Module):
    def __init__(self, arch: GanArch | None = None, seed: int = 0):
        super().__init__()
        self.arch = arch or GanArch()
        res = self.arch.resolution
        chans = [3]
        convs = []
        r = res
        while r > 4:
            chans.append(min(16 * 2 ** len(convs), 64))
            convs.append(nn.Conv2d(chans[-2], chans[-1], 3, stride=2, padding=1))
            r //= 2
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(chans[-1] * r * r, 1)
        self.reset_parameters(new_generator(seed))

    def reset_parameters(self, gen):
        for c in self.convs:
            init_conv_(c, gen)
        init_linear_(self.head, gen)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        unbatched = img.dim() == 3
        if unbatched:
            img = img.unsqueeze(0)
        res = self.arch.resolution
        if img.shape[-3:] != (3, res, res):
            raise ShapeError(f"discriminator expects 3x{res}x{res} images, "
                             f"got {tuple(img.shape)}")
        x = img
        for c in self.convs:
            x = F.silu(c(x))
        logit = self.head(x.flatten(1)).squeeze(1)
        return logit.squeeze(0) if unbatched else logit


def discriminate(disc: Discriminator, image) -> float:
    """Scalar realism logit for one numpy or torch image."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()
    with torch.no_grad():
        return float(disc(image))


@dataclass
class GanTrainConfig:
    steps: int = 1500
    batch: int = 16
    lr: float = 2.5e-3
    beta1: float = 0.0
    beta2: float = 0.99
    r1_weight: float = 1.0


@dataclass
class GanCheckpoint:
    generator: Generator
    discriminator: Discriminator
    arch: GanArch
    seed: int

    def save(self, path: str) -> None:
        arrays = state_to_arrays(self.generator, "g.")
        arrays.update(state_to_arrays(self.discriminator, "d."))
        save_checkpoint(path, arrays, {
            "kind": "gan", "seed": self.seed, "arch": asdict(self.arch)})

    @staticmethod
    def load(path: str) -> "GanCheckpoint":
        arrays, desc = load_checkpoint(path)
        if desc.get("kind") != "gan":
            raise LatentMatteError(f"{path}: not a gan checkpoint")
        arch = GanArch(**desc["arch"])
        g = Generator(arch)
        d = Discriminator(arch)
        load_state_from_arrays(g, arrays, "g.")
        load_state_from_arrays(d, arrays, "d.")
        return GanCheckpoint(g, d, arch, desc["seed"])


def train_gan(samples, steps: int, seed: int,
              cfg: GanTrainConfig | None = None,
              arch: GanArch | None = None) -> GanCheckpoint:
    """Adversarial training with the non-saturating logistic loss and an R1
    gradient penalty on real samples."""
    cfg = cfg or GanTrainConfig()
    if not samples:
        raise ValueError("empty dataset")
    arch = arch or GanArch(resolution=samples[0].image.shape[0])
    images = torch.from_numpy(
        np.stack([s.image for s in samples]).transpose(0, 3, 1, 2).copy())

    g = Generator(arch, seed=seed)
    d = Discriminator(arch, seed=seed + 1)
    tgen = new_generator(seed + 2)
    rng = np.random.default_rng(seed + 3)
    g_opt = torch.optim.Adam(g.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    d_opt = torch.optim.Adam(d.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))

    for step in range(steps):
        idx = rng.integers(0, len(samples), size=cfg.batch)
        real = images[idx].clone().requires_grad_(True)
        z = torch.randn(cfg.batch, arch.z_dim, generator=tgen)
        noise = [torch.randn(cfg.batch, 1, r, r, generator=tgen)
                 for r, _ in g.noise_shapes()]

        with torch.no_grad():
            fake = g.synthesize(g.broadcast(g.map_latent(z)), noise)
        d_real = d(real)
        d_fake = d(fake)
        r1_grad = torch.autograd.grad(d_real.sum(), real, create_graph=True)[0]
        r1 = r1_grad.pow(2).sum(dim=(1, 2, 3)).mean()
        loss_d = F.softplus(d_fake).mean() + F.softplus(-d_real).mean() \
            + 0.5 * cfg.r1_weight * r1
        if not torch.isfinite(loss_d):
            raise DivergenceError(step, f"discriminator loss diverged at step {step}")
        d_opt.zero_grad(set_to_none=True)
        loss_d.backward()
        d_opt.step()

        fake = g.synthesize(g.broadcast(g.map_latent(z)), noise)
        loss_g = F.softplus(-d(fake)).mean()
        if not torch.isfinite(loss_g):
            raise DivergenceError(step, f"generator loss diverged at step {step}")
        g_opt.zero_grad(set_to_none=True)
        loss_g.backward()
        g_opt.step()

    return GanCheckpoint(g, d, arch, seed)
