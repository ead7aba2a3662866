"""The four loss terms and the total optimization objective.

Every term is differentiable with respect to the latent pair through the
generator and the frozen downstream models. Entropy and pixel losses are
means (not sums) so the default weights are resolution-independent; logs
are natural, with probabilities floored at 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .closedform import SolverConfig, composite, estimate_foreground_inloop
from .errors import LatentMatteError

PROB_FLOOR = 1e-12

MODES = ("enhance", "generate", "trimap_free")


@dataclass
class LossWeights:
    lambda1: float = 1.0   # entropy
    lambda2: float = 1.0   # compositional adversarial
    lambda3: float = 10.0  # portrait consistency
    lambda4: float = 10.0  # perceptual

    def as_tuple(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


@dataclass
class LossBreakdown:
    em: float = 0.0
    ca: float = 0.0
    pc: float = 0.0
    pp: float = 0.0
    total: float = 0.0
    active_mask: dict = field(default_factory=dict)


@dataclass
class FrozenModels:
    """Everything held fixed while the latents move."""
    generator: object
    discriminator: object
    matting: object          # MattingStack
    features: object         # FeatureNet

    @property
    def variant(self) -> str:
        return self.matting.variant

    def frozen_hash(self) -> str:
        from .torchutil import param_hash
        return param_hash(self.generator, self.discriminator, self.features,
                          *self.matting.modules())

    def freeze(self):
        from .torchutil import freeze_
        freeze_(self.generator)
        freeze_(self.discriminator)
        freeze_(self.features)
        self.matting.freeze()
        return self


def active_terms(mode: str) -> dict:
    """Which loss terms participate, by pipeline mode.

    Generation has no original image, so the consistency and perceptual
    terms drop out; the trimap-free stack exposes no trimap model for the
    entropy term, leaving the adversarial term as the only matting-side
    loss.
    """
    if mode == "enhance":
        return {"em": True, "ca": True, "pc": True, "pp": True}
    if mode == "generate":
        return {"em": True, "ca": True, "pc": False, "pp": False}
    if mode == "trimap_free":
        return {"em": False, "ca": True, "pc": True, "pp": True}
    raise LatentMatteError(f"loss mode must be one of {MODES}, got {mode!r}")


def _as_tensor(x, channel_last: bool):
    if isinstance(x, torch.Tensor):
        return x, True
    arr = np.asarray(x, dtype=np.float64)
    if channel_last and arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr)), False


def entropy_loss(conf):
    """Mean per-pixel 3-class entropy, natural log, 0*log(0) = 0.

    Accepts an H x W x 3 numpy confidence map (returns float) or a
    channel-first torch tensor (returns a scalar tensor in the graph).
    """
    t, was_tensor = _as_tensor(conf, channel_last=True)
    p = t.clamp_min(PROB_FLOOR)
    ent = -(t * torch.log(p)).sum(dim=-3).mean()
    return ent if was_tensor else float(ent)


def compositional_adversarial_loss(comp, discriminator):
    """-log(sigmoid(D(composite))), stabilized as softplus(-logit)."""
    t, was_tensor = _as_tensor(comp, channel_last=True)
    if not was_tensor:
        t = t.to(torch.float32)
        with torch.no_grad():
            return float(F.softplus(-discriminator(t)))
    return F.softplus(-discriminator(t))


def portrait_consistency_loss(gen, orig):
    """Mean squared pixel difference between two images."""
    g, g_tensor = _as_tensor(gen, channel_last=True)
    o, _ = _as_tensor(orig, channel_last=True)
    if g.shape != o.shape:
        raise ValueError(f"shape mismatch: {tuple(g.shape)} vs {tuple(o.shape)}")
    loss = (g - o).pow(2).mean()
    return loss if g_tensor else float(loss)


def perceptual_loss(gen, orig, feat_net, layer: str = "enc2"):
    """Mean squared distance between mid-depth feature maps."""
    g, g_tensor = _as_tensor(gen, channel_last=True)
    o, _ = _as_tensor(orig, channel_last=True)
    if not g_tensor:
        g = g.to(torch.float32)
        o = o.to(torch.float32)
        with torch.no_grad():
            loss = (feat_net.features(g, layer) - feat_net.features(o, layer)).pow(2).mean()
        return float(loss)
    return (feat_net.features(g, layer) - feat_net.features(o, layer)).pow(2).mean()


def compute_objective(latents, models: FrozenModels, weights: LossWeights,
                      mode: str, background: torch.Tensor,
                      original: torch.Tensor | None = None,
                      solver_cfg: SolverConfig | None = None,
                      gt_alpha: torch.Tensor | None = None,
                      feat_layer: str = "enc2"):
    """Full forward chain; returns (LossBreakdown, total tensor).

    synthesize -> trimap confidence -> alpha -> foreground estimation ->
    composite over the random background -> the four terms. Terms that are
    masked out (or weighted zero) are skipped entirely, so zeroing a weight
    removes that term's gradient contribution exactly.
    """
    solver_cfg = solver_cfg or SolverConfig()
    mask = active_terms(mode)
    if models.variant == "trimap_free":
        mask["em"] = False  # no trimap model to take the entropy of
    lam = weights.as_tuple()
    need = {name: mask[name] and lam[i] != 0.0
            for i, name in enumerate(("em", "ca", "pc", "pp"))}
    if (need["pc"] or need["pp"]) and original is None:
        raise LatentMatteError(f"mode {mode!r} needs the original image")

    img = models.generator.synthesize(latents)
    zero = img.sum() * 0.0
    em = ca = pc = pp = zero

    if models.variant == "trimap_based":
        conf = models.matting.trimap_confidence_t(img)
        alpha = models.matting.alpha_t(img, conf)
    else:
        alpha, conf = models.matting.alpha_trimap_free_t(img)

    if need["em"]:
        em = entropy_loss(conf)
    if need["ca"]:
        est_alpha = alpha if gt_alpha is None else gt_alpha
        f_est, _ = estimate_foreground_inloop(img, est_alpha, solver_cfg)
        comp = composite(f_est, background, alpha)
        ca = compositional_adversarial_loss(comp, models.discriminator)
    if need["pc"]:
        pc = portrait_consistency_loss(img, original)
    if need["pp"]:
        pp = perceptual_loss(img, original, models.features, feat_layer)

    total = lam[0] * em + lam[1] * ca + lam[2] * pc + lam[3] * pp

    def _f(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    breakdown = LossBreakdown(
        em=_f(em), ca=_f(ca), pc=_f(pc), pp=_f(pp),
        total=_f(total), active_mask=dict(need))
    return breakdown, total


def total_objective(latents, models: FrozenModels, weights: LossWeights,
                    mode: str, background, original=None,
                    solver_cfg: SolverConfig | None = None,
                    gt_alpha=None, feat_layer: str = "enc2") -> LossBreakdown:
    """Evaluate the objective without keeping the graph."""
    bg, _ = _as_tensor(background, channel_last=True)
    bg = bg.to(torch.float32)
    orig_t = None
    if original is not None:
        orig_t, _ = _as_tensor(original, channel_last=True)
        orig_t = orig_t.to(torch.float32)
    gt_t = None
    if gt_alpha is not None:
        gt_t, _ = _as_tensor(gt_alpha, channel_last=False)
        gt_t = gt_t.to(torch.float32)
    with torch.no_grad():
        breakdown, _ = compute_objective(
            latents, models, weights, mode, bg, orig_t, solver_cfg, gt_t, feat_layer)
    return breakdown
