"""Latent-code optimization pipelines.

Inversion of an image into (style rows, noise maps), per-image enhancement
under the four-term objective with everything downstream frozen, pseudo-GT
portrait generation, fine-tuning on mixed sample sets, and the ablation
harness used by the benchmark suite.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .closedform import SolverConfig, composite, estimate_foreground_inloop
from .dataset import Sample, DatasetManifest, derive_trimap, quantize_alpha, \
    sample_background, save_dataset
from .errors import DivergenceError, FrozenModelError, LatentMatteError
from .generator import LatentPair
from .losses import FrozenModels, LossWeights, compute_objective, entropy_loss, \
    perceptual_loss, portrait_consistency_loss
from .matting import MattingStack, MattingTrainConfig, clone_stack, train_matting_model, \
    trimap_from_confidence
from .metrics import MetricReport, MetricRow, evaluate_dataset, _METRIC_NAMES
from .torchutil import to_chw, to_hwc

# thresholds for deriving trimaps from continuous predicted mattes
PSEUDO_FG_THRESH = 0.98
PSEUDO_BG_THRESH = 0.02


@dataclass
class OptimConfig:
    steps: int = 500
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    seed: int = 0
    background_pool_seed: int = 1000
    record_trace: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    decay_scope: str = "both"       # both | w | n
    bg_redraw: str = "per_step"     # per_step | per_image
    optimize_subset: str = "both"   # both | w | n
    mode: str = "enhance"           # enhance | generate | trimap_free
    fg_estimator: str = "closed_form"  # closed_form | gt_alpha
    invert_steps: int = 500
    invert_lr: float = 1e-2
    feat_layer: str = "enc2"
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0 or self.invert_lr <= 0:
            raise ValueError("learning rates must be > 0")


@dataclass
class EnhancementResult:
    latents_star: LatentPair
    enhanced_image: np.ndarray
    enhanced_alpha: np.ndarray
    enhanced_trimap: np.ndarray
    trace: list
    perturbation: np.ndarray
    original_image: np.ndarray
    baseline_alpha: np.ndarray
    baseline_trimap: np.ndarray
    composite: np.ndarray
    baseline_composite: np.ndarray
    initial_entropy: float
    final_entropy: float


@dataclass
class PseudoGtPair:
    image: np.ndarray        # the initial generated portrait, pre-enhancement
    alpha: np.ndarray        # the enhanced alpha matte
    source_model_id: str = ""


def perturbation_image(enhanced: np.ndarray, original: np.ndarray) -> np.ndarray:
    """Difference image remapped to full range; zero difference maps to 0.5."""
    d = enhanced.astype(np.float64) - original.astype(np.float64)
    s = np.abs(d).max()
    if s == 0.0:
        return np.full(enhanced.shape, 0.5, dtype=np.float32)
    return (0.5 + d / (2.0 * s)).astype(np.float32)


def trimap_entropy(models: FrozenModels, image: np.ndarray) -> float:
    """Mean trimap-confidence entropy of an image under the frozen stack."""
    with torch.no_grad():
        conf = models.matting.trimap_confidence_t(to_chw(image))
        return float(entropy_loss(conf))


def reference_alpha(models: FrozenModels, image: np.ndarray):
    """(alpha, confidence) the frozen stack predicts for a raw image."""
    with torch.no_grad():
        img = to_chw(image)
        if models.variant == "trimap_based":
            conf = models.matting.trimap_confidence_t(img)
            alpha = models.matting.alpha_t(img, conf)
        else:
            alpha, conf = models.matting.alpha_trimap_free_t(img)
    return alpha.numpy(), conf.numpy().transpose(1, 2, 0)


def invert(image: np.ndarray, models: FrozenModels,
           cfg: OptimConfig | None = None) -> LatentPair:
    """Optimize latents from (mean style, zero noise) so the generator
    reproduces the image, under the consistency and perceptual terms only."""
    cfg = cfg or OptimConfig()
    models.freeze()
    g = models.generator
    target = to_chw(image)
    if target.shape[-1] != g.arch.resolution:
        raise LatentMatteError(
            f"image is {tuple(target.shape[-2:])}, generator expects "
            f"{g.arch.resolution}x{g.arch.resolution}")
    latents = LatentPair(g.broadcast(g.mean_style()).detach(),
                         g.zero_noise()).requires_grad_()
    opt = torch.optim.Adam(latents.tensors(), lr=cfg.invert_lr,
                           betas=(cfg.beta1, cfg.beta2))
    for step in range(cfg.invert_steps):
        img = g.synthesize(latents)
        loss = portrait_consistency_loss(img, target) \
            + perceptual_loss(img, target, models.features, cfg.feat_layer)
        if not torch.isfinite(loss):
            raise DivergenceError(step, f"inversion loss diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return latents.detach()


def _resolve_mode(cfg_mode: str, variant: str) -> str:
    if variant == "trimap_free" and cfg_mode == "enhance":
        return "trimap_free"
    return cfg_mode


def enhance(input, models: FrozenModels, weights: LossWeights | None = None,
            cfg: OptimConfig | None = None, original: np.ndarray | None = None,
            gt_alpha: np.ndarray | None = None) -> EnhancementResult:
    """Per-image latent optimization under the full objective.

    ``input`` is either a real image (inverted first) or an existing
    LatentPair. ``original`` overrides the consistency target when latents
    are passed directly (e.g. precomputed inversions). ``gt_alpha`` routes
    the foreground estimation off the predicted matte for the GT-alpha
    ablation variant.
    """
    weights = weights or LossWeights()
    cfg = cfg or OptimConfig()
    models.freeze()
    hash_before = models.frozen_hash()
    g = models.generator
    res = g.arch.resolution

    if isinstance(input, np.ndarray):
        original_np = input if original is None else original
        latents0 = invert(input, models, cfg)
    elif isinstance(input, LatentPair):
        latents0 = input.detach()
        if original is not None:
            original_np = original
        else:
            with torch.no_grad():
                original_np = to_hwc(g.synthesize(latents0))
    else:
        raise TypeError(f"input must be an image array or LatentPair, got {type(input)}")

    mode = _resolve_mode(cfg.mode, models.variant)
    original_t = to_chw(original_np)
    gt_alpha_t = None
    if cfg.fg_estimator == "gt_alpha":
        if gt_alpha is None:
            raise LatentMatteError("fg_estimator='gt_alpha' needs gt_alpha")
        gt_alpha_t = torch.from_numpy(np.asarray(gt_alpha)).float()
    elif cfg.fg_estimator != "closed_form":
        raise LatentMatteError(f"unknown foreground estimator {cfg.fg_estimator!r}")

    baseline_alpha, baseline_conf = reference_alpha(models, original_np)
    initial_entropy = trimap_entropy(models, original_np)

    latents = latents0.clone()
    use_w = cfg.optimize_subset in ("both", "w")
    use_n = cfg.optimize_subset in ("both", "n")
    if cfg.optimize_subset not in ("both", "w", "n"):
        raise LatentMatteError(f"unknown latent subset {cfg.optimize_subset!r}")
    latents.w.requires_grad_(use_w)
    for m in latents.n:
        m.requires_grad_(use_n)
    groups = []
    if use_w:
        groups.append({"params": [latents.w],
                       "weight_decay": cfg.weight_decay if cfg.decay_scope in ("both", "w") else 0.0})
    if use_n:
        groups.append({"params": list(latents.n),
                       "weight_decay": cfg.weight_decay if cfg.decay_scope in ("both", "n") else 0.0})
    opt = torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))

    bg_rng = np.random.default_rng(cfg.background_pool_seed)
    bg_t = None
    trace = []
    for step in range(cfg.steps):
        if bg_t is None or cfg.bg_redraw == "per_step":
            bg_id = int(bg_rng.integers(0, 2**31 - 1))
            bg_t = to_chw(sample_background(bg_id, (res, res)))
        breakdown, total = compute_objective(
            latents, models, weights, mode, bg_t, original_t,
            cfg.solver, gt_alpha_t, cfg.feat_layer)
        if not torch.isfinite(total):
            raise DivergenceError(step, f"objective diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if cfg.record_trace:
            trace.append(breakdown)

    latents_star = latents.detach()
    with torch.no_grad():
        img_t = g.synthesize(latents_star)
        enhanced_image = to_hwc(img_t)
        if models.variant == "trimap_based":
            conf_t = models.matting.trimap_confidence_t(img_t)
            alpha_t = models.matting.alpha_t(img_t, conf_t)
        else:
            alpha_t, conf_t = models.matting.alpha_trimap_free_t(img_t)
        final_entropy = float(entropy_loss(conf_t))
        enhanced_alpha = alpha_t.numpy()
        enhanced_trimap = trimap_from_confidence(conf_t.numpy().transpose(1, 2, 0))

        display_bg = to_chw(sample_background(
            int(bg_rng.integers(0, 2**31 - 1)), (res, res)))
        f_est, _ = estimate_foreground_inloop(img_t, alpha_t, cfg.solver)
        comp = to_hwc(composite(f_est, display_bg, alpha_t).clamp(0.0, 1.0))
        base_f, _ = estimate_foreground_inloop(
            original_t, torch.from_numpy(baseline_alpha), cfg.solver)
        base_comp = to_hwc(composite(
            base_f, display_bg, torch.from_numpy(baseline_alpha)).clamp(0.0, 1.0))

    if models.frozen_hash() != hash_before:
        raise FrozenModelError("frozen model parameters changed during enhancement")

    return EnhancementResult(
        latents_star=latents_star,
        enhanced_image=enhanced_image,
        enhanced_alpha=enhanced_alpha,
        enhanced_trimap=enhanced_trimap,
        trace=trace,
        perturbation=perturbation_image(enhanced_image, original_np),
        original_image=np.asarray(original_np, dtype=np.float32),
        baseline_alpha=baseline_alpha,
        baseline_trimap=trimap_from_confidence(baseline_conf),
        composite=comp,
        baseline_composite=base_comp,
        initial_entropy=initial_entropy,
        final_entropy=final_entropy,
    )


def generate_pseudo_gt(models: FrozenModels, count: int, seed: int,
                       cfg: OptimConfig | None = None,
                       weights: LossWeights | None = None,
                       out_path: str | None = None,
                       source_model_id: str = "local",
                       trimap_band: int = 3) -> list:
    """Sample random latents, enhance in generation mode, and pair each
    initial portrait with its enhanced alpha matte."""
    cfg = cfg or OptimConfig()
    weights = weights or LossWeights()
    from .torchutil import new_generator
    tgen = new_generator(seed)
    g = models.generator
    pairs = []
    for k in range(count):
        latents0 = g.random_latents(tgen)
        with torch.no_grad():
            initial = to_hwc(g.synthesize(latents0))
        cfg_k = replace(cfg, mode="generate",
                        background_pool_seed=(seed * 1000003 + 7919 * k) % (2**31 - 1))
        result = enhance(latents0, models, weights, cfg_k)
        pairs.append(PseudoGtPair(image=initial, alpha=result.enhanced_alpha,
                                  source_model_id=source_model_id))
    if out_path is not None:
        samples = pseudo_pairs_to_samples(pairs, trimap_band)
        manifest = DatasetManifest(
            sample_count=len(samples), resolution=samples[0].alpha.shape,
            seed=seed, trimap_band=trimap_band, split="train",
            source_model_id=source_model_id)
        save_dataset(samples, manifest, out_path)
    return pairs


def pseudo_pairs_to_samples(pairs, trimap_band: int = 3) -> list:
    """Dataset-format samples from pseudo-GT pairs; trimaps are derived with
    loosened thresholds since predicted mattes rarely hit exact 0/1."""
    samples = []
    for p in pairs:
        alpha = quantize_alpha(p.alpha)
        trimap = derive_trimap(alpha, trimap_band,
                               fg_thresh=PSEUDO_FG_THRESH, bg_thresh=PSEUDO_BG_THRESH)
        samples.append(Sample(image=p.image, alpha=alpha, trimap=trimap))
    return samples


def finetune_with_mixed_sets(stack: MattingStack, pseudo_sets: list,
                             original_train: list, steps: int, seed: int,
                             cfg: MattingTrainConfig | None = None) -> MattingStack:
    """Continue matting-model training on the union of the original training
    set and one or more pseudo-GT sets, shuffled under a fixed seed."""
    if not pseudo_sets:
        raise ValueError("at least one pseudo-GT set is required")
    union = list(original_train)
    for ps in pseudo_sets:
        union.extend(ps)
    order = np.random.default_rng(seed).permutation(len(union))
    shuffled = [union[i] for i in order]
    tuned = clone_stack(stack)
    train_matting_model(tuned, shuffled, steps, seed + 1, cfg)
    return tuned


ABLATION_VARIANTS = {
    "baseline": "no enhancement; the frozen stack on the original images",
    "full": "all four terms, both latent surfaces",
    "w_only": "optimize style rows only, noise fixed",
    "n_only": "optimize noise maps only, styles fixed",
    "wo_em": "entropy term removed",
    "wo_ca": "compositional adversarial term removed",
    "wo_pc": "consistency term removed",
    "wo_pp": "perceptual term removed",
    "hyper1": "weights 1,1,1,1",
    "hyper2": "weights 5,5,10,10",
    "fg_gt_alpha": "foreground estimated from the GT matte",
}


def _variant_setup(variant_id: str, base_weights: LossWeights):
    w = replace(base_weights)
    subset = "both"
    fg = "closed_form"
    if variant_id == "w_only":
        subset = "w"
    elif variant_id == "n_only":
        subset = "n"
    elif variant_id == "wo_em":
        w.lambda1 = 0.0
    elif variant_id == "wo_ca":
        w.lambda2 = 0.0
    elif variant_id == "wo_pc":
        w.lambda3 = 0.0
    elif variant_id == "wo_pp":
        w.lambda4 = 0.0
    elif variant_id == "hyper1":
        w = LossWeights(1.0, 1.0, 1.0, 1.0)
    elif variant_id == "hyper2":
        w = LossWeights(5.0, 5.0, 10.0, 10.0)
    elif variant_id == "fg_gt_alpha":
        fg = "gt_alpha"
    elif variant_id != "full":
        raise ValueError(
            f"unknown variant {variant_id!r}; valid: {sorted(ABLATION_VARIANTS)}")
    return w, subset, fg


@dataclass
class VariantResult:
    variant_id: str
    report: MetricReport
    per_seed_reports: list
    mean_initial_entropy: float
    mean_final_entropy: float
    mean_abs_change: float   # mean |enhanced - original| over the benchmark


class EnhancementBenchmark:
    """Enhance a fixed test set under one or more seeds and score it.

    Inversions depend only on the image and the frozen models, so they are
    computed once and shared across variants and seeds.
    """

    def __init__(self, samples, models: FrozenModels,
                 weights: LossWeights | None = None,
                 cfg: OptimConfig | None = None, seeds=(0, 1, 2),
                 workers: int = 1):
        self.samples = list(samples)
        self.models = models
        self.weights = weights or LossWeights()
        self.cfg = cfg or OptimConfig()
        self.seeds = tuple(seeds)
        self.workers = workers
        self._inversions = None
        self._baseline_report = None

    def inversions(self) -> list:
        if self._inversions is None:
            self._inversions = self._map(
                lambda s: invert(s.image, self.models, self.cfg), self.samples)
        return self._inversions

    def _map(self, fn, items):
        if self.workers <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def baseline_report(self) -> MetricReport:
        if self._baseline_report is None:
            alphas = [reference_alpha(self.models, s.image)[0] for s in self.samples]
            self._baseline_report = evaluate_dataset(alphas, self.samples)
        return self._baseline_report

    def run_variant(self, variant_id: str) -> VariantResult:
        if variant_id == "baseline":
            report = self.baseline_report()
            ent = float(np.mean([trimap_entropy(self.models, s.image)
                                 for s in self.samples]))
            return VariantResult(variant_id, report, [report], ent, ent, 0.0)
        weights, subset, fg = _variant_setup(variant_id, self.weights)
        inversions = self.inversions()
        per_seed_reports = []
        all_rows = []
        ent0, ent1, change = [], [], []

        def run_one(args):
            seed, i = args
            sample = self.samples[i]
            cfg_i = replace(
                self.cfg, seed=seed, mode="enhance", optimize_subset=subset,
                fg_estimator=fg, record_trace=False,
                background_pool_seed=(self.cfg.background_pool_seed
                                      + 104729 * i + 15485863 * seed) % (2**31 - 1))
            return enhance(inversions[i], self.models, weights, cfg_i,
                           original=sample.image,
                           gt_alpha=sample.alpha if fg == "gt_alpha" else None)

        for seed in self.seeds:
            results = self._map(run_one, [(seed, i) for i in range(len(self.samples))])
            alphas = [r.enhanced_alpha for r in results]
            ent0.extend(r.initial_entropy for r in results)
            ent1.extend(r.final_entropy for r in results)
            change.extend(float(np.abs(r.enhanced_image - r.original_image).mean())
                          for r in results)
            report = evaluate_dataset(alphas, self.samples)
            per_seed_reports.append(report)
            for row in report.rows:
                all_rows.append(MetricRow(image_id=seed * 100000 + row.image_id,
                                          mse=row.mse, sad=row.sad,
                                          grad=row.grad, conn=row.conn))

        merged = MetricReport(rows=all_rows)
        base = self.baseline_report()
        merged.baseline_name = "baseline"
        merged.improvement_pct = {
            name: 0.0 if base.means[name] == 0
            else 100.0 * (base.means[name] - merged.means[name]) / base.means[name]
            for name in _METRIC_NAMES}
        return VariantResult(variant_id, merged, per_seed_reports,
                             float(np.mean(ent0)), float(np.mean(ent1)),
                             float(np.mean(change)))


def ablation_run(variant_id: str, bench: EnhancementBenchmark) -> MetricReport:
    """Metric report for one ablation variant on the shared benchmark."""
    return bench.run_variant(variant_id).report
