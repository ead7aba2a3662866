"""Run configuration: flat namespaced keys with documented defaults.

Config files are plain text, one ``key = value`` per line, '#' comments.
Unknown keys are rejected; every key has a default, and the fully resolved
document is echoed into each run directory.
"""

from __future__ import annotations

import hashlib
import os

from .closedform import SolverConfig
from .errors import ConfigError
from .features import FEATURE_LAYERS, FeatTrainConfig
from .generator import GanTrainConfig
from .losses import LossWeights, MODES
from .matting import MattingTrainConfig, VARIANTS
from .optimize import OptimConfig

ENV_HOME = "LATENT_MATTE_HOME"

# key -> (default, help)
DEFAULTS = {
    "run.seed": (0, "root seed; all randomness derives from it"),
    "run.workers": (1, "parallel per-image workers for enhance/ablate"),
    "data.resolution": (64, "square image side, power of two >= 32"),
    "data.train_count": (500, "training split size for synth-data"),
    "data.test_count": (20, "test split size for synth-data"),
    "data.trimap_band": (3, "erosion band (pixels) when deriving trimaps"),
    "gan.steps": (1500, "adversarial training steps"),
    "gan.batch": (16, "GAN batch size"),
    "gan.lr": (2.5e-3, "GAN Adam learning rate"),
    "gan.beta1": (0.0, "GAN Adam beta1"),
    "gan.beta2": (0.99, "GAN Adam beta2"),
    "gan.r1_weight": (1.0, "R1 gradient penalty weight on reals"),
    "feat.steps": (800, "feature autoencoder training steps"),
    "feat.batch": (16, "feature net batch size"),
    "feat.lr": (2e-3, "feature net learning rate"),
    "feat.layer": ("enc2", "encoder layer used by the perceptual loss"),
    "matting.steps": (2500, "trimap/matting model training steps"),
    "matting.batch": (16, "matting batch size"),
    "matting.lr": (1.5e-3, "matting Adam learning rate"),
    "matting.unk_weight": (2.0, "L1 weight inside the unknown region"),
    "matting.aux_ce_weight": (0.5, "confidence-head CE weight, trimap-free"),
    "matting.variant": ("trimap_based", "trimap_based | trimap_free"),
    "matting.finetune_steps": (600, "fine-tuning steps on mixed sets"),
    "matting.finetune_lr": (5e-4, "fine-tuning learning rate"),
    "fg.tol": (1e-8, "relative residual tolerance, exact CG solve"),
    "fg.max_iters": (2000, "CG iteration cap, exact solve"),
    "fg.inloop_iters": (30, "fixed CG iterations in the differentiable mode"),
    "fg.stop_gradient": (False, "treat in-loop foreground layers as constants"),
    "fg.tikhonov": (1e-6, "diagonal regularization of the layer system"),
    "loss.l1": (1.0, "entropy term weight"),
    "loss.l2": (1.0, "compositional adversarial term weight"),
    "loss.l3": (10.0, "portrait consistency term weight"),
    "loss.l4": (10.0, "perceptual term weight"),
    "loss.mode": ("enhance", "enhance | generate | trimap_free"),
    "opt.steps": (500, "latent optimization steps"),
    "opt.lr": (1e-4, "latent optimization learning rate"),
    "opt.weight_decay": (5e-4, "decoupled weight decay on the latents"),
    "opt.beta1": (0.9, "latent Adam beta1"),
    "opt.beta2": (0.999, "latent Adam beta2"),
    "opt.decay_scope": ("both", "weight decay applies to: both | w | n"),
    "opt.subset": ("both", "latents that receive gradients: both | w | n"),
    "opt.fg_estimator": ("closed_form", "closed_form | gt_alpha"),
    "opt.invert_steps": (500, "inversion optimization steps"),
    "opt.invert_lr": (1e-2, "inversion learning rate"),
    "bg.redraw": ("per_step", "background redraw: per_step | per_image"),
    "bg.pool_seed": (1000, "seed of the random background pool"),
    "eval.images": (20, "benchmark image count"),
    "eval.seeds": (3, "benchmark seed count"),
    "eval.variants": ("all", "comma list of ablation variants, or 'all'"),
    "gen.count": (8, "pseudo-GT pairs to generate"),
    "gen.source_model_id": ("local", "manifest tag for generated pseudo sets"),
    "paths.root": ("", f"artifact root; default ${ENV_HOME} or ./latentmatte_runs"),
    "paths.data": ("", "dataset run dir (contains train/ and test/)"),
    "paths.gan": ("", "gan checkpoint file"),
    "paths.feat": ("", "feature-net checkpoint file"),
    "paths.matting": ("", "matting checkpoint file"),
    "paths.image": ("", "input image for invert"),
    "paths.pred": ("", "enhance run dir consumed by evaluate"),
    "paths.pseudo": ("", "comma list of pseudo-GT dataset dirs"),
}

_CHOICES = {
    "matting.variant": VARIANTS,
    "loss.mode": MODES,
    "opt.decay_scope": ("both", "w", "n"),
    "opt.subset": ("both", "w", "n"),
    "opt.fg_estimator": ("closed_form", "gt_alpha"),
    "bg.redraw": ("per_step", "per_image"),
    "feat.layer": FEATURE_LAYERS,
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for key {key!r}: {raw!r}") from None


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: v for k, (v, _) in DEFAULTS.items()}
        bad = []
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                bad.append(k)
            else:
                self.values[k] = v
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        self._validate()

    def _validate(self):
        bad = []
        for key, choices in _CHOICES.items():
            if self.values[key] not in choices:
                bad.append(f"{key} must be one of {choices}, got {self.values[key]!r}")
        for key in ("opt.steps", "fg.inloop_iters", "fg.max_iters", "data.train_count",
                    "data.test_count", "data.trimap_band", "eval.images", "eval.seeds"):
            if self.values[key] < 0:
                bad.append(f"{key} must be >= 0")
        if bad:
            raise ConfigError("; ".join(bad))

    def __getitem__(self, key: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        return self.values[key]

    def set(self, key: str, raw: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        self.values[key] = _parse_value(key, raw)
        self._validate()

    def echo(self) -> str:
        lines = [f"{k} = {self._fmt(self.values[k])}" for k in DEFAULTS]
        return "\n".join(lines) + "\n"

    @staticmethod
    def _fmt(v) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(v)

    def run_hash(self, command: str) -> str:
        h = hashlib.sha256()
        h.update(command.encode())
        h.update(self.echo().encode())
        return h.hexdigest()[:12]

    # resolved artifact paths

    def root(self) -> str:
        if self.values["paths.root"]:
            return self.values["paths.root"]
        return os.environ.get(ENV_HOME, "./latentmatte_runs")

    def path(self, name: str, default_name: str | None = None) -> str:
        explicit = self.values[f"paths.{name}"]
        if explicit:
            return explicit
        if default_name is None:
            return ""
        return os.path.join(self.root(), default_name)

    # typed sub-configurations

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(v["loss.l1"], v["loss.l2"], v["loss.l3"], v["loss.l4"])

    def solver_config(self) -> SolverConfig:
        v = self.values
        return SolverConfig(tol=v["fg.tol"], max_iters=v["fg.max_iters"],
                            inloop_iters=v["fg.inloop_iters"],
                            tikhonov=v["fg.tikhonov"],
                            stop_gradient=v["fg.stop_gradient"])

    def optim_config(self, seed: int | None = None) -> OptimConfig:
        v = self.values
        return OptimConfig(
            steps=v["opt.steps"], learning_rate=v["opt.lr"],
            weight_decay=v["opt.weight_decay"],
            seed=v["run.seed"] if seed is None else seed,
            background_pool_seed=v["bg.pool_seed"], record_trace=True,
            beta1=v["opt.beta1"], beta2=v["opt.beta2"],
            decay_scope=v["opt.decay_scope"], bg_redraw=v["bg.redraw"],
            optimize_subset=v["opt.subset"], mode=v["loss.mode"],
            fg_estimator=v["opt.fg_estimator"], invert_steps=v["opt.invert_steps"],
            invert_lr=v["opt.invert_lr"], feat_layer=v["feat.layer"],
            solver=self.solver_config())

    def gan_train_config(self) -> GanTrainConfig:
        v = self.values
        return GanTrainConfig(steps=v["gan.steps"], batch=v["gan.batch"],
                              lr=v["gan.lr"], beta1=v["gan.beta1"],
                              beta2=v["gan.beta2"], r1_weight=v["gan.r1_weight"])

    def matting_train_config(self) -> MattingTrainConfig:
        v = self.values
        return MattingTrainConfig(batch=v["matting.batch"], lr=v["matting.lr"],
                                  beta1=0.9, beta2=0.999,
                                  unk_weight=v["matting.unk_weight"],
                                  aux_ce_weight=v["matting.aux_ce_weight"])

    def feat_train_config(self) -> FeatTrainConfig:
        v = self.values
        return FeatTrainConfig(batch=v["feat.batch"], lr=v["feat.lr"])


def load_config(path: str | None = None, overrides=(), seed: int | None = None,
                workers: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = line.partition("=")
                cfg.set(key.strip(), raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        cfg.set(key.strip(), raw)
    if seed is not None:
        cfg.set("run.seed", str(seed))
    if workers is not None:
        cfg.set("run.workers", str(workers))
    return cfg
