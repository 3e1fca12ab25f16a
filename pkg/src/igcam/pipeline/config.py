"""Run configuration, flat so it round-trips through key=value files."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from ..crf import CrfConfig
from ..diffmodel import ModelSpec
from ..errors import ConfigurationError
from ..influence import InfluenceConfig
from ..losses import stage_lambdas


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    # backbone
    channels_per_scale: int = 8
    activation: str = "softplus"
    # optimiser
    learning_rate: float = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    # full batch on the default 64-image split; see README for why
    batch_size: int = 64
    epochs_stage1: int = 300
    epochs_stage2: int = 50
    epochs_stage3: int = 50
    # epochs without validation improvement before a stage ends; 0 disables
    early_stopping_patience: int = 0
    augment: bool = True
    # influence refresh cadence, in stage-local iterations
    cadence_stage1: int = 100
    cadence_stage2: int = 50
    cadence_stage3: int = 25
    # influence estimation
    influence_method: str = "cg"
    damping: float = 0.01
    cg_max_iter: int = 100
    cg_tol: float = 1e-6
    lissa_depth: int = 100
    lissa_scale: float = 10.0
    lissa_repeats: int = 4
    coarse_stride: int = 4
    window_radius: int = 2
    eps: float = 0.01
    num_test: int = 16
    # proposals
    grid_sizes: tuple = (8, 16, 32)
    quant_levels: int = 4
    # component toggles
    instance_guidance: bool = True
    multiscale: bool = True
    influence: bool = True
    crf: bool = True
    # forced-weight baseline: sample weights fixed to 1 even with influence on
    unit_sample_weights: bool = False
    attention_alpha: float = 0.1
    # inference
    threshold_base: float = 0.6
    threshold_slope: float = 0.2
    crf_w_gauss: float = 3.0
    crf_w_bilateral: float = 5.0
    crf_theta_gamma: float = 3.0
    crf_theta_alpha: float = 30.0
    crf_theta_beta: float = 0.13
    crf_iterations: int = 5
    crf_influence_blend: float = 0.3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if min(self.cadence_stage1, self.cadence_stage2, self.cadence_stage3) < 1:
            raise ConfigurationError("cadences must be >= 1")
        if self.early_stopping_patience < 0:
            raise ConfigurationError("early_stopping_patience must be >= 0")
        if min(self.epochs_stage1, self.epochs_stage2, self.epochs_stage3) < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.influence_method not in ("exact", "cg", "lissa"):
            raise ConfigurationError(f"unknown influence method {self.influence_method!r}")

    def model_spec(self, image_size: int = 32, num_classes: int = 3) -> ModelSpec:
        return ModelSpec(
            input_size=(image_size, image_size, 3),
            channels_per_scale=self.channels_per_scale,
            num_classes=num_classes,
            rng_seed=self.seed,
            activation=self.activation,
        )

    def influence_config(self) -> InfluenceConfig:
        return InfluenceConfig(
            damping=self.damping,
            cg_max_iter=self.cg_max_iter,
            cg_tol=self.cg_tol,
            lissa_depth=self.lissa_depth,
            lissa_scale=self.lissa_scale,
            lissa_repeats=self.lissa_repeats,
            coarse_stride=self.coarse_stride,
            window_radius=self.window_radius,
            eps=self.eps,
            seed=self.seed,
        )

    def crf_config(self) -> CrfConfig:
        return CrfConfig(
            w_gauss=self.crf_w_gauss,
            w_bilateral=self.crf_w_bilateral,
            theta_gamma=self.crf_theta_gamma,
            theta_alpha=self.crf_theta_alpha,
            theta_beta=self.crf_theta_beta,
            iterations=self.crf_iterations,
            influence_blend=self.crf_influence_blend,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_sizes"] = list(self.grid_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if "grid_sizes" in d:
            d["grid_sizes"] = tuple(d["grid_sizes"])
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class StageSchedule:
    stage: int
    lambdas: tuple
    influence_cadence: int
    augmentation: str
    epochs: int


def stage_schedules(cfg: TrainConfig) -> list[StageSchedule]:
    cad = (cfg.cadence_stage1, cfg.cadence_stage2, cfg.cadence_stage3)
    eps = (cfg.epochs_stage1, cfg.epochs_stage2, cfg.epochs_stage3)
    aug = "flips_crops" if cfg.augment else "none"
    return [StageSchedule(s, stage_lambdas(s), cad[s - 1], aug, eps[s - 1]) for s in (1, 2, 3)]
