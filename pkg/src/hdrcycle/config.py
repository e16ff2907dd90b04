"""Run configuration: one flat dataclass, loadable from a key=value text file."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .losses import LossSwitches, LossWeights
from .perception import HeuristicParams


# CPU-sized profile: 64x64 crops, a narrow generator and a short, hot schedule.
# Sized so that 200 steps on 8 + 8 toy images (100 epochs at batch 4) finish
# in a few minutes on one core.
DESK_PROFILE = dict(image_size=64, batch=4, base_channels=8, max_channels=128, feedback_channels=16,
                    epochs=100, constant_epochs=50, lr_g=5e-3, lr_d=2.5e-3)


@dataclass
class TrainConfig:
    # schedule
    epochs: int = 170
    constant_epochs: int = 100
    lr_g: float = 4e-4
    lr_d: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch: int = 4
    image_size: int = 512
    seed: int = 0
    max_steps: int = 0  # 0 = no limit
    ckpt_every: int = 1
    out_dir: str = "runs/default"
    device: str = "cpu"

    # generator
    base_channels: int = 32
    max_channels: int = 512
    levels: int = 7
    feedback_iterations: int = 4
    feedback_channels: int = 64
    freeze_encoder: bool = False

    # loss weights
    mu: float = 5000.0
    lambda_cyc: float = 10.0
    id_weight: float = 0.5
    alpha: float = 2.0
    beta: float = 2.0
    delta1: float = 3.0
    delta2: float = 2.0
    delta3: float = 1.5
    tau: float = 0.08
    llm_weight: float = 1.0
    saturating_gan: bool = False

    # ablation switches
    use_gan: bool = True
    use_cyc: bool = True
    use_id: bool = True
    use_con: bool = True
    use_sem: bool = True
    use_llm: bool = True
    use_fusion: bool = True
    use_gating: bool = True

    # semantic / perception plug-ins
    encoder: str = "standin"
    segmenter: str = "stub"
    provider: str = "heuristic"
    t_over: float = 0.95
    t_under: float = 0.05
    blur_sigma: float = 1.5
    lap_threshold: float = 0.1
    mask_temperature: float = 0.02
    gate_floor: float = 0.5

    def __post_init__(self):
        if self.constant_epochs > self.epochs:
            raise ValueError("constant_epochs must not exceed epochs")
        if self.batch < 2:
            raise ValueError("batch must be >= 2 (contrastive loss needs negatives)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**{**DESK_PROFILE, **overrides})

    @property
    def perception_gating(self) -> bool:
        # the perception module feeds both the llm loss and the gates; switching
        # the llm term off removes the module, so gating goes with it
        return self.use_gating and self.use_llm

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cyc, self.id_weight, self.alpha, self.beta, self.delta1,
                           self.delta2, self.delta3, self.tau, self.llm_weight)

    @property
    def switches(self) -> LossSwitches:
        return LossSwitches(self.use_gan, self.use_cyc, self.use_id, self.use_con, self.use_sem, self.use_llm)

    @property
    def heuristic(self) -> HeuristicParams:
        return HeuristicParams(self.t_over, self.t_under, self.blur_sigma, self.lap_threshold, self.mask_temperature)

    def generator_config(self, direction: str) -> GeneratorConfig:
        return GeneratorConfig(levels=self.levels, base_channels=self.base_channels,
                               max_channels=self.max_channels, feedback_iterations=self.feedback_iterations,
                               feedback_channels=self.feedback_channels, direction=direction,
                               freeze_encoder=self.freeze_encoder, mu=self.mu)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(name: str, text: str):
    ftype = {f.name: f.type for f in fields(TrainConfig)}
    if name not in ftype:
        raise KeyError(f"unknown config key {name!r}")
    t = ftype[name]
    text = text.strip()
    if t == "bool":
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if t == "int":
        return int(text)
    if t == "float":
        return float(text)
    return text


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def write_config_file(cfg: TrainConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")
