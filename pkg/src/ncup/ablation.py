"""Train small model variants side by side and tabulate their validation error."""

from __future__ import annotations

from dataclasses import dataclass, field

from .train import DataConfig, EpochLog, LossConfig, train_loop
from .upsampler import InterpNetConfig, NCUPModel, WeightsNetConfig


@dataclass(frozen=True)
class Variant:
    name: str
    weights: dict = field(default_factory=dict)
    interp: dict = field(default_factory=dict)
    alpha1: float = 0.02

    def build(self, scale: int, seed: int) -> NCUPModel:
        return NCUPModel(scale, WeightsNetConfig(**self.weights), InterpNetConfig(**self.interp), seed=seed)


DEFAULT_VARIANTS = (
    Variant("baseline"),
    Variant("softplus", weights={"final_activation": "softplus"}),
    Variant("max_pooling", interp={"pooling": "max"}),
    Variant("two_downsamplings", interp={"downsamplings": 2}),
)

# reduced budget that still separates every variant from bilinear
ABLATION_DATA = DataConfig(n_train=100, n_val=20)
ABLATION_EPOCHS = 3
ABLATION_LR = 1e-3


@dataclass
class AblationRow:
    name: str
    params: int
    val_epe_ncup: float
    val_epe_bilinear: float
    log: list[EpochLog]

    @property
    def beats_bilinear(self) -> bool:
        return self.val_epe_ncup < self.val_epe_bilinear


def run_ablation(
    variants=DEFAULT_VARIANTS,
    data: DataConfig = ABLATION_DATA,
    epochs: int = ABLATION_EPOCHS,
    lr: float = ABLATION_LR,
    seed: int = 0,
) -> list[AblationRow]:
    """Train each variant from the same seed on the same samples."""
    train_samples, val_samples = data.train_samples(), data.val_samples()
    milestones = (max(epochs - 1, 1),)
    rows = []
    for v in variants:
        model = v.build(data.scale, seed)
        _, log = train_loop(
            model, data, epochs, lr=lr, milestones=milestones, loss_cfg=LossConfig.full_resolution(v.alpha1),
            seed=seed, train_samples=train_samples, val_samples=val_samples,
        )
        last = log[-1]
        rows.append(AblationRow(v.name, model.param_counts()["total"], last.val_epe_ncup, last.val_epe_bilinear, log))
    return rows
