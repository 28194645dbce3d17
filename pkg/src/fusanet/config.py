"""Run configuration: every hyperparameter and ablation switch, fully
serializable, with a stable hash stored into checkpoints."""

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .losses import LossWeights


@dataclass
class ModelConfig:
    """Network shape and ablation switches.

    `scheme` selects how guiding points are fed during training: "rgb-only"
    trains without points, "points" always feeds them, "points-dropout"
    feeds them but replaces the set with an empty one at random iterations.
    """

    channels: tuple = (16, 24, 32, 48, 64)
    use_confidence_predictor: bool = True
    use_point_branch: bool = True
    use_saliency: bool = True
    shared_two_pass: bool = True
    salient_points: int = 500
    salient_depth_from_gt: bool = False
    branch_channels: int = 2
    point_hidden: int = 8
    stack_hidden: int = 8
    cp_depth: int = 2

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if len(self.channels) != 5:
            raise ValueError(f"exactly 5 per-scale widths required, got {len(self.channels)}")


@dataclass
class TrainConfig:
    lr: float = 7e-4
    lr_decay: float = 0.95
    lr_decay_start: int = 10    # first epoch with a reduced rate (1-indexed)
    lr_decay_every: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 15
    batch_size: int = 8
    scheme: str = "points-dropout"
    zero_point_prob: float = 0.25
    gp_budget: int = 500
    augment: bool = True
    pass1_dc_weight: float = 1.0

    def learning_rate(self, epoch):
        """7e-4 through epoch `lr_decay_start` - 1, then multiplied by
        `lr_decay` once per `lr_decay_every` epochs."""
        if epoch < self.lr_decay_start:
            return self.lr
        steps = (epoch - self.lr_decay_start) // self.lr_decay_every + 1
        return self.lr * self.lr_decay**steps


@dataclass
class DataConfig:
    n_train: int = 200
    n_val: int = 24
    height: int = 64
    width: int = 64
    n_planes: int = 2
    n_spheres: int = 2
    n_boxes: int = 1
    depth_min: float = 2.0
    depth_max: float = 6.0


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text):
        raw = json.loads(text)
        return RunConfig(
            seed=raw.get("seed", 0),
            model=ModelConfig(**raw.get("model", {})),
            train=TrainConfig(**raw.get("train", {})),
            data=DataConfig(**raw.get("data", {})),
            loss=LossWeights(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in raw.get("loss", {}).items()}),
        )

    def digest(self):
        """Stable hash of the canonical JSON form."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]
