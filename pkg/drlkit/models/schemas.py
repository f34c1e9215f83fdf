"""
Pydantic schemas for configuration records and reports
"""

from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_EPSILON = 8 / 255


class ArchKind(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"
    SMALL_CONV = "small-conv"


class Activation(str, Enum):
    RELU = "relu"


class AttackKind(str, Enum):
    FGSM = "fgsm"
    PGD = "pgd"
    MIM = "mim"
    CW = "cw"
    ENS = "ens"


class Fusion(str, Enum):
    LOSS = "loss"
    LOGIT = "logit"


class TransformKind(str, Enum):
    IDENTITY = "identity"
    GAUSSIAN_NOISE = "gaussian_noise"
    BLUR = "blur"
    CONTRAST = "contrast"
    OCCLUSION = "occlusion"
    CHAIN = "chain"


class ObjectiveKind(str, Enum):
    CE_ONLY = "ce-only"
    DRL_AR = "drl-ar"
    DA = "da"
    AUGMIX = "augmix"
    AUGMAX = "augmax"


class ArKind(str, Enum):
    L1 = "l1"
    L2SQ = "l2sq"
    KL = "kl"


class KLDirection(str, Enum):
    CLEAN_TO_ADV = "clean_to_adv"
    ADV_TO_CLEAN = "adv_to_clean"


class SelectionStrategy(str, Enum):
    CONFIDENCE = "confidence"
    RANDOM = "random"


# Searched optimum per alignment-regularization kind
DEFAULT_LAMBDA = {
    ArKind.L1: 1e-3,
    ArKind.L2SQ: 1e-4,
    ArKind.KL: 1e-3,
}


# Architecture schemas
class ArchSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ArchKind
    input_shape: tuple[int, ...] = Field(..., min_length=1)
    num_classes: int = Field(..., ge=2)
    hidden: tuple[int, ...] = (64, 64)  # mlp layer widths
    channels: tuple[int, ...] = (8, 16)  # small-conv: conv0, conv1
    kernel_size: int = Field(default=3, ge=1)
    activation: Activation = Activation.RELU

    @field_validator("input_shape", "hidden", "channels")
    @classmethod
    def _positive(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(v <= 0 for v in value):
            raise ValueError(f"dimensions must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _kind_geometry(self) -> "ArchSpec":
        if self.kind == ArchKind.MLP and not self.hidden:
            raise ValueError("mlp needs at least one hidden layer")
        if self.kind == ArchKind.SMALL_CONV:
            if len(self.input_shape) != 3:
                raise ValueError(f"small-conv needs a C×H×W input shape, got {self.input_shape}")
            if len(self.channels) != 2:
                raise ValueError("small-conv takes exactly two conv channel counts")
            _, h, w = self.input_shape
            if min(h, w) + 2 * (self.kernel_size // 2) < self.kernel_size:
                raise ValueError(f"kernel {self.kernel_size} does not fit {h}x{w} input")
        return self

    @property
    def input_dim(self) -> int:
        dim = 1
        for d in self.input_shape:
            dim *= d
        return dim


# Attack schemas
class AttackConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(default=DEFAULT_EPSILON, ge=0.0)
    alpha: Optional[float] = Field(default=None, gt=0.0)  # None -> epsilon / 4
    steps: int = Field(default=10, ge=0)
    random_start: bool = False
    momentum_decay: float = Field(default=1.0, ge=0.0)
    kappa: float = Field(default=0.0, ge=0.0)
    valid_range: tuple[float, float] = (0.0, 1.0)
    seed: int = Field(default=0, ge=0)
    fusion: Fusion = Fusion.LOSS  # ensemble: mean of losses or of logits
    retarget: bool = False  # C&W: re-choose the target class every step

    @model_validator(mode="after")
    def _check_range(self) -> "AttackConfig":
        lo, hi = self.valid_range
        if not lo < hi:
            raise ValueError(f"valid_range must satisfy lo < hi, got {self.valid_range}")
        return self

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else self.epsilon / 4


class AttackSpec(BaseModel):
    """One attack requested from the dataset forge."""
    model_config = ConfigDict(frozen=True)

    kind: AttackKind
    config: AttackConfig = Field(default_factory=lambda: AttackConfig(random_start=True))
    fraction: float = Field(default=1.0, gt=0.0, le=1.0)  # share of the pool attacked

    @property
    def tag(self) -> str:
        return self.kind.value


# Corruption schemas
class TransformSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: TransformKind
    severity: int = Field(default=1, ge=0, le=5)
    seed: int = Field(default=0, ge=0)
    chain_length: int = Field(default=3, ge=1)
    valid_range: tuple[float, float] = (0.0, 1.0)


# Training schemas
class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default=30, ge=0)
    select_size: Optional[int] = Field(default=None, ge=1)  # None -> every pair
    batch_size: int = Field(default=256, ge=1)
    lr: float = Field(default=0.1, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    objective: ObjectiveKind = ObjectiveKind.CE_ONLY
    ar_kind: ArKind = ArKind.L1
    lam: Optional[float] = Field(default=None, ge=0.0)  # None -> DEFAULT_LAMBDA[ar_kind]
    seed: int = Field(default=0, ge=0)
    selection: SelectionStrategy = SelectionStrategy.CONFIDENCE
    ce_on_adversarial: bool = True
    kl_direction: KLDirection = KLDirection.CLEAN_TO_ADV
    transform_kind: TransformKind = TransformKind.GAUSSIAN_NOISE
    transform_severity: int = Field(default=2, ge=0, le=5)
    augmax_candidates: int = Field(default=3, ge=1)
    prefetch: int = Field(default=2, ge=0)

    @property
    def effective_lambda(self) -> float:
        if self.objective in (ObjectiveKind.CE_ONLY, ObjectiveKind.DA):
            return 0.0
        return self.lam if self.lam is not None else DEFAULT_LAMBDA[self.ar_kind]


# Threat model schemas
class ThreatSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    knows_arch: bool = False
    knows_dataset: bool = False
    knows_loss: bool = False

    @model_validator(mode="after")
    def _not_white_box(self) -> "ThreatSpec":
        if self.knows_arch and self.knows_dataset and self.knows_loss:
            raise ValueError("an adversary knowing M, D' and L is white-box, not a threat setting")
        return self

    @property
    def label(self) -> str:
        parts = [
            name for name, known in (
                ("M", self.knows_arch), ("D'", self.knows_dataset), ("L", self.knows_loss)
            ) if known
        ]
        return "&".join(parts) if parts else "realistic"

    @classmethod
    def enumerate(cls) -> list["ThreatSpec"]:
        """Realistic setting followed by the six adaptive ones."""
        return [
            cls(),
            cls(knows_arch=True),
            cls(knows_dataset=True),
            cls(knows_loss=True),
            cls(knows_arch=True, knows_dataset=True),
            cls(knows_arch=True, knows_loss=True),
            cls(knows_dataset=True, knows_loss=True),
        ]


# Desk-scale task schemas
class SyntheticTaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_classes: int = Field(default=10, ge=2)
    channels: int = Field(default=1, ge=1)
    size: int = Field(default=16, ge=4)
    n_train: int = Field(default=2000, ge=1)
    n_test: int = Field(default=1000, ge=1)
    robust_amplitude: float = Field(default=0.16, gt=0.0)
    nonrobust_amplitude: float = Field(default=0.02, ge=0.0)
    noise: float = Field(default=0.1, ge=0.0)
    smoothing: int = Field(default=4, ge=1)  # template block size in pixels


# Report schemas
class ThreatRow(BaseModel):
    setting: str
    knows_arch: bool
    knows_dataset: bool
    knows_loss: bool
    substitute_arch: ArchKind
    substitute_data: str  # "D" or "D'"
    substitute_objective: ObjectiveKind
    robust_accuracy: float = Field(..., ge=0.0, le=100.0)


class EvalReport(BaseModel):
    defense: str = Field(..., min_length=1)
    clean_accuracy: float = Field(..., ge=0.0, le=100.0)
    robust_accuracy: dict[str, float] = Field(default_factory=dict)
    per_class_accuracy: list[float] = Field(default_factory=list)
    classwise_std: float = Field(default=0.0, ge=0.0)
    corruption_accuracy: dict[int, float] = Field(default_factory=dict)
    data_amount: int = Field(default=0, ge=0)
    threat_rows: list[ThreatRow] = Field(default_factory=list)

    @field_validator("robust_accuracy", "corruption_accuracy")
    @classmethod
    def _percentages(cls, value: dict) -> dict:
        for key, acc in value.items():
            if not 0.0 <= acc <= 100.0:
                raise ValueError(f"accuracy for {key} outside [0, 100]: {acc}")
        return value

    @field_validator("per_class_accuracy")
    @classmethod
    def _per_class(cls, value: list[float]) -> list[float]:
        if any(not 0.0 <= acc <= 100.0 for acc in value):
            raise ValueError("per-class accuracies must lie in [0, 100]")
        return value
