from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from numeric_helpers import sha256_hex

# CIFAR-10 per-channel statistics, used until a dataset mean is measured
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

SCHEMA_VERSION = 1


# Enums
class DatasetSource(str, Enum):
    cifar10 = "cifar10"
    synthetic = "synthetic"


class AugmentationKind(str, Enum):
    none = "none"
    cutout = "cutout"
    mixup = "mixup"
    cutmix = "cutmix"
    pixmix_style = "pixmix_style"


class CorruptionKind(str, Enum):
    gaussian_noise = "gaussian_noise"
    shot_noise = "shot_noise"
    impulse_noise = "impulse_noise"
    box_blur = "box_blur"
    brightness = "brightness"
    contrast = "contrast"
    pixelate = "pixelate"


class PerturbationKind(str, Enum):
    noise = "noise"
    translation = "translation"


# Base Models
class BaseConfigModel(BaseModel):
    """Base class for every file-backed configuration block"""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# Model and training
class ArchitectureSpec(BaseConfigModel):
    widths: Tuple[int, int, int] = (32, 64, 128)
    num_classes: int = Field(default=10, ge=2)
    image_size: int = 32
    input_mean: Tuple[float, float, float] = CIFAR10_MEAN
    input_std: Tuple[float, float, float] = CIFAR10_STD

    @field_validator("widths")
    @classmethod
    def validate_widths(cls, v):
        if any(width < 1 for width in v):
            raise ValueError("Every conv width must be a positive integer")
        return v

    @field_validator("image_size")
    @classmethod
    def validate_image_size(cls, v):
        if v != 32:
            raise ValueError("Only 32x32 inputs are supported")
        return v


class AugmentationSpec(BaseConfigModel):
    kind: AugmentationKind = AugmentationKind.none
    hole_size: int = Field(default=16, ge=0, le=32)
    beta_alpha: float = Field(default=1.0, gt=0)
    k_max: int = Field(default=4, ge=0)
    beta: float = Field(default=3.0, gt=0)
    mixer_pool_size: int = Field(default=16, ge=1)
    roughness: float = Field(default=0.6, gt=0, le=1)


class MaskSpec(BaseConfigModel):
    rows: int = Field(default=8, ge=1)
    cols: int = Field(default=8, ge=1)
    r1: float = Field(default=0.7, ge=0, le=1)
    fill: Tuple[float, float, float] = CIFAR10_MEAN

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @property
    def num_masked(self) -> int:
        # round() ties to even
        return int(round(self.r1 * self.num_patches))


class TrainConfig(BaseConfigModel):
    r1: float = Field(default=0.7, ge=0, le=1)
    lam: float = Field(default=1.0, ge=0, alias="lambda")
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=64, ge=1)
    seed: int = 0
    lr0: float = Field(default=0.05, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    mask_rows: int = Field(default=8, ge=1)
    mask_cols: int = Field(default=8, ge=1)

    @field_validator("lam")
    @classmethod
    def validate_lambda_finite(cls, v):
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError("lambda must be finite")
        return v

    @property
    def boost_enabled(self) -> bool:
        return self.lam > 0


class DatasetSpec(BaseConfigModel):
    source: DatasetSource = DatasetSource.synthetic
    path: Optional[str] = None
    allow_synthetic_fallback: bool = True
    num_classes: int = Field(default=10, ge=2)
    per_class: int = Field(default=250, ge=1)
    train_size: int = Field(default=2000, ge=1)
    test_size: int = Field(default=500, ge=1)


class PgdConfig(BaseConfigModel):
    epsilon: float = Field(default=8 / 255, ge=0)
    step_size: float = Field(default=2 / 255, ge=0)
    num_steps: int = Field(default=10, ge=1)
    random_start: bool = True


class MetricSettings(BaseConfigModel):
    pgd: PgdConfig = Field(default_factory=PgdConfig)
    calibration_bins: int = Field(default=10, ge=1)
    eval_size: int = Field(default=200, ge=1)
    corruption_kinds: List[CorruptionKind] = Field(default_factory=lambda: list(CorruptionKind))
    severities: List[int] = Field(default_factory=lambda: [1, 2, 3])
    num_sequences: int = Field(default=40, ge=1)
    sequence_length: int = Field(default=8, ge=2)
    noise_sigma_max: float = Field(default=0.06, ge=0)
    max_shift: int = Field(default=4, ge=0)
    ood_count: int = Field(default=200, ge=1)

    @field_validator("severities")
    @classmethod
    def validate_severities(cls, v):
        if not v or any(s not in (1, 2, 3) for s in v):
            raise ValueError("Severities must be a nonempty subset of 1, 2, 3")
        return v


def default_order_fractions() -> List[float]:
    return [round(0.05 * k, 2) for k in range(1, 20)]


class InteractionSettings(BaseConfigModel):
    grid_rows: int = Field(default=4, ge=1)
    grid_cols: int = Field(default=4, ge=1)
    order_fractions: List[float] = Field(default_factory=default_order_fractions)
    num_pairs: int = Field(default=6, ge=1)
    budget: int = Field(default=512, ge=1)  # delta-v samples per image
    num_images: int = Field(default=16, ge=1)

    @property
    def num_players(self) -> int:
        return self.grid_rows * self.grid_cols


class ProxyParams(BaseConfigModel):
    a: float = 0.2
    b: float = 0.2
    c: float = 0.8

    @model_validator(mode="after")
    def validate_ordering(self):
        if not (0 <= self.a <= self.b <= self.c <= 1):
            raise ValueError("Proxy parameters must satisfy 0 <= a <= b <= c <= 1")
        return self


class GridSpec(BaseConfigModel):
    r1_values: List[float] = Field(..., min_length=1)
    lambda_values: List[float] = Field(..., min_length=1)

    @field_validator("r1_values")
    @classmethod
    def validate_r1_values(cls, v):
        if any(not 0 <= r <= 1 for r in v):
            raise ValueError("Every r1 must lie in [0, 1]")
        return v

    @field_validator("lambda_values")
    @classmethod
    def validate_lambda_values(cls, v):
        if any(lam < 0 for lam in v):
            raise ValueError("Every lambda must be >= 0")
        return v


class ExperimentConfig(BaseConfigModel):
    name: str = Field(default="experiment", min_length=1)
    seed: int = 0
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    architecture: ArchitectureSpec = Field(default_factory=ArchitectureSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    interactions: InteractionSettings = Field(default_factory=InteractionSettings)
    metrics: MetricSettings = Field(default_factory=MetricSettings)
    proxy: ProxyParams = Field(default_factory=ProxyParams)
    grid: Optional[GridSpec] = None
    output_dir: str = "./runs"

    @model_validator(mode="after")
    def validate_class_count(self):
        if self.architecture.num_classes != self.dataset.num_classes:
            raise ValueError("architecture.num_classes must equal dataset.num_classes")
        return self

    @model_validator(mode="after")
    def inherit_train_seed(self):
        # an explicit train.seed wins; otherwise training streams follow the experiment seed
        if "seed" not in self.train.model_fields_set:
            self.train = self.train.model_copy(update={"seed": self.seed})
        return self

    def config_hash(self) -> str:
        """First 16 hex digits of SHA-256 over the canonical config, output_dir excluded."""
        return sha256_hex(self.model_dump(mode="json", by_alias=True, exclude={"output_dir"}))[:16]


# Artifacts
class TrainingLogRecord(BaseModel):
    epoch: int
    lr: float
    loss: float
    ce: float
    l_boost: float
    train_acc: float


class ReportMetadata(BaseModel):
    model_hash: str
    config_hash: Optional[str] = None
    dataset_manifest: Dict[str, object] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)


class SafetyReport(BaseModel):
    """Full metric bundle for one trained model; rates are fractions in [0, 1]"""

    schema_version: int = SCHEMA_VERSION
    clean_error: Optional[float] = Field(default=None, ge=0, le=1)
    mce: Optional[float] = Field(default=None, ge=0, le=1)
    mfr: Optional[float] = Field(default=None, ge=0, le=1)
    rms_clean: Optional[float] = Field(default=None, ge=0, le=1)
    rms_corrupt: Optional[float] = Field(default=None, ge=0, le=1)
    pgd_error: Optional[float] = Field(default=None, ge=0, le=1)
    auroc: Optional[float] = Field(default=None, ge=0, le=1)
    fpr_at_95tpr: Optional[float] = Field(default=None, ge=0, le=1)
    unavailable: Dict[str, str] = Field(default_factory=dict)
    metadata: ReportMetadata

    model_config = ConfigDict(extra="forbid")


METRIC_FIELDS = (
    "clean_error",
    "mce",
    "mfr",
    "rms_clean",
    "rms_corrupt",
    "pgd_error",
    "auroc",
    "fpr_at_95tpr",
)


class InteractionProfile(BaseModel):
    n: int
    orders: List[int]
    J: List[float]
    stderr: List[float]
    normalization: float
    num_images: int
    config_hash: Optional[str] = None

    @model_validator(mode="after")
    def validate_lengths(self):
        if not (len(self.orders) == len(self.J) == len(self.stderr)):
            raise ValueError("orders, J and stderr must have equal length")
        return self

    @property
    def fractions(self) -> List[float]:
        return [order / self.n for order in self.orders]


class ProxyResult(BaseModel):
    M: float
    params: ProxyParams
    profile_hash: str


class CorrelationRow(BaseModel):
    variant: str
    M: float
    metrics: Dict[str, Optional[float]]


class CorrelationTable(BaseModel):
    params: ProxyParams
    rows: List[CorrelationRow]
    pearson: Dict[str, Optional[float]]


class GridRow(BaseModel):
    r1: float
    lam: float = Field(alias="lambda")
    config_hash: str
    clean_error: Optional[float] = None
    mce: Optional[float] = None
    mfr: Optional[float] = None
    rms_clean: Optional[float] = None
    rms_corrupt: Optional[float] = None
    pgd_error: Optional[float] = None
    auroc: Optional[float] = None
    fpr_at_95tpr: Optional[float] = None
    M: Optional[float] = None
    error: Optional[str] = None

    model_config = ConfigDict(populate_by_name=True)


class ProxySearchRow(BaseModel):
    params: ProxyParams
    mean_abs_r: Optional[float] = None
    pearson: Dict[str, Optional[float]] = Field(default_factory=dict)


class WilcoxonSummary(BaseModel):
    statistic: float
    p_value: float
    significant: bool
    n: int
    method: str


class VariantComparison(BaseModel):
    variant: str
    baseline: str
    metric: str
    seeds: List[int]
    baseline_mean: float
    variant_mean: float
    wins: int  # seeds where the variant's metric is lower than the baseline's
    wilcoxon: Optional[WilcoxonSummary] = None
    wilcoxon_unavailable: Optional[str] = None
    mid_band_gain: Optional[List[float]] = None  # variant minus baseline, per seed
    mid_band_wins: Optional[int] = None
