from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


# Container descriptors
class CubeDescriptor(BaseModel):
    """
    JSON sidecar of a cube payload

    order names the payload axes from slowest to fastest varying over
    height (h), width (w) and band (b); any of the six permutations.
    """

    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    bands: int = Field(..., ge=1)
    dtype: Literal["f32le", "f32be", "f64le", "u16le", "i16le", "u8"] = "f32le"
    order: Literal["hwb", "hbw", "whb", "wbh", "bhw", "bwh"] = "hwb"
    normalized: bool = False


class GroundTruthDescriptor(BaseModel):
    """JSON sidecar of a ground-truth payload (u16le, 0 = unlabeled)"""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    n_classes: int = Field(..., ge=1)
    dtype: Literal["u16le"] = "u16le"


# Split schemas
class SplitSpec(BaseModel):
    """Labeled (D_l) and test (D_u) coordinates drawn under a seed"""

    seed: int = Field(..., ge=0)
    k0: int = Field(..., ge=1)
    subsample_fraction: float = Field(1.0, gt=0.0, le=1.0)
    n_classes: int = Field(..., ge=1)
    labeled: dict[int, list[tuple[int, int]]]
    test: list[tuple[int, int, int]]

    @property
    def labeled_count(self) -> int:
        return sum(len(coords) for coords in self.labeled.values())


class AugmentedEntry(BaseModel):
    """Provenance of one D_l1 patch; seed is None for an unmodified original"""

    source: tuple[int, int]
    seed: Optional[int] = None


class AugmentedSetManifest(BaseModel):
    """Serializable description of an augmented labeled set"""

    target_count: int
    entries: dict[int, list[AugmentedEntry]]


# Configuration schemas
class TargetName(str, Enum):
    """Recognized target datasets"""

    UP = "UP"
    IP = "IP"
    SA = "SA"
    HC = "HC"
    CUSTOM = "custom"


class StageId(str, Enum):
    """Training stages"""

    SPATIAL = "spatial"
    SPECTRAL = "spectral"
    FINETUNE = "finetune"


class AblationFlags(BaseModel):
    """Structural switches reproducing the ablation variants"""

    model_config = ConfigDict(extra="forbid")

    rm_ssl: bool = True
    rm_transforms: Literal["rotation_mirror", "rotation_only"] = "rotation_mirror"
    hom_fsl: bool = True
    mr_ssl: bool = True
    sslcl: bool = True
    sslcl_views: Literal["augment", "dropout"] = "augment"


class StageConfig(BaseModel):
    """Hyperparameters of one training stage"""

    model_config = ConfigDict(extra="forbid")

    stage: StageId
    episodes: int = Field(..., gt=0)
    lr: float = Field(0.001, gt=0.0)
    rm_batch: int = Field(128, ge=1)
    mr_batch: int = Field(1024, ge=1)
    mask_ratio: float = Field(0.75, ge=0.0, le=1.0)
    sslcl_dropout: float = Field(0.15, ge=0.0, lt=1.0)
    fsl_dropout: float = Field(0.5, ge=0.0, lt=1.0)
    eval_every: int = Field(20, ge=1)
    ways: Optional[int] = Field(None, ge=2)
    shots: int = Field(1, ge=1)
    queries: int = Field(19, ge=1)
    min_class_items: int = Field(400, ge=1)
    items_per_class: int = Field(400, ge=1)
    log_every: int = Field(50, ge=1)
    # Mirrors of the experiment-wide values, left out of serialized configs
    ablation: AblationFlags = Field(default_factory=AblationFlags, exclude=True)
    seed: int = Field(0, ge=0, exclude=True)


class DatasetPaths(BaseModel):
    """Dataset locations; relative paths are resolved against the data root"""

    model_config = ConfigDict(extra="forbid")

    target_cube: Optional[str] = None
    target_gt: Optional[str] = None
    hetero_pool: Optional[str] = None
    homo_cube: Optional[str] = None
    homo_gt: Optional[str] = None


class ExperimentConfig(BaseModel):
    """Fully resolved experiment configuration"""

    model_config = ConfigDict(extra="forbid")

    target: TargetName = TargetName.CUSTOM
    paths: DatasetPaths = Field(default_factory=DatasetPaths)
    output_dir: str = "outputs"
    k0: int = Field(5, ge=1, le=5)
    n_runs: int = Field(10, ge=1)
    base_seed: int = Field(0, ge=0)
    subsample_fraction: float = Field(1.0, gt=0.0, le=1.0)
    augmented_per_class: int = Field(200, ge=1)
    patch_size: int = Field(33, ge=1)
    distance: Literal["euclidean", "squared_euclidean"] = "euclidean"
    pretrain_per_run: bool = False
    strict_transfer: bool = False
    spatial_backbone_weights: Optional[str] = None
    eval_batch_size: int = Field(256, ge=1)
    palette: Optional[dict[int, tuple[int, int, int]]] = None
    ablation: AblationFlags = Field(default_factory=AblationFlags)
    spatial: StageConfig = Field(
        default_factory=lambda: StageConfig(stage=StageId.SPATIAL, episodes=1100)
    )
    spectral: StageConfig = Field(
        default_factory=lambda: StageConfig(stage=StageId.SPECTRAL, episodes=700)
    )
    finetune: StageConfig = Field(
        default_factory=lambda: StageConfig(stage=StageId.FINETUNE, episodes=1000)
    )

    @model_validator(mode="after")
    def sync_stages(self) -> "ExperimentConfig":
        """
        Propagate experiment-wide ablation flags and seed into the stages

        Per-stage values may repeat the experiment-wide ones but must not
        contradict them.
        """
        for name in ("spatial", "spectral", "finetune"):
            stage = getattr(self, name)
            given = stage.model_fields_set
            if "ablation" in given and stage.ablation != self.ablation:
                raise ValueError(
                    f"{name}.ablation differs from the experiment-wide ablation flags; "
                    "set 'ablation' instead"
                )
            if "seed" in given and stage.seed != self.base_seed:
                raise ValueError(f"{name}.seed differs from base_seed; set 'base_seed' instead")
            stage.ablation = self.ablation
            stage.seed = self.base_seed
        if self.augmented_per_class < self.k0:
            raise ValueError("augmented_per_class must be >= k0")
        return self


# Metric schemas
class MetricsReport(BaseModel):
    """Confusion-matrix based evaluation of one run"""

    confusion: list[list[int]]
    per_class_acc: list[float]
    oa: float
    aa: float
    kappa: float
    n_test: int

    @property
    def n_classes(self) -> int:
        return len(self.per_class_acc)


class MeanStd(BaseModel):
    """Sample mean and standard deviation"""

    mean: float
    std: float


class AggregateReport(BaseModel):
    """Multi-run aggregate, laid out like the published results tables"""

    n_runs: int
    n_classes: int
    oa: MeanStd
    aa: MeanStd
    kappa: MeanStd
    per_class: list[MeanStd]
    training_time_s: Optional[MeanStd] = None
    testing_time_s: Optional[MeanStd] = None
    runs: list[MetricsReport] = Field(default_factory=list)


# Run log records
class StepRecord(BaseModel):
    """Loss components and total of one optimizer step"""

    type: Literal["step"] = "step"
    stage: StageId
    episode: int
    losses: dict[str, float]
    total: float


class EvalRecord(BaseModel):
    """Cadence evaluation"""

    type: Literal["eval"] = "eval"
    stage: StageId = StageId.FINETUNE
    episode: int
    report: MetricsReport
    testing_s: float


class TimingRecord(BaseModel):
    """Wall-clock timings of a stage"""

    type: Literal["timing"] = "timing"
    stage: StageId
    training_s: float
    testing_s: float = 0.0


class CheckpointRecord(BaseModel):
    """Checkpoint written by a stage"""

    type: Literal["checkpoint"] = "checkpoint"
    stage: StageId
    path: str


class RunLog(BaseModel):
    """In-memory view of one stage run"""

    stage: StageId
    steps: list[StepRecord] = Field(default_factory=list)
    evaluations: list[EvalRecord] = Field(default_factory=list)
    training_s: float = 0.0
    testing_s: float = 0.0
    checkpoints: list[str] = Field(default_factory=list)
    skipped: bool = False

    @property
    def best(self) -> Optional[EvalRecord]:
        """Cadence evaluation with the highest OA (earliest on ties)"""
        best: Optional[EvalRecord] = None
        for record in self.evaluations:
            if best is None or record.report.oa > best.report.oa:
                best = record
        return best

    @property
    def final(self) -> Optional[EvalRecord]:
        return self.evaluations[-1] if self.evaluations else None
