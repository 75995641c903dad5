"""Training stages, evaluation and multi-run experiment orchestration."""

import copy
import logging
import math
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from s4lfsc.augment import mask_batch, rm_expand, sslcl_augment, transform_set
from s4lfsc.data import (
    AugmentedLabeledSet,
    GroundTruthMap,
    HsiCube,
    augment_labeled_set,
    build_splits,
    class_pool_from_gt,
    normalize_cube,
    subsample_classes,
)
from s4lfsc.exceptions import ConfigError, TransferError
from s4lfsc.losses import (
    class_prototypes,
    fsl_episode_loss,
    mr_loss,
    proto_log_probs,
    rm_loss,
    sslcl_loss,
    stage_total,
)
from s4lfsc.metrics import aggregate_runs, compute_metrics, format_report_table, render_map
from s4lfsc.models import (
    SPATIAL_TRANSFER,
    SPECTRAL_TRANSFER,
    FusedNetwork,
    SpatialPretrainNetwork,
    SpectralPretrainNetwork,
    TransferReport,
    named_tensors,
    parameter_count,
    transfer_parameters,
)
from s4lfsc.repositories import (
    CheckpointRepository,
    CubeRepository,
    GroundTruthRepository,
    ReportRepository,
    RunLogRepository,
    SplitRepository,
    load_checkpoint,
    load_image_pool,
    write_json,
)
from s4lfsc.sampler import Episode, PatchExtractor, resize_item, restrict_pool, sample_episode
from s4lfsc.schemas import (
    AggregateReport,
    CheckpointRecord,
    EvalRecord,
    ExperimentConfig,
    MetricsReport,
    RunLog,
    SplitSpec,
    StageConfig,
    StageId,
    StepRecord,
    TimingRecord,
)
from s4lfsc.seeding import derive_rng, seed_torch

logger = logging.getLogger(__name__)

Pool = Mapping[int, Sequence]


def to_tensor(array: np.ndarray, device: str = "cpu", dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(array), dtype=dtype, device=device)


def episode_fsl_loss(
    embed: Callable[[torch.Tensor], torch.Tensor],
    pool: Pool,
    episode: Episode,
    device: str = "cpu",
    squared: bool = False,
) -> torch.Tensor:
    """Prototype loss of one episode; support and query share one forward pass"""
    support = Episode.gather(pool, episode.support)
    query = Episode.gather(pool, episode.query)
    features = embed(to_tensor(np.concatenate([support, query]), device))
    n_support = len(episode.support)
    prototypes = class_prototypes(
        features[:n_support],
        torch.as_tensor(episode.support_labels, device=device),
        episode.ways,
    )
    log_probs = proto_log_probs(features[n_support:], prototypes, squared)
    return fsl_episode_loss(log_probs, torch.as_tensor(episode.query_labels, device=device))


def check_pool(pool: Pool, ways: int, per_class: int, stage: StageId) -> None:
    """
    Raises:
        ConfigError: If fewer than `ways` classes hold `per_class` items
    """
    usable = [c for c in pool if len(pool[c]) >= per_class]
    if len(usable) < ways or len(usable) != len(pool):
        raise ConfigError(
            f"Stage '{stage.value}' pool has {len(usable)} of {len(pool)} classes with "
            f">= {per_class} items; episodes need {ways} classes",
            key=f"{stage.value}.ways",
        )


class StageService:
    """Shared optimizer-step and run-log bookkeeping of the training stages"""

    stage: StageId

    def __init__(
        self,
        config: StageConfig,
        run_log: Optional[RunLogRepository] = None,
        device: str = "cpu",
        squared_distance: bool = False,
    ):
        self.config = config
        self.run_log = run_log
        self.device = device
        self.squared_distance = squared_distance

    def _record(self, record) -> None:
        if self.run_log is not None:
            self.run_log.append(record)

    def _optimize(
        self,
        optimizer: torch.optim.Optimizer,
        components: dict[str, torch.Tensor],
        episode: int,
        log: RunLog,
    ) -> StepRecord:
        total = stage_total(components)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        losses = {name: float(value.detach()) for name, value in components.items()}
        record = StepRecord(
            stage=self.stage, episode=episode, losses=losses, total=math.fsum(losses.values())
        )
        if not math.isfinite(record.total):
            logger.warning(f"Non-finite {self.stage.value} loss at episode {episode}: {losses}")
        log.steps.append(record)
        self._record(record)

        if episode % self.config.log_every == 0 or episode == self.config.episodes:
            parts = ", ".join(f"{k}={v:.4f}" for k, v in losses.items())
            logger.info(
                f"[{self.stage.value}] episode {episode}/{self.config.episodes} "
                f"total={record.total:.4f} ({parts})"
            )
        return record

    def _save(self, model: nn.Module, checkpoints: CheckpointRepository, log: RunLog) -> Path:
        path = checkpoints.save(self.stage.value, named_tensors(model))
        log.checkpoints.append(str(path))
        self._record(CheckpointRecord(stage=self.stage, path=str(path)))
        return path


class SpatialPretrainService(StageService):
    """Stage 1: prototype FSL plus rotation-mirror prediction on 3-channel images"""

    stage = StageId.SPATIAL

    def __init__(
        self,
        config: StageConfig,
        ways: int,
        checkpoints: CheckpointRepository,
        run_log: Optional[RunLogRepository] = None,
        device: str = "cpu",
        squared_distance: bool = False,
        backbone_weights: Optional[str] = None,
    ):
        super().__init__(config, run_log, device, squared_distance)
        self.ways = ways
        self.checkpoints = checkpoints
        self.backbone_weights = backbone_weights

    def run(self, pool: Mapping[int, np.ndarray]) -> tuple[SpatialPretrainNetwork, RunLog]:
        """
        Pretrain the spatial encoder

        Args:
            pool: Class id -> stacked [n][33][33][3] images

        Returns:
            Trained model and its RunLog; the archive is saved as `spatial`

        Raises:
            ConfigError: If the pool cannot supply the configured episodes
        """
        cfg = self.config
        check_pool(pool, self.ways, cfg.shots + cfg.queries, self.stage)
        transforms = sorted(transform_set(cfg.ablation.rm_transforms))

        seed_torch(cfg.seed, "spatial/init")
        model = SpatialPretrainNetwork(n_transforms=len(transforms)).to(self.device)
        if self.backbone_weights is not None:
            weights = load_checkpoint(self.backbone_weights, ("spatial/backbone/",))
            transfer_parameters(model, weights, ("spatial/backbone/",))
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)

        episode_rng = derive_rng(cfg.seed, "spatial/episodes")
        rm_rng = derive_rng(cfg.seed, "spatial/rm")
        refs = [(c, i) for c in sorted(pool) for i in range(len(pool[c]))]

        log = RunLog(stage=self.stage)
        logger.info(
            f"Stage spatial: {cfg.episodes} episodes, {self.ways}-way, "
            f"{parameter_count(model)} parameters, "
            f"rm_ssl={cfg.ablation.rm_ssl} ({len(transforms)} transforms)"
        )
        start = time.perf_counter()
        for episode_index in range(1, cfg.episodes + 1):
            model.train()
            episode = sample_episode(pool, self.ways, cfg.shots, cfg.queries, episode_rng)
            components = {
                "fsl": episode_fsl_loss(
                    model.spatial, pool, episode, self.device, self.squared_distance
                )
            }
            if cfg.ablation.rm_ssl:
                picks = rm_rng.choice(len(refs), size=min(cfg.rm_batch, len(refs)), replace=False)
                base = [pool[refs[p][0]][refs[p][1]] for p in picks]
                expanded = rm_expand(base, transforms)
                windows = np.stack([window for window, _ in expanded])
                labels = np.array([transforms.index(k) for _, k in expanded])
                logits = model.transform_logits(to_tensor(windows, self.device))
                components["rm"] = rm_loss(logits, torch.as_tensor(labels, device=self.device))
            self._optimize(optimizer, components, episode_index, log)

        log.training_s = time.perf_counter() - start
        self._record(TimingRecord(stage=self.stage, training_s=log.training_s))
        self._save(model, self.checkpoints, log)
        return model, log


class SpectralPretrainService(StageService):
    """Stage 2: spectral FSL plus masked reconstruction on a homogeneous cube"""

    stage = StageId.SPECTRAL

    def __init__(
        self,
        config: StageConfig,
        ways: int,
        checkpoints: CheckpointRepository,
        run_log: Optional[RunLogRepository] = None,
        device: str = "cpu",
        squared_distance: bool = False,
    ):
        super().__init__(config, run_log, device, squared_distance)
        self.ways = ways
        self.checkpoints = checkpoints

    def run(
        self, pool: Mapping[int, np.ndarray], target_bands: int
    ) -> tuple[Optional[SpectralPretrainNetwork], RunLog]:
        """
        Pretrain the spectral encoder

        Args:
            pool: Class id -> [n][B_s2] labeled spectra of the homogeneous cube
            target_bands: Band count B_t of the eventual target cube

        Returns:
            Trained model (None when both tasks are ablated) and its RunLog;
            the archive is saved as `spectral`

        Raises:
            ConfigError: If FSL is on and fewer than `ways` classes qualify
        """
        cfg = self.config
        log = RunLog(stage=self.stage)
        if not cfg.ablation.hom_fsl and not cfg.ablation.mr_ssl:
            logger.warning("Stage spectral skipped: hom_fsl and mr_ssl are both off")
            log.skipped = True
            return None, log

        fsl_pool = restrict_pool(
            pool, cfg.min_class_items, cfg.items_per_class, derive_rng(cfg.seed, "spectral/pool")
        )
        if cfg.ablation.hom_fsl:
            check_pool(fsl_pool, self.ways, cfg.shots + cfg.queries, self.stage)
        all_spectra = np.concatenate([np.asarray(pool[c]) for c in sorted(pool)]).astype(np.float32)
        source_bands = all_spectra.shape[1]

        seed_torch(cfg.seed, "spectral/init")
        model = SpectralPretrainNetwork(source_bands, target_bands).to(self.device)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)

        episode_rng = derive_rng(cfg.seed, "spectral/episodes")
        batch_rng = derive_rng(cfg.seed, "spectral/mr")
        logger.info(
            f"Stage spectral: {cfg.episodes} episodes, {source_bands}->{target_bands} bands, "
            f"{parameter_count(model)} parameters, "
            f"hom_fsl={cfg.ablation.hom_fsl}, mr_ssl={cfg.ablation.mr_ssl}"
        )
        start = time.perf_counter()
        for episode_index in range(1, cfg.episodes + 1):
            model.train()
            components: dict[str, torch.Tensor] = {}
            if cfg.ablation.hom_fsl:
                episode = sample_episode(fsl_pool, self.ways, cfg.shots, cfg.queries, episode_rng)
                components["fsl"] = episode_fsl_loss(
                    model.embed, fsl_pool, episode, self.device, self.squared_distance
                )
            if cfg.ablation.mr_ssl:
                size = min(cfg.mr_batch, len(all_spectra))
                picks = batch_rng.choice(len(all_spectra), size=size, replace=False)
                spectra = all_spectra[picks]
                masked, _ = mask_batch(spectra, cfg.mask_ratio, batch_rng)
                x_hat = model.reconstruct(to_tensor(masked, self.device))
                components["mr"] = mr_loss(to_tensor(spectra, self.device), x_hat)
            self._optimize(optimizer, components, episode_index, log)

        log.training_s = time.perf_counter() - start
        self._record(TimingRecord(stage=self.stage, training_s=log.training_s))
        self._save(model, self.checkpoints, log)
        return model, log


@dataclass
class TargetData:
    """Normalized target cube with its (possibly subsampled) ground truth"""

    cube: HsiCube
    gt: GroundTruthMap
    extractor: PatchExtractor

    @classmethod
    def build(cls, cube: HsiCube, gt: GroundTruthMap, patch_size: int) -> "TargetData":
        cube = normalize_cube(cube)
        return cls(cube=cube, gt=gt, extractor=PatchExtractor(cube, patch_size))


class EvaluationService:
    """Prototype classification of test pixels with a frozen fused model"""

    def __init__(self, batch_size: int = 256, device: str = "cpu", squared_distance: bool = False):
        self.batch_size = batch_size
        self.device = device
        self.squared_distance = squared_distance

    @torch.no_grad()
    def embed(
        self, model: FusedNetwork, extractor: PatchExtractor, coords: Sequence[tuple[int, int]]
    ) -> torch.Tensor:
        chunks = []
        for start in range(0, len(coords), self.batch_size):
            windows = extractor.windows(coords[start : start + self.batch_size])
            chunks.append(model.embed(to_tensor(windows, self.device)))
        return torch.cat(chunks) if chunks else torch.zeros(0, model.n_classes)

    @torch.no_grad()
    def prototypes(
        self, model: FusedNetwork, extractor: PatchExtractor, split: SplitSpec
    ) -> torch.Tensor:
        """Class prototypes from the K0 original labeled pixels, class order 1..N"""
        classes = sorted(split.labeled)
        coords = [tuple(c) for class_id in classes for c in split.labeled[class_id]]
        labels = [m for m, class_id in enumerate(classes) for _ in split.labeled[class_id]]
        features = self.embed(model, extractor, coords)
        return class_prototypes(features, torch.as_tensor(labels, device=self.device), len(classes))

    @torch.no_grad()
    def predict(
        self,
        model: FusedNetwork,
        extractor: PatchExtractor,
        prototypes: torch.Tensor,
        coords: Sequence[tuple[int, int]],
    ) -> np.ndarray:
        """Predicted class ids (1..N) for each coordinate"""
        predictions = []
        for start in range(0, len(coords), self.batch_size):
            windows = extractor.windows(coords[start : start + self.batch_size])
            features = model.embed(to_tensor(windows, self.device))
            log_probs = proto_log_probs(features, prototypes, self.squared_distance)
            predictions.append(log_probs.argmax(dim=1).cpu().numpy() + 1)
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)

    def evaluate(
        self, model: FusedNetwork, extractor: PatchExtractor, split: SplitSpec
    ) -> tuple[MetricsReport, np.ndarray]:
        """
        Classify D_u against prototypes of D_l

        Returns:
            MetricsReport and the predicted class per test coordinate
        """
        was_training = model.training
        model.eval()
        try:
            prototypes = self.prototypes(model, extractor, split)
            coords = [(y, x) for y, x, _ in split.test]
            predictions = self.predict(model, extractor, prototypes, coords)
            truth = [class_id for _, _, class_id in split.test]
            report = compute_metrics(truth, predictions, split.n_classes)
        finally:
            model.train(was_training)
        return report, predictions

    def prediction_map(
        self, model: FusedNetwork, target: TargetData, split: SplitSpec
    ) -> np.ndarray:
        """Per-pixel predicted class for every labeled pixel, 0 elsewhere"""
        model.eval()
        prototypes = self.prototypes(model, target.extractor, split)
        ys, xs = np.nonzero(target.gt.labels > 0)
        coords = list(zip(ys.tolist(), xs.tolist()))
        predicted = self.predict(model, target.extractor, prototypes, coords)
        result = np.zeros_like(target.gt.labels)
        result[ys, xs] = predicted
        return result


@dataclass
class FinetuneResult:
    """Outcome of one stage-3 run"""

    model: FusedNetwork
    log: RunLog
    split: SplitSpec
    augmented: AugmentedLabeledSet
    transfers: dict[str, TransferReport] = field(default_factory=dict)

    @property
    def report(self) -> Optional[MetricsReport]:
        best = self.log.best
        return best.report if best is not None else None


class FinetuneService(StageService):
    """Stage 3: target-domain FSL on D_l1 plus view-consistency on D_l"""

    stage = StageId.FINETUNE

    def __init__(
        self,
        config: StageConfig,
        evaluator: EvaluationService,
        checkpoints: Optional[CheckpointRepository] = None,
        run_log: Optional[RunLogRepository] = None,
        device: str = "cpu",
        squared_distance: bool = False,
        augmented_per_class: int = 200,
        strict_transfer: bool = False,
    ):
        super().__init__(config, run_log, device, squared_distance)
        self.evaluator = evaluator
        self.checkpoints = checkpoints
        self.augmented_per_class = augmented_per_class
        self.strict_transfer = strict_transfer

    def _transfer(
        self, model: FusedNetwork, path: Optional[str], include: tuple[str, ...], name: str
    ) -> TransferReport:
        if path is None or not Path(path).exists():
            if self.strict_transfer:
                raise TransferError(f"Missing {name} checkpoint under strict transfer: {path}")
            logger.warning(f"No {name} checkpoint; {name} parameters keep their random init")
            return TransferReport()
        tensors = load_checkpoint(path, include)
        return transfer_parameters(model, tensors, include, strict=self.strict_transfer)

    def build_model(
        self,
        n_bands: int,
        n_classes: int,
        spatial_checkpoint: Optional[str] = None,
        spectral_checkpoint: Optional[str] = None,
    ) -> tuple[FusedNetwork, dict[str, TransferReport]]:
        """Fused model with the transferable parameter subsets loaded"""
        seed_torch(self.config.seed, "finetune/init")
        model = FusedNetwork(
            n_bands, n_classes, self.config.fsl_dropout, self.config.sslcl_dropout
        ).to(self.device)
        transfers = {
            "spatial": self._transfer(model, spatial_checkpoint, SPATIAL_TRANSFER, "spatial"),
            "spectral": self._transfer(model, spectral_checkpoint, SPECTRAL_TRANSFER, "spectral"),
        }
        return model, transfers

    def run(
        self,
        target: TargetData,
        split: SplitSpec,
        spatial_checkpoint: Optional[str] = None,
        spectral_checkpoint: Optional[str] = None,
    ) -> FinetuneResult:
        """
        Fine-tune on the target domain, evaluating every eval_every episodes

        The returned model holds the parameters of the best cadence
        evaluation (highest OA); the RunLog keeps both best and final.

        Raises:
            TransferError: If a checkpoint is missing under strict transfer
        """
        cfg = self.config
        n_classes = split.n_classes
        ways = cfg.ways or n_classes

        originals = {c: target.extractor.windows(split.labeled[c]) for c in sorted(split.labeled)}
        augmented = augment_labeled_set(
            originals,
            split.labeled,
            self.augmented_per_class,
            derive_rng(cfg.seed, "finetune/augment"),
        )
        pool = augmented.as_pool()
        check_pool(pool, ways, cfg.shots + cfg.queries, self.stage)
        sslcl_batch = np.concatenate([originals[c] for c in sorted(originals)])

        model, transfers = self.build_model(
            target.cube.bands, n_classes, spatial_checkpoint, spectral_checkpoint
        )
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        episode_rng = derive_rng(cfg.seed, "finetune/episodes")
        view_rng = derive_rng(cfg.seed, "finetune/views")

        log = RunLog(stage=self.stage)
        best_state = None
        best_oa = -math.inf
        logger.info(
            f"Stage finetune (seed {cfg.seed}): {cfg.episodes} episodes, {ways}-way, "
            f"{parameter_count(model)} parameters, "
            f"SSLCL batch {len(sslcl_batch)}, sslcl={cfg.ablation.sslcl} "
            f"({cfg.ablation.sslcl_views} views)"
        )
        start = time.perf_counter()
        for episode_index in range(1, cfg.episodes + 1):
            model.train()
            episode = sample_episode(pool, ways, cfg.shots, cfg.queries, episode_rng)
            components = {
                "fsl": episode_fsl_loss(
                    model.embed, pool, episode, self.device, self.squared_distance
                )
            }
            if cfg.ablation.sslcl:
                if cfg.ablation.sslcl_views == "augment":
                    view1 = np.stack([sslcl_augment(w, view_rng) for w in sslcl_batch])
                    view2 = np.stack([sslcl_augment(w, view_rng) for w in sslcl_batch])
                else:
                    view1 = view2 = sslcl_batch
                z1 = model.probabilities(to_tensor(view1, self.device))
                z2 = model.probabilities(to_tensor(view2, self.device))
                components["sslcl"] = sslcl_loss(z1, z2)
            self._optimize(optimizer, components, episode_index, log)

            at_cadence = episode_index % cfg.eval_every == 0
            if at_cadence or (episode_index == cfg.episodes and not log.evaluations):
                eval_start = time.perf_counter()
                report, _ = self.evaluator.evaluate(model, target.extractor, split)
                elapsed = time.perf_counter() - eval_start
                log.testing_s += elapsed
                record = EvalRecord(episode=episode_index, report=report, testing_s=elapsed)
                log.evaluations.append(record)
                self._record(record)
                logger.info(
                    f"[finetune] episode {episode_index}: OA={report.oa:.4f} "
                    f"AA={report.aa:.4f} Kappa={report.kappa:.4f} ({elapsed:.1f}s)"
                )
                if report.oa > best_oa:
                    best_oa = report.oa
                    best_state = copy.deepcopy(model.state_dict())

        log.training_s = time.perf_counter() - start - log.testing_s
        self._record(
            TimingRecord(stage=self.stage, training_s=log.training_s, testing_s=log.testing_s)
        )
        if best_state is not None:
            model.load_state_dict(best_state)
        model.eval()
        if self.checkpoints is not None:
            self._save(model, self.checkpoints, log)
        return FinetuneResult(
            model=model, log=log, split=split, augmented=augmented, transfers=transfers
        )


def stack_image_pool(raw_pool: Mapping[int, Sequence[HsiCube]], size: int) -> dict[int, np.ndarray]:
    """Resize heterogeneous items to size x size x 3 and stack them per class"""
    pool: dict[int, np.ndarray] = {}
    for class_id, items in raw_pool.items():
        for item in items:
            if item.bands != 3:
                raise ConfigError(
                    f"Heterogeneous item '{item.name}' has {item.bands} bands, expected 3",
                    key="paths.hetero_pool",
                )
        pool[class_id] = np.stack([resize_item(item.values, size) for item in items])
    return pool


@dataclass
class ExperimentResult:
    """Aggregate report plus the logs of every stage and run"""

    aggregate: AggregateReport
    run_logs: list[RunLog]
    pretrain_logs: list[RunLog]
    output_dir: Path


class ExperimentService:
    """Stages 1 -> 2 -> 3 x n_runs with per-run split redraw and aggregation"""

    def __init__(self, config: ExperimentConfig, output_dir: Path, device: str = "cpu"):
        self.config = config
        self.output_dir = Path(output_dir)
        self.device = device
        self.squared = config.distance == "squared_euclidean"

    @property
    def checkpoint_dir(self) -> Path:
        return self.output_dir / "checkpoints"

    def run_dir(self, run_index: int) -> Path:
        return self.output_dir / "runs" / f"run_{run_index:02d}"

    def snapshot_config(self) -> Path:
        """Write config.resolved.json, enough on its own to re-run the experiment"""
        path = self.output_dir / "config.resolved.json"
        write_json(path, self.config)
        return path

    # data loading
    def load_target(self) -> TargetData:
        """Target cube and ground truth, subsampled once per experiment"""
        cfg = self.config
        cube = CubeRepository.load(cfg.paths.target_cube)
        gt = GroundTruthRepository.load(cfg.paths.target_gt)
        if (cube.height, cube.width) != (gt.height, gt.width):
            raise ConfigError("Target cube and ground truth sizes differ", key="paths.target_gt")
        if cfg.subsample_fraction < 1.0:
            gt = subsample_classes(
                gt, cfg.subsample_fraction, derive_rng(cfg.base_seed, "subsample")
            )
        return TargetData.build(cube, gt, cfg.patch_size)

    def load_hetero_pool(self) -> dict[int, np.ndarray]:
        raw_pool = load_image_pool(self.config.paths.hetero_pool)
        return stack_image_pool(raw_pool, self.config.patch_size)

    def load_homo_pool(self) -> dict[int, np.ndarray]:
        cube = normalize_cube(CubeRepository.load(self.config.paths.homo_cube))
        gt = GroundTruthRepository.load(self.config.paths.homo_gt)
        return class_pool_from_gt(cube, gt)

    def split_for_run(self, gt: GroundTruthMap, run_index: int) -> SplitSpec:
        cfg = self.config
        return build_splits(gt, cfg.k0, cfg.base_seed + run_index, cfg.subsample_fraction)

    # stages
    def _stage_config(self, stage: StageConfig, seed: int) -> StageConfig:
        return stage.model_copy(update={"seed": seed})

    def pretrain_spatial(self, n_classes: int, checkpoint_dir: Path, seed: int) -> RunLog:
        """Stage 1; the archive lands in checkpoint_dir/spatial.ckpt.json"""
        cfg = self.config
        stage_cfg = self._stage_config(cfg.spatial, seed)
        run_log = RunLogRepository(Path(checkpoint_dir) / "spatial.runlog.jsonl")
        run_log.reset()
        service = SpatialPretrainService(
            stage_cfg,
            stage_cfg.ways or n_classes,
            CheckpointRepository(checkpoint_dir),
            run_log,
            self.device,
            self.squared,
            cfg.spatial_backbone_weights,
        )
        _, log = service.run(self.load_hetero_pool())
        return log

    def pretrain_spectral(
        self, n_classes: int, target_bands: int, checkpoint_dir: Path, seed: int
    ) -> RunLog:
        """Stage 2; skipped without touching the homogeneous data under v1"""
        cfg = self.config
        stage_cfg = self._stage_config(cfg.spectral, seed)
        if not stage_cfg.ablation.hom_fsl and not stage_cfg.ablation.mr_ssl:
            logger.warning("Stage spectral skipped; target spectral encoder keeps its random init")
            return RunLog(stage=StageId.SPECTRAL, skipped=True)
        run_log = RunLogRepository(Path(checkpoint_dir) / "spectral.runlog.jsonl")
        run_log.reset()
        service = SpectralPretrainService(
            stage_cfg,
            stage_cfg.ways or n_classes,
            CheckpointRepository(checkpoint_dir),
            run_log,
            self.device,
            self.squared,
        )
        _, log = service.run(self.load_homo_pool(), target_bands)
        return log

    def pretrain(
        self, n_classes: int, target_bands: int, checkpoint_dir: Path, seed: int
    ) -> tuple[Optional[str], Optional[str], list[RunLog]]:
        """Run stages 1 and 2; returns their checkpoint paths and logs"""
        spatial_log = self.pretrain_spatial(n_classes, checkpoint_dir, seed)
        spectral_log = self.pretrain_spectral(n_classes, target_bands, checkpoint_dir, seed)
        spectral_path = spectral_log.checkpoints[-1] if spectral_log.checkpoints else None
        return spatial_log.checkpoints[-1], spectral_path, [spatial_log, spectral_log]

    def finetune(
        self,
        target: TargetData,
        run_index: int,
        spatial_checkpoint: Optional[str],
        spectral_checkpoint: Optional[str],
    ) -> FinetuneResult:
        """One stage-3 run with seed = base_seed + run_index"""
        cfg = self.config
        run_dir = self.run_dir(run_index)
        seed = cfg.base_seed + run_index
        split = self.split_for_run(target.gt, run_index)
        SplitRepository.save(split, run_dir / "split.json")

        run_log = RunLogRepository(run_dir / "runlog.jsonl")
        run_log.reset()
        service = FinetuneService(
            self._stage_config(cfg.finetune, seed),
            EvaluationService(cfg.eval_batch_size, self.device, self.squared),
            CheckpointRepository(run_dir),
            run_log,
            self.device,
            self.squared,
            cfg.augmented_per_class,
            cfg.strict_transfer,
        )
        result = service.run(target, split, spatial_checkpoint, spectral_checkpoint)
        write_json(run_dir / "augmented.json", result.augmented.manifest())
        if result.report is not None:
            ReportRepository(run_dir).save(result.report)
        return result

    def evaluate_run(
        self,
        run_index: int,
        split_path: Optional[str] = None,
        checkpoint_path: Optional[str] = None,
    ) -> MetricsReport:
        """
        Re-evaluate a fine-tuned model and render its classification map

        Defaults to the split and `finetune` archive stored under the run
        directory; writes evaluation.json and map.png there.

        Raises:
            CheckpointError: If the archive is missing or malformed
            TransferError: If the archive does not cover the fused model
        """
        run_dir = self.run_dir(run_index)
        target = self.load_target()
        split = SplitRepository.load(split_path or run_dir / "split.json")
        if split.n_classes != target.gt.n_classes:
            raise ConfigError(
                f"Split has {split.n_classes} classes, target has {target.gt.n_classes}",
                key="split",
            )

        model = FusedNetwork(target.cube.bands, split.n_classes).to(self.device)
        archive = checkpoint_path or CheckpointRepository(run_dir).path_for(StageId.FINETUNE.value)
        transfer_parameters(model, load_checkpoint(archive), strict=True)

        evaluator = EvaluationService(self.config.eval_batch_size, self.device, self.squared)
        report, _ = evaluator.evaluate(model, target.extractor, split)
        ReportRepository(run_dir).save(report, stem="evaluation")
        predictions = evaluator.prediction_map(model, target, split)
        render_map(target.gt, predictions, run_dir / "map.png", self.config.palette)
        logger.info(
            f"Run {run_index} evaluation: OA={report.oa:.4f} AA={report.aa:.4f} "
            f"Kappa={report.kappa:.4f} on {report.n_test} pixels"
        )
        return report

    def run(self) -> ExperimentResult:
        """
        Execute the full experiment and write aggregate artifacts

        Writes config.resolved.json, per-run logs/splits/reports, report.json,
        report.txt and map.png (best run) under the output directory. A run
        failure aborts the experiment; logs already written are kept.
        """
        cfg = self.config
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.snapshot_config()

        target = self.load_target()
        n_classes = target.gt.n_classes
        checkpoint_dir = self.checkpoint_dir

        pretrain_logs: list[RunLog] = []
        spatial_path = spectral_path = None
        if not cfg.pretrain_per_run:
            spatial_path, spectral_path, pretrain_logs = self.pretrain(
                n_classes, target.cube.bands, checkpoint_dir, cfg.base_seed
            )

        results: list[FinetuneResult] = []
        for run_index in range(cfg.n_runs):
            logger.info(f"Run {run_index + 1}/{cfg.n_runs}")
            try:
                if cfg.pretrain_per_run:
                    run_checkpoints = checkpoint_dir / f"run_{run_index:02d}"
                    spatial_path, spectral_path, logs = self.pretrain(
                        n_classes, target.cube.bands, run_checkpoints, cfg.base_seed + run_index
                    )
                    pretrain_logs.extend(logs)
                results.append(self.finetune(target, run_index, spatial_path, spectral_path))
            except Exception as e:
                logger.error(f"Run {run_index} failed: {str(e)}")
                raise

        reports = [r.report for r in results if r.report is not None]
        aggregate = aggregate_runs(
            reports,
            training_times=[r.log.training_s for r in results],
            testing_times=[r.log.testing_s for r in results],
        )
        title = f"{cfg.target.value}, K0={cfg.k0}, {cfg.n_runs} runs"
        ReportRepository(self.output_dir).save(aggregate, format_report_table(aggregate, title))

        best_run = max(results, key=lambda r: r.report.oa if r.report else -1.0)
        evaluator = EvaluationService(cfg.eval_batch_size, self.device, self.squared)
        predictions = evaluator.prediction_map(best_run.model, target, best_run.split)
        render_map(target.gt, predictions, self.output_dir / "map.png", cfg.palette)

        logger.info(
            f"Experiment done: OA {aggregate.oa.mean:.4f} ± {aggregate.oa.std:.4f}, "
            f"AA {aggregate.aa.mean:.4f}, Kappa {aggregate.kappa.mean:.4f}"
        )
        return ExperimentResult(
            aggregate=aggregate,
            run_logs=[r.log for r in results],
            pretrain_logs=pretrain_logs,
            output_dir=self.output_dir,
        )
