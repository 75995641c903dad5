"""Spectral-spatial network family, auxiliary heads and parameter transfer.

Parameter names are slash-delimited module paths (``spatial/backbone/conv3/weight``);
they are the names stored in checkpoints and matched during transfer.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from s4lfsc.exceptions import ContractError, ShapeError, TransferError

logger = logging.getLogger(__name__)

FEATURE_DIM = 100
FUSED_DIM = 2 * FEATURE_DIM
HIDDEN_DIM = 64
SPECTRAL_KERNEL = 7
SPECTRAL_CHANNELS = 24
SPECTRAL_OUT = 128

# Transfer filters into the fused target model
SPATIAL_TRANSFER = ("spatial/backbone/", "spatial/head/")
SPECTRAL_TRANSFER = ("spectral/",)


def spectral_length(n_bands: int) -> int:
    """Length after the stride-2 k=7 convolution, floor((B - 7) / 2) + 1"""
    return (n_bands - SPECTRAL_KERNEL) // 2 + 1


class SpatialMapping(nn.Module):
    """1x1 convolution from n_bands to 3 channels with batch-norm"""

    def __init__(self, n_bands: int):
        super().__init__()
        self.conv = nn.Conv2d(n_bands, 3, kernel_size=1)
        self.bn = nn.BatchNorm2d(3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bn(self.conv(x))


def _backbone(in_channels: int) -> nn.Sequential:
    # first seven 3x3 convolutions of VGG16 with their three max-pools
    plan = [(in_channels, 64), (64, 64), "pool", (64, 128), (128, 128), "pool",
            (128, 256), (256, 256), (256, 256), "pool"]
    layers: "OrderedDict[str, nn.Module]" = OrderedDict()
    conv_index = pool_index = 0
    for step in plan:
        if step == "pool":
            pool_index += 1
            layers[f"pool{pool_index}"] = nn.MaxPool2d(kernel_size=2, stride=2)
            continue
        conv_index += 1
        c_in, c_out = step
        layers[f"conv{conv_index}"] = nn.Conv2d(c_in, c_out, kernel_size=3, padding=1)
        layers[f"relu{conv_index}"] = nn.ReLU(inplace=True)
    return nn.Sequential(layers)


class SpatialHead(nn.Module):
    """conv 256->512 (k3, p0), batch-norm, 2x2 max-pool, linear 512->100"""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(256, 512, kernel_size=3, stride=1, padding=0)
        self.bn = nn.BatchNorm2d(512)
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)
        self.fc = nn.Linear(512, FEATURE_DIM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(F.relu(self.bn(self.conv(x))))
        return self.fc(torch.flatten(x, 1))


class SpatialEncoder(nn.Module):
    """
    Spatial feature extractor

    Takes channels-last windows [n][H][W][c]. When ``n_bands`` is given a
    mapping layer first reduces the bands to the 3 channels the backbone
    expects; without it the encoder consumes 3-channel images directly.
    """

    def __init__(self, n_bands: Optional[int] = None):
        super().__init__()
        self.in_channels = n_bands if n_bands is not None else 3
        self.mapping = SpatialMapping(n_bands) if n_bands is not None else None
        self.backbone = _backbone(3)
        self.head = SpatialHead()

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Backbone output, shape [n][256][4][4] for 33x33 input"""
        if x.dim() != 4 or x.shape[-1] != self.in_channels:
            raise ShapeError(
                f"Spatial encoder expects [n][H][W][{self.in_channels}], got {tuple(x.shape)}"
            )
        x = x.permute(0, 3, 1, 2)
        if self.mapping is not None:
            x = self.mapping(x)
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class SpectralResidualBlock(nn.Module):
    """Two k=7 convolutions with batch-norm and an identity skip"""

    def __init__(self, channels: int = SPECTRAL_CHANNELS):
        super().__init__()
        self.conv_a = nn.Conv1d(channels, channels, SPECTRAL_KERNEL, stride=1, padding=3)
        self.bn_a = nn.BatchNorm1d(channels)
        self.conv_b = nn.Conv1d(channels, channels, SPECTRAL_KERNEL, stride=1, padding=3)
        self.bn_b = nn.BatchNorm1d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn_a(self.conv_a(x)))
        out = self.bn_b(self.conv_b(out))
        return F.relu(out + x)


class SpectralEncoder(nn.Module):
    """1-D residual spectral feature extractor over [n][n_bands] spectra"""

    def __init__(self, n_bands: int):
        super().__init__()
        if n_bands < SPECTRAL_KERNEL:
            raise ShapeError(f"Spectral encoder needs at least {SPECTRAL_KERNEL} bands")
        self.n_bands = n_bands
        self.length = spectral_length(n_bands)
        self.conv1 = nn.Conv1d(1, SPECTRAL_CHANNELS, SPECTRAL_KERNEL, stride=2, padding=0)
        self.bn1 = nn.BatchNorm1d(SPECTRAL_CHANNELS)
        self.residual = SpectralResidualBlock()
        self.conv2 = nn.Conv1d(SPECTRAL_CHANNELS, SPECTRAL_OUT, self.length, stride=1, padding=0)
        self.bn2 = nn.BatchNorm1d(SPECTRAL_OUT)
        self.fc = nn.Linear(SPECTRAL_OUT, FEATURE_DIM)

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        """Output of the last convolution, shape [n][128][1]"""
        if x.dim() != 2 or x.shape[1] != self.n_bands:
            raise ShapeError(
                f"Spectral encoder expects [n][{self.n_bands}], got {tuple(x.shape)}"
            )
        x = F.relu(self.bn1(self.conv1(x.unsqueeze(1))))
        x = self.residual(x)
        return F.relu(self.bn2(self.conv2(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.trunk(x), 1))


class SpectralMapper(nn.Module):
    """Piecewise-linear resampling to the target band count, then a k=1 conv"""

    def __init__(self, out_bands: int):
        super().__init__()
        self.out_bands = out_bands
        self.conv = nn.Conv1d(1, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2 or x.shape[1] < 2:
            raise ShapeError(f"Spectral mapper expects [n][B >= 2], got {tuple(x.shape)}")
        resampled = F.interpolate(
            x.unsqueeze(1), size=self.out_bands, mode="linear", align_corners=True
        )
        return self.conv(resampled).squeeze(1)


class FusionFSLHead(nn.Module):
    """linear 200->64, ReLU, dropout, linear 64->n_classes"""

    def __init__(self, n_classes: int, dropout: float = 0.5):
        super().__init__()
        self.fc1 = nn.Linear(FUSED_DIM, HIDDEN_DIM)
        self.dropout = nn.Dropout(dropout)
        self.fc2 = nn.Linear(HIDDEN_DIM, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class FusionSSLCLHead(nn.Module):
    """dropout, linear 200->64, ReLU, linear 64->n_classes, batch-norm, softmax"""

    def __init__(self, n_classes: int, dropout: float = 0.15):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.fc1 = nn.Linear(FUSED_DIM, HIDDEN_DIM)
        self.fc2 = nn.Linear(HIDDEN_DIM, n_classes)
        self.bn = nn.BatchNorm1d(n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.fc2(F.relu(self.fc1(self.dropout(x))))
        return F.softmax(self.bn(x), dim=1)


class SpectralDecoder(nn.Module):
    """linear 100->256, ReLU, linear 256->source bands"""

    def __init__(self, out_bands: int, hidden: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(FEATURE_DIM, hidden)
        self.fc2 = nn.Linear(hidden, out_bands)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(z)))


class SpatialPretrainNetwork(nn.Module):
    """Stage-1 model: 3-channel spatial encoder plus the transform classifier"""

    def __init__(self, n_transforms: int = 6):
        super().__init__()
        self.spatial = SpatialEncoder()
        self.rm_head = nn.Linear(FEATURE_DIM, n_transforms)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial(x)

    def transform_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.rm_head(self.spatial(x))


class SpectralPretrainNetwork(nn.Module):
    """Stage-2 model: mapper, spectral encoder, FSL projection and decoder"""

    def __init__(self, source_bands: int, target_bands: int):
        super().__init__()
        self.mapper = SpectralMapper(target_bands)
        self.spectral = SpectralEncoder(target_bands)
        self.fsl_linear = nn.Linear(FEATURE_DIM, HIDDEN_DIM)
        self.decoder = SpectralDecoder(source_bands)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.fsl_linear(self.spectral(self.mapper(x)))

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.spectral(self.mapper(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed(x)


class FusedNetwork(nn.Module):
    """Stage-3 spectral-spatial model with the FSL and SSLCL fusion heads"""

    def __init__(
        self,
        n_bands: int,
        n_classes: int,
        fsl_dropout: float = 0.5,
        sslcl_dropout: float = 0.15,
    ):
        super().__init__()
        self.n_bands = n_bands
        self.n_classes = n_classes
        self.spatial = SpatialEncoder(n_bands)
        self.spectral = SpectralEncoder(n_bands)
        self.fusion_fsl = FusionFSLHead(n_classes, fsl_dropout)
        self.fusion_sslcl = FusionSSLCLHead(n_classes, sslcl_dropout)

    def fused_features(self, windows: torch.Tensor) -> torch.Tensor:
        """Concatenated spatial and center-spectrum features, [n][200]"""
        cy, cx = windows.shape[1] // 2, windows.shape[2] // 2
        spectra = windows[:, cy, cx, :]
        return torch.cat([self.spatial(windows), self.spectral(spectra)], dim=1)

    def embed(self, windows: torch.Tensor) -> torch.Tensor:
        return self.fusion_fsl(self.fused_features(windows))

    def probabilities(self, windows: torch.Tensor) -> torch.Tensor:
        return self.fusion_sslcl(self.fused_features(windows))

    def forward(self, windows: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        fused = self.fused_features(windows)
        return self.fusion_fsl(fused), self.fusion_sslcl(fused)


def forward_spatial(encoder: SpatialEncoder, batch: torch.Tensor) -> torch.Tensor:
    """[n][H][W][c] windows -> [n][100] spatial features"""
    return encoder(batch)


def forward_spectral(encoder: SpectralEncoder, batch: torch.Tensor) -> torch.Tensor:
    """[n][B] spectra -> [n][100] spectral features"""
    return encoder(batch)


def forward_fused(model: FusedNetwork, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """[n][H][W][B] windows -> (FSL embedding, SSLCL probabilities)"""
    return model(patches)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# Named tensors and transfer
def to_slash(name: str) -> str:
    return name.replace(".", "/")


def named_tensors(model: nn.Module) -> dict[str, torch.Tensor]:
    """Full state (parameters and buffers) keyed by slash-delimited names"""
    return {to_slash(name): tensor.detach() for name, tensor in model.state_dict().items()}


def _matches(name: str, include: Optional[Iterable[str]]) -> bool:
    if include is None:
        return True
    return any(name.startswith(prefix) for prefix in include)


@dataclass
class TransferReport:
    """Outcome of a partial parameter load"""

    transferred: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)
    mismatched: list[str] = field(default_factory=list)


def transfer_parameters(
    model: nn.Module,
    tensors: dict[str, torch.Tensor],
    include: Optional[Iterable[str]] = None,
    strict: bool = False,
) -> TransferReport:
    """
    Copy matching tensors into a model, restricted to a name filter

    Args:
        model: Destination model
        tensors: Slash-named source tensors (e.g. a loaded checkpoint)
        include: Name prefixes to transfer; None transfers everything
        strict: Raise when a filtered model tensor has no source

    Returns:
        TransferReport listing transferred names and unmatched names on
        both sides

    Raises:
        TransferError: Under strict mode, if any filtered name is missing
            or has a different shape
    """
    include = tuple(include) if include is not None else None
    state = model.state_dict()
    by_slash = {to_slash(name): name for name in state}
    report = TransferReport()

    updated = {}
    for slash_name, dotted in by_slash.items():
        if not _matches(slash_name, include):
            continue
        source = tensors.get(slash_name)
        if source is None:
            report.missing.append(slash_name)
            continue
        if tuple(source.shape) != tuple(state[dotted].shape):
            report.mismatched.append(slash_name)
            continue
        updated[dotted] = source.to(dtype=state[dotted].dtype)
        report.transferred.append(slash_name)

    report.unexpected = sorted(
        name for name in tensors if _matches(name, include) and name not in by_slash
    )

    if strict and (report.missing or report.mismatched):
        raise TransferError(
            f"Strict transfer failed: missing {report.missing[:5]}, "
            f"mismatched {report.mismatched[:5]}"
        )

    with torch.no_grad():
        for dotted, source in updated.items():
            state[dotted].copy_(source)

    if report.missing or report.unexpected or report.mismatched:
        logger.warning(
            f"Partial transfer: {len(report.transferred)} transferred, "
            f"{len(report.missing)} missing, {len(report.unexpected)} unexpected, "
            f"{len(report.mismatched)} mismatched"
        )
    else:
        logger.info(f"Transferred {len(report.transferred)} tensors")
    return report


def compute_gradients(
    model: nn.Module,
    loss_fn: Callable[[nn.Module, Any], torch.Tensor],
    batch: Any,
) -> dict[str, torch.Tensor]:
    """
    Reverse-mode gradients of a scalar loss for every trainable parameter

    Frozen parameters (requires_grad = False) are absent from the result;
    parameters the loss does not depend on get zero gradients.

    Raises:
        ContractError: If the loss is not a scalar
    """
    loss = loss_fn(model, batch)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1 or loss.dim() > 1:
        raise ContractError("Loss must be a scalar tensor")
    named = [(to_slash(n), p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(
        loss.reshape(()), [p for _, p in named], allow_unused=True
    )
    return {
        name: (torch.zeros_like(param) if grad is None else grad)
        for (name, param), grad in zip(named, grads)
    }
