"""Scalar training objectives.

All functions are differentiable torch compositions and work at any float
precision; logarithms are natural.
"""

from collections.abc import Mapping

import torch
import torch.nn.functional as F

from s4lfsc.exceptions import ContractError

EPS = 1e-8
PROB_TOLERANCE = 1e-5
# keeps sqrt differentiable when a query coincides with a prototype
_DISTANCE_FLOOR = 1e-12


def class_prototypes(features: torch.Tensor, labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    """
    Per-class mean of support features, [N][d] in local-label order

    Raises:
        ContractError: If some label in 0..N-1 has no feature
    """
    labels = labels.to(device=features.device, dtype=torch.long)
    counts = torch.bincount(labels, minlength=n_classes)
    if counts.numel() != n_classes or bool((counts == 0).any()):
        missing = [m for m in range(n_classes) if m >= counts.numel() or counts[m] == 0]
        raise ContractError(f"Prototype classes {missing} have no support features")
    sums = torch.zeros(n_classes, features.shape[1], dtype=features.dtype, device=features.device)
    sums = sums.index_add(0, labels, features)
    return sums / counts.to(features.dtype).unsqueeze(1)


def pairwise_distances(
    queries: torch.Tensor, prototypes: torch.Tensor, squared: bool = False
) -> torch.Tensor:
    """Euclidean (or squared Euclidean) distances, [q][N]"""
    if queries.shape[1] != prototypes.shape[1]:
        raise ContractError(
            f"Feature width mismatch: queries {queries.shape[1]}, prototypes {prototypes.shape[1]}"
        )
    diff = queries.unsqueeze(1) - prototypes.unsqueeze(0)
    sq = (diff * diff).sum(dim=2)
    if squared:
        return sq
    return torch.sqrt(sq.clamp_min(_DISTANCE_FLOOR))


def proto_log_probs(
    queries: torch.Tensor, prototypes: torch.Tensor, squared: bool = False
) -> torch.Tensor:
    """Log-softmax over negative distances to each prototype, [q][N]"""
    return F.log_softmax(-pairwise_distances(queries, prototypes, squared), dim=1)


def fsl_episode_loss(log_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood of the true class, summed over queries"""
    labels = labels.to(device=log_probs.device, dtype=torch.long)
    return -log_probs.gather(1, labels.unsqueeze(1)).sum()


def rm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the transform classifier; labels are 0-based"""
    return F.cross_entropy(logits, labels.to(device=logits.device, dtype=torch.long))


def mr_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """
    Mean squared error over all bands, masked and visible alike

    Raises:
        ContractError: If shapes differ
    """
    if x.shape != x_hat.shape:
        raise ContractError(f"Shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).mean(dim=1).mean()


def _check_prob_rows(z: torch.Tensor, name: str) -> None:
    with torch.no_grad():
        if z.dim() != 2:
            raise ContractError(f"{name} must be a [B][N] matrix")
        if bool((z < -PROB_TOLERANCE).any()):
            raise ContractError(f"{name} has negative probabilities")
        row_sums = z.sum(dim=1)
        if bool(((row_sums - 1).abs() > PROB_TOLERANCE).any()):
            raise ContractError(f"{name} rows do not sum to 1")


def _entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(EPS))).sum(dim=-1)


def directional_consistency(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """mean KL(a_i || b_i) + mean H(a_i) - H(mean a_i)"""
    log_a = torch.log(a.clamp_min(EPS))
    log_b = torch.log(b.clamp_min(EPS))
    kl = (a * (log_a - log_b)).sum(dim=1).mean()
    sharpness = _entropy(a).mean()
    diversity = _entropy(a.mean(dim=0))
    return kl + sharpness - diversity


def sslcl_loss(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """
    Symmetric consistency loss between two views' class probabilities

    Raises:
        ContractError: If either input is not a matrix of probability rows
            or the shapes differ
    """
    if z1.shape != z2.shape:
        raise ContractError(f"View shapes differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    _check_prob_rows(z1, "z1")
    _check_prob_rows(z2, "z2")
    return 0.5 * (directional_consistency(z1, z2) + directional_consistency(z2, z1))


def stage_total(components: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Unweighted sum of the active loss components"""
    if not components:
        raise ContractError("A stage needs at least one loss component")
    total = None
    for value in components.values():
        total = value if total is None else total + value
    return total  # type: ignore[return-value]
