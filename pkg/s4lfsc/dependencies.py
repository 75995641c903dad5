from pathlib import Path
from typing import Optional

import torch

from s4lfsc.config import settings
from s4lfsc.schemas import ExperimentConfig
from s4lfsc.services import ExperimentService

# Cache for the configured compute device
_device: Optional[str] = None


def get_device() -> str:
    """Resolve the compute device once, falling back to cpu when CUDA is absent"""
    global _device
    if _device is None:
        requested = settings.device
        if requested.startswith("cuda") and not torch.cuda.is_available():
            requested = "cpu"
        if settings.num_threads:
            torch.set_num_threads(settings.num_threads)
        _device = requested
    return _device


def get_output_dir(config: ExperimentConfig) -> Path:
    """Experiment output directory"""
    return Path(config.output_dir)


def get_experiment_service(config: ExperimentConfig) -> ExperimentService:
    """Get experiment service"""
    return ExperimentService(config, get_output_dir(config), get_device())
