"""Shared test helpers"""

from pathlib import Path

import torch

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def random_features(T: int, d_feat: int, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(T, d_feat, generator=g, dtype=dtype)

