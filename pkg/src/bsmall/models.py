"""The two architectures used in the experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import LayerSpec, Model, build_model

SINUSOID_HIDDEN = 40


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "sinusoid_mlp"  # sinusoid_mlp | conv4
    variational: bool = False
    n_way: int = 5
    filters: int = 32
    in_channels: int = 1
    input_extent: int = 16

    def __post_init__(self):
        if self.architecture not in ("sinusoid_mlp", "conv4"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "conv4" and self.n_way < 2:
            raise ValueError("n_way must be at least 2 for classification")
        if self.filters < 1:
            raise ValueError("filters must be positive")


def sinusoid_specs(hidden: int = SINUSOID_HIDDEN) -> list[LayerSpec]:
    return [
        LayerSpec("dense", 1, hidden),
        LayerSpec("relu"),
        LayerSpec("dense", hidden, hidden),
        LayerSpec("relu"),
        LayerSpec("dense", hidden, 1),
    ]


def sinusoid_mlp(variational: bool = False, seed: int = 0) -> Model:
    """1 -> 40 -> 40 -> 1 ReLU network with a linear output."""
    return build_model(sinusoid_specs(), variational, seed)


def conv4_specs(n_way: int, filters: int, in_channels: int, input_extent: int) -> list[LayerSpec]:
    if input_extent < 16:
        raise ValueError(f"input extent {input_extent} collapses to zero after four 2x2 pools")
    if input_extent % 16:
        raise ValueError(f"input extent {input_extent} is not divisible by 16")
    specs = []
    c = in_channels
    for _ in range(4):
        specs += [
            LayerSpec("conv3x3", c, filters),
            LayerSpec("batchnorm", filters),
            LayerSpec("relu"),
            LayerSpec("maxpool2x2"),
        ]
        c = filters
    features = filters * (input_extent // 16) ** 2
    specs += [LayerSpec("flatten", 0, features), LayerSpec("dense", features, n_way)]
    return specs


def conv4(config: ModelConfig, input_extent: int | None = None, seed: int = 0) -> Model:
    """Four conv3x3-batchnorm-relu-maxpool blocks, then a dense head to n_way logits."""
    extent = config.input_extent if input_extent is None else input_extent
    specs = conv4_specs(config.n_way, config.filters, config.in_channels, extent)
    return build_model(specs, config.variational, seed)


def build(config: ModelConfig, seed: int = 0) -> Model:
    if config.architecture == "sinusoid_mlp":
        return sinusoid_mlp(config.variational, seed)
    return conv4(config, seed=seed)


def normalize_images(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per channel over an (N, C, H, W) batch."""
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    sd = x.std(axis=(0, 2, 3), keepdims=True)
    return (x - mu) / np.where(sd > 0, sd, 1.0)
