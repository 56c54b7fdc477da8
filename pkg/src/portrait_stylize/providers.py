"""Pretrained-model providers behind small callable interfaces.

Identity providers map an NCHW batch in [-1, 1] to raw (N, d) embeddings;
feature providers do the same for distribution metrics. Production
providers wrap pretrained checkpoints; the stubs are deterministic and
download-free so every metric and loss can be checked against oracles.
"""

from __future__ import annotations

import os
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import seeded

CACHE_ENV = "PORTRAIT_STYLIZE_CACHE"


def cache_dir() -> Path:
    """Directory holding pretrained checkpoints (``$PORTRAIT_STYLIZE_CACHE``)."""
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "portrait_stylize"))


class ProviderError(RuntimeError):
    pass


def unit_embeddings(provider, images: torch.Tensor) -> torch.Tensor:
    """Embeddings scaled to unit L2 norm; zero-norm embeddings are an error."""
    emb = provider(images)
    norm = emb.norm(dim=1, keepdim=True)
    if (norm == 0).any() or not torch.isfinite(norm).all():
        raise FloatingPointError("identity embedding has zero or non-finite norm; "
                                 "cosine similarity is undefined")
    return emb / norm


class ChannelMeanEmbedding(nn.Module):
    """Stub identity model: the per-channel image mean."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.mean(dim=(2, 3))


class RandomConvEmbedding(nn.Module):
    """Frozen random conv net used as a stand-in face-recognition model."""

    def __init__(self, seed: int = 0, dim: int = 64, input_size: int = 32):
        super().__init__()
        self.input_size = input_size
        with seeded(seed):
            self.net = nn.Sequential(
                nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.Tanh(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.Tanh(),
                nn.AdaptiveAvgPool2d(2), nn.Flatten(), nn.Linear(128, dim),
            )
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear",
                              align_corners=False)
        return self.net(x)


class TorchScriptEmbedding(nn.Module):
    """A TorchScript face-recognition model (ArcFace/CosFace style, 112x112 input)."""

    def __init__(self, path: str | Path, input_size: int = 112):
        super().__init__()
        path = Path(path)
        if not path.is_absolute() and not path.exists():
            path = cache_dir() / path
        if not path.exists():
            raise ProviderError(f"identity model checkpoint not found: {path}")
        self.model = torch.jit.load(str(path), map_location="cpu")
        self.input_size = input_size
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear",
                          align_corners=False)
        return self.model(x)


class PixelMeanFeatures(nn.Module):
    """Stub feature extractor: per-channel mean (d = 3)."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.mean(dim=(2, 3))


class RandomConvFeatures(RandomConvEmbedding):
    """Low-dimensional random conv features for toy FID runs."""

    def __init__(self, seed: int = 1, dim: int = 16, input_size: int = 32):
        super().__init__(seed, dim, input_size)


class InceptionFeatures(nn.Module):
    """Inception-v3 pool features (d = 2048) at 299x299."""

    def __init__(self):
        super().__init__()
        from torchvision.models import Inception_V3_Weights, inception_v3

        try:
            model = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1, aux_logits=True)
        except Exception as exc:
            raise ProviderError(f"pretrained Inception-v3 weights unavailable: {exc}") from exc
        model.fc = nn.Identity()
        model.eval()
        self.model = model
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        return self.model(((x + 1) / 2 - mean) / std)


IDENTITY_PROVIDERS = {
    "stub-mean": ChannelMeanEmbedding,
    "stub-conv": RandomConvEmbedding,
}
FEATURE_PROVIDERS = {
    "stub-mean": PixelMeanFeatures,
    "stub-conv": RandomConvFeatures,
    "inception": InceptionFeatures,
}


def identity_provider(name: str) -> nn.Module:
    if name in IDENTITY_PROVIDERS:
        return IDENTITY_PROVIDERS[name]()
    return TorchScriptEmbedding(name)


def feature_provider(name: str) -> nn.Module:
    if name not in FEATURE_PROVIDERS:
        raise ProviderError(f"unknown feature provider {name!r}; choose from {sorted(FEATURE_PROVIDERS)}")
    return FEATURE_PROVIDERS[name]()
