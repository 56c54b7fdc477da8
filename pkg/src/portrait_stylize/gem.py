"""Geometry expansion: random scale/rotation augmentation of both domains."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import AffineParams, ParameterError, affine_transform, save_image


@dataclass(frozen=True)
class GemConfig:
    scale_min: float = 0.8
    scale_max: float = 1.2
    rot_min: float = -math.pi / 2
    rot_max: float = math.pi / 2
    seed: int = 0

    def __post_init__(self):
        if not (self.scale_min <= self.scale_max and self.rot_min <= self.rot_max):
            raise ParameterError(f"GEM ranges must be ordered: {self}")
        if self.scale_min <= 0:
            raise ParameterError(f"scale range must be positive: {self}")

    def stream(self, offset: int = 0) -> np.random.Generator:
        """Seeded random stream; use distinct offsets for independent streams."""
        return np.random.default_rng([self.seed, offset])


SOURCE_STREAM = 0
TARGET_STREAM = 1


def sample_geometry_params(config: GemConfig, rng: np.random.Generator) -> AffineParams:
    scale = config.scale_min + (config.scale_max - config.scale_min) * rng.random()
    rotation = config.rot_min + (config.rot_max - config.rot_min) * rng.random()
    return AffineParams(float(scale), float(rotation))


def expand(images, config: GemConfig, rng: np.random.Generator | None = None,
           log: list | None = None) -> list[np.ndarray]:
    """Warp each image with freshly drawn parameters.

    When ``log`` is given, the drawn :class:`AffineParams` are appended to it
    in image order so the augmentation can be replayed.
    """
    images = list(images)
    if not images:
        raise ParameterError("expand needs at least one image")
    if rng is None:
        rng = config.stream()
    out = []
    for image in images:
        params = sample_geometry_params(config, rng)
        if log is not None:
            log.append(params)
        out.append(affine_transform(image, params))
    return out


def materialize(images, names, config: GemConfig, out_dir: str | Path,
                stream: int = SOURCE_STREAM) -> list[AffineParams]:
    """Write expanded images plus a ``params.jsonl`` sidecar to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log: list[AffineParams] = []
    warped = expand(images, config, config.stream(stream), log)
    with open(out_dir / "params.jsonl", "w") as fh:
        for name, image, params in zip(names, warped, log):
            save_image(image, out_dir / f"{Path(name).stem}.png")
            fh.write(json.dumps({"image": name, "scale": params.scale,
                                 "rotation": params.rotation}) + "\n")
    return log
