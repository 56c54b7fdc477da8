"""Frechet distance and identity similarity for generated image sets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import DataError, list_images, load_image, resize, to_tensor
from .providers import unit_embeddings


@dataclass(frozen=True)
class FeatureSetStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (len(mean), len(mean)):
            raise DataError(f"covariance shape {cov.shape} does not match mean dimension {len(mean)}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-8):
            raise DataError("covariance matrix is not symmetric")
        if self.count < 2:
            raise DataError("feature statistics need at least 2 samples")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def _psd_sqrt(mat: np.ndarray, tol: float, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise FloatingPointError(
            f"{what} is not positive semi-definite: min eigenvalue {vals.min():.3e}, "
            f"max {vals.max():.3e}, condition {np.abs(vals).max() / max(np.abs(vals).min(), 1e-300):.3e}")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: FeatureSetStats, b: FeatureSetStats, tol: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product square root is taken through the symmetric
    form ``sqrt(S_a) S_b sqrt(S_a)``, whose eigenvalues equal those of
    ``S_a S_b``; eigenvalues below ``-tol`` (relative) are an error.
    """
    if a.mean.shape != b.mean.shape:
        raise DataError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.cov, tol, "covariance a")
    _psd_sqrt(b.cov, tol, "covariance b")
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise FloatingPointError(f"covariance product has eigenvalue {vals.min():.3e} < 0")
    tr_sqrt = float(np.sqrt(np.clip(vals, 0, None)).sum())
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_sqrt)


def stats_from_features(features: np.ndarray) -> FeatureSetStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) < 2:
        raise DataError(f"need at least 2 feature vectors, got shape {features.shape}")
    cov = np.cov(features, rowvar=False).reshape(features.shape[1], features.shape[1])
    return FeatureSetStats(features.mean(axis=0), (cov + cov.T) / 2, len(features))


def extract_features(images: Sequence[np.ndarray], extractor, batch: int = 32) -> np.ndarray:
    feats = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            feats.append(extractor(to_tensor(images[i:i + batch])).double().reshape(
                min(batch, len(images) - i), -1).numpy())
    return np.concatenate(feats)


def compute_stats(images: Sequence[np.ndarray], extractor) -> FeatureSetStats:
    """Mean and unbiased covariance of extractor features."""
    if len(images) < 2:
        raise DataError("need at least 2 images for feature statistics")
    return stats_from_features(extract_features(images, extractor))


def identity_similarity(a: np.ndarray, b: np.ndarray, provider) -> float:
    """Cosine similarity of identity embeddings mapped to [0, 1] as ``(cos + 1) / 2``."""
    with torch.no_grad():
        ea, eb = unit_embeddings(lambda x: provider(x).double(), to_tensor([a, b]))
    cos = float((ea * eb).sum())
    return min(max((cos + 1) / 2, 0.0), 1.0)


@dataclass
class EvalReport:
    fid: float
    id_mean: float
    id_std: float
    n: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1)

    def table(self, method: str = "run") -> str:
        return (f"{'Method':<12}{'FID':>10}{'ID':>8}\n"
                f"{method:<12}{self.fid:>10.2f}{self.id_mean:>8.2f}\n")


def evaluate_run(generated_dir, style_train_dir, source_dir, feature_extractor, id_provider) -> EvalReport:
    """FID(generated, style_train) and mean ID over source/generated pairs matched by file stem."""
    generated = list_images(generated_dir)
    style = list_images(style_train_dir)
    sources = list_images(source_dir)
    for name, files in (("generated", generated), ("style_train", style), ("source", sources)):
        if not files:
            raise DataError(f"{name} directory is empty")
    src_by_stem = {p.stem: p for p in sources}
    missing = sorted(p.name for p in generated if p.stem not in src_by_stem)
    if missing:
        raise DataError(f"generated images without a matching source: {missing}")

    gen_images = [load_image(p) for p in generated]
    fid = frechet_distance(compute_stats(gen_images, feature_extractor),
                           compute_stats([load_image(p) for p in style], feature_extractor))
    ids = []
    for path, image in zip(generated, gen_images):
        src = load_image(src_by_stem[path.stem])
        if src.shape != image.shape:
            src = resize(src, *image.shape[:2])
        ids.append(identity_similarity(src, image, id_provider))
    ids = np.asarray(ids)
    # round-off can leave identical sets a hair below zero
    fid = 0.0 if -1e-6 < fid < 0 else fid
    return EvalReport(fid, float(ids.mean()), float(ids.std()), len(ids))
