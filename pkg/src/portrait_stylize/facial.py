"""Expression parameters (eye/mouth opening degrees) and their regressor."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import EXPRESSION_COMPONENTS, DataError, LandmarkSet, ShapeError, resize, to_tensor
from .networks import patchgan_layers, seeded

log = logging.getLogger(__name__)


class ExtractionError(DataError):
    pass


@dataclass(frozen=True)
class FacialConfig:
    n: int = 3
    c_eye: float = 0.35
    c_mouth: float = 0.9
    steps: int = 300
    lr: float = 1e-3
    batch: int = 8
    input_size: int = 64
    width: int = 16
    val_fraction: float = 0.25
    seed: int = 0


def extract_expression_params(landmarks: LandmarkSet, c_eye: float = 0.35,
                              c_mouth: float = 0.9) -> np.ndarray:
    """Opening degrees (left eye, right eye, mouth) from landmark bounding boxes.

    Each degree is the component's bounding-box height/width ratio divided by
    a per-component constant and clamped to [0, 1].
    """
    alpha = np.empty(len(EXPRESSION_COMPONENTS))
    for i, name in enumerate(EXPRESSION_COMPONENTS):
        pts = landmarks.components.get(name)
        if pts is None:
            raise ExtractionError(f"landmarks have no {name!r} component")
        width = pts[:, 0].max() - pts[:, 0].min()
        height = pts[:, 1].max() - pts[:, 1].min()
        if width <= 0:
            raise ExtractionError(f"{name!r} bounding box has zero width")
        const = c_mouth if name == "mouth" else c_eye
        alpha[i] = min(max(height / width / const, 0.0), 1.0)
    return alpha


def facial_perception_loss(prediction, target):
    """L2 distance between predicted and target expression parameters.

    Accepts single vectors or batches (last axis = parameters); batches are
    averaged. Returns a tensor when given tensors, else a float.
    """
    as_float = not (torch.is_tensor(prediction) or torch.is_tensor(target))
    prediction = torch.as_tensor(prediction, dtype=torch.float64 if as_float else None)
    target = torch.as_tensor(target, dtype=prediction.dtype, device=prediction.device)
    if prediction.shape[-1] != target.shape[-1]:
        raise ShapeError(f"expression length mismatch: {prediction.shape[-1]} vs {target.shape[-1]}")
    diff = prediction - target
    # sqrt(sum(d^2) + 0) has an undefined gradient at d = 0; guard with a tiny floor
    sq = (diff * diff).sum(-1)
    dist = torch.where(sq > 0, sq.clamp_min(1e-30).sqrt(), torch.zeros_like(sq))
    loss = dist.mean()
    return float(loss) if as_float else loss


class ExpressionRegressor(nn.Module):
    """PatchGAN feature extractor with ``n`` sigmoid regression heads.

    Features are pooled to a coarse ``pool x pool`` grid rather than a single
    vector so the heads can tell the left eye, right eye and mouth apart.
    """

    def __init__(self, n: int = 3, width: int = 16, input_size: int = 64, pool: int = 4):
        super().__init__()
        self.n = n
        self.input_size = input_size
        self.pool = pool
        trunk = patchgan_layers(3, width, n_layers=3)
        self.features = nn.Sequential(*trunk)
        feat_ch = trunk[-2].out_channels
        self.heads = nn.ModuleList(nn.Linear(feat_ch * pool * pool, 1) for _ in range(n))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear",
                              align_corners=False)
        feat = F.adaptive_avg_pool2d(self.features(x), self.pool).flatten(1)
        return torch.sigmoid(torch.cat([head(feat) for head in self.heads], dim=1))


def build_regressor(config: FacialConfig) -> ExpressionRegressor:
    with seeded(config.seed):
        return ExpressionRegressor(config.n, config.width, config.input_size)


def predict_expression(regressor: ExpressionRegressor, image: np.ndarray) -> np.ndarray:
    x = to_tensor(resize(image, regressor.input_size, regressor.input_size))
    with torch.no_grad():
        return regressor(x)[0].double().numpy()


@dataclass
class RegressorReport:
    train_mse: list[float]
    val_mse_start: float
    val_mse: float


def _mse(model, x, y) -> float:
    with torch.no_grad():
        return float(F.mse_loss(model(x), y))


def train_expression_regressor(images, labels, config: FacialConfig = FacialConfig()):
    """Fit the regressor on labeled images; returns ``(model, report)``.

    A ``val_fraction`` share of the samples (at least one, when there are two
    or more) is held out for the reported validation error.
    """
    labels = np.asarray(labels, dtype=np.float32)
    if len(images) < 1 or len(images) != len(labels):
        raise DataError(f"need matching non-empty images/labels, got {len(images)}/{len(labels)}")
    if labels.ndim != 2 or labels.shape[1] != config.n:
        raise DataError(f"labels must be N x {config.n}, got {labels.shape}")
    if labels.min() < 0 or labels.max() > 1:
        raise DataError("expression labels must lie in [0, 1]")

    size = config.input_size
    x = to_tensor([resize(im, size, size) for im in images])
    y = torch.from_numpy(labels)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_val = int(round(len(x) * config.val_fraction)) if len(x) > 1 else 0
    n_val = min(max(n_val, 1 if len(x) > 1 else 0), len(x) - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if n_val == 0:
        val_idx = train_idx

    model = build_regressor(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    val_start = _mse(model, x[val_idx], y[val_idx])
    history = []
    for step in range(config.steps):
        pick = torch.randint(len(train_idx), (min(config.batch, len(train_idx)),), generator=gen)
        idx = torch.as_tensor(train_idx)[pick]
        loss = F.mse_loss(model(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    model.eval()
    model.requires_grad_(False)
    report = RegressorReport(history, val_start, _mse(model, x[val_idx], y[val_idx]))
    log.info("expression regressor: val mse %.4f -> %.4f", report.val_mse_start, report.val_mse)
    return model, report
