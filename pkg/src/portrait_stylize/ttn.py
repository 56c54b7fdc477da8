"""Texture translation network: U-net translator, style representations and losses."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, DataError, ShapeError, check_image, from_tensor, to_tensor
from .facial import facial_perception_loss
from .gem import SOURCE_STREAM, TARGET_STREAM, GemConfig, expand
from .networks import PatchDiscriminator, UNet, seeded

log = logging.getLogger(__name__)

LOSS_TERMS = ("sty", "con", "per", "tv")


class NumericAbort(RuntimeError):
    """Raised when a loss term becomes NaN or infinite during training."""

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}


class BatchError(DataError):
    pass


@dataclass(frozen=True)
class LossWeights:
    con: float = 2e2
    per: float = 1.0
    tv: float = 1e4

    def __post_init__(self):
        if min(self.con, self.per, self.tv) < 0:
            raise ConfigError(f"loss weights must be non-negative: {self}")


@dataclass(frozen=True)
class TTNConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.99
    steps: int = 10_000
    batch: int = 16
    lambda_con: float = 2e2
    lambda_per: float = 1.0
    lambda_tv: float = 1e4
    unet_base: int = 32
    unet_levels: int = 4
    disc_base: int = 32
    surface_radius: int = 5
    surface_eps: float = 2e-1
    tv_norm: str = "l2"
    non_saturating: bool = False
    seed: int = 0

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_con, self.lambda_per, self.lambda_tv)


# --------------------------------------------------------------------------
# Style representations
# --------------------------------------------------------------------------

def box_filter(x: torch.Tensor, r: int) -> torch.Tensor:
    """Windowed mean with radius ``r``; windows are clipped at the border."""
    k = 2 * r + 1
    ch = x.shape[1]
    weight = torch.ones(ch, 1, k, k, dtype=x.dtype, device=x.device)
    total = F.conv2d(x, weight, padding=r, groups=ch)
    ones = torch.ones(1, 1, *x.shape[-2:], dtype=x.dtype, device=x.device)
    count = F.conv2d(ones, torch.ones(1, 1, k, k, dtype=x.dtype, device=x.device), padding=r)
    return total / count


def guided_filter(guide: torch.Tensor, src: torch.Tensor, r: int = 5, eps: float = 2e-1) -> torch.Tensor:
    """Per-channel guided filter (He et al.)."""
    mean_i = box_filter(guide, r)
    mean_p = box_filter(src, r)
    cov_ip = box_filter(guide * src, r) - mean_i * mean_p
    var_i = box_filter(guide * guide, r) - mean_i * mean_i
    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i
    return box_filter(a, r) * guide + box_filter(b, r)


def surface_representation(images: torch.Tensor, r: int = 5, eps: float = 2e-1) -> torch.Tensor:
    """Edge-preserving smoothing of an NCHW batch, guided by itself."""
    return guided_filter(images, images, r, eps)


# channel weight ranges of the random color-shift projection
_TEXTURE_WEIGHT_RANGES = ((0.199, 0.399), (0.487, 0.687), (0.014, 0.214))


def texture_weights(generator: torch.Generator | None = None) -> torch.Tensor:
    lo = torch.tensor([r[0] for r in _TEXTURE_WEIGHT_RANGES], dtype=torch.float64)
    hi = torch.tensor([r[1] for r in _TEXTURE_WEIGHT_RANGES], dtype=torch.float64)
    return lo + (hi - lo) * torch.rand(3, generator=generator, dtype=torch.float64)


def texture_representation(images: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Random-weighted grayscale projection, replicated to 3 channels.

    ``weights`` are normalized to sum to one, so images with equal channels
    pass through unchanged.
    """
    w = (weights / weights.sum()).to(images.dtype).view(1, 3, 1, 1)
    gray = (images * w).sum(dim=1, keepdim=True)
    return gray.expand(-1, 3, -1, -1)


class StyleDiscriminator(nn.Module):
    """Separate PatchGAN discriminators for the surface and texture branches."""

    def __init__(self, base: int = 32):
        super().__init__()
        self.surface = PatchDiscriminator(3, base)
        self.texture = PatchDiscriminator(3, base)


def _log_d(logits):  # log D(x)
    return -F.softplus(-logits)


def _log_1m_d(logits):  # log(1 - D(x))
    return -F.softplus(logits)


def style_adversarial_losses(disc: StyleDiscriminator, real: torch.Tensor, generated: torch.Tensor,
                             texture_w: torch.Tensor, r: int = 5, eps: float = 2e-1,
                             non_saturating: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and generator losses summed over surface and texture branches.

    The discriminator minimizes ``-E[log D(real)] - E[log(1 - D(fake))]``.
    The generator minimizes ``E[log(1 - D(fake))]`` as written, or
    ``-E[log D(fake)]`` when ``non_saturating`` is set. The discriminator
    loss sees ``generated`` detached; the generator loss carries its graph.
    """
    if len(real) == 0 or len(generated) == 0:
        raise BatchError("style losses need non-empty real and generated batches")
    d_loss = real.new_zeros(())
    g_loss = real.new_zeros(())
    branches = (
        (disc.surface, lambda x: surface_representation(x, r, eps)),
        (disc.texture, lambda x: texture_representation(x, texture_w)),
    )
    for net, rep in branches:
        real_logits = net(rep(real))
        fake_rep = rep(generated)
        fake_logits_d = net(fake_rep.detach())
        d_loss = d_loss - _log_d(real_logits).mean() - _log_1m_d(fake_logits_d).mean()
        fake_logits_g = net(fake_rep)
        if non_saturating:
            g_loss = g_loss - _log_d(fake_logits_g).mean()
        else:
            g_loss = g_loss + _log_1m_d(fake_logits_g).mean()
    return d_loss, g_loss


# --------------------------------------------------------------------------
# Content, smoothness and total losses
# --------------------------------------------------------------------------

def content_loss(source: torch.Tensor, generated: torch.Tensor, extractor: nn.Module | None) -> torch.Tensor:
    """Mean absolute difference of feature maps."""
    if extractor is None:
        raise RuntimeError("content loss needs a feature extractor")
    if source.shape != generated.shape:
        raise ShapeError(f"content loss shape mismatch {tuple(source.shape)} vs {tuple(generated.shape)}")
    return (extractor(source) - extractor(generated)).abs().mean()


def tv_loss(images: torch.Tensor, norm: str = "l2") -> torch.Tensor:
    """``||d_u x + d_v x|| / (h*w*c)`` per image, averaged over the batch.

    Forward differences with the last column/row edge-replicated (zero
    difference there). ``norm="l2"`` is the Euclidean norm of the summed
    difference image; ``norm="l1"`` is the sum of its absolute values, which
    makes the loss the mean absolute summed difference.
    """
    if images.dim() == 3:
        images = images.unsqueeze(0)
    du = F.pad(images[..., :, 1:] - images[..., :, :-1], (0, 1, 0, 0))
    dv = F.pad(images[..., 1:, :] - images[..., :-1, :], (0, 0, 0, 1))
    grad = (du + dv).flatten(1)
    size = grad.shape[1]
    if norm == "l1":
        return grad.abs().sum(1).mean() / size
    if norm != "l2":
        raise ValueError(f"unknown tv norm {norm!r}")
    sq = (grad * grad).sum(1)
    # the norm is not differentiable at a constant image; use a zero subgradient there
    value = torch.where(sq > 0, sq.clamp_min(1e-300 if sq.dtype == torch.float64 else 1e-30).sqrt(),
                        torch.zeros_like(sq))
    return value.mean() / size


def total_loss(parts: dict, weights: LossWeights = LossWeights()):
    """Style + weighted content, facial perception and total-variation terms."""
    for name in LOSS_TERMS:
        value = float(parts[name].detach()) if torch.is_tensor(parts[name]) else float(parts[name])
        if not math.isfinite(value):
            raise NumericAbort(f"loss term {name!r} is not finite ({value})")
    return (parts["sty"] + weights.con * parts["con"] + weights.per * parts["per"]
            + weights.tv * parts["tv"])


# --------------------------------------------------------------------------
# Translator
# --------------------------------------------------------------------------

def build_translator(config: TTNConfig) -> UNet:
    with seeded(config.seed):
        return UNet(3, 3, config.unet_base, config.unet_levels)


def translate_tensor(translator: UNet, batch: torch.Tensor) -> torch.Tensor:
    if batch.shape[1] != 3:
        raise ShapeError(f"translator needs 3-channel input, got {batch.shape[1]}")
    with torch.no_grad():
        return translator(batch)


def translate(translator: UNet, image: np.ndarray) -> np.ndarray:
    """Stylize one HxWx3 image; output has the same resolution."""
    image = check_image(image)
    if image.shape[2] != 3:
        raise ShapeError(f"translator needs 3-channel input, got {image.shape[2]}")
    return from_tensor(translate_tensor(translator, to_tensor(image)))[0]


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    translator: UNet
    discriminator: StyleDiscriminator
    history: list[dict] = field(default_factory=list)

    def write_log(self, path: str | Path) -> None:
        cols = ["step", *LOSS_TERMS, "total", "d_loss"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.history:
                writer.writerow({k: row[k] for k in cols})


def train_ttn(source_images: Sequence[np.ndarray], target_images: Sequence[np.ndarray],
              regressor: nn.Module | None, extractor: nn.Module,
              config: TTNConfig = TTNConfig(), gem: GemConfig | None = GemConfig(),
              source_alpha: np.ndarray | None = None,
              callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Unpaired training of the translator on (calibrated) source and target sets.

    ``source_alpha`` holds per-source expression targets (N x n); rows with
    NaN mark samples without landmarks and have the perception term masked.
    GEM warps are drawn on the fly from independent source/target streams;
    pass ``gem=None`` to disable them.
    """
    if not source_images or not target_images:
        raise ConfigError("TTN training needs non-empty source and target sets")
    use_per = config.lambda_per > 0
    if use_per and (regressor is None or source_alpha is None):
        raise ConfigError("lambda_per > 0 needs an expression regressor and source expression targets")

    translator = build_translator(config)
    with seeded(config.seed + 1):
        disc = StyleDiscriminator(config.disc_base)
    opt_g = torch.optim.Adam(translator.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    if regressor is not None:
        regressor.requires_grad_(False)
    extractor.requires_grad_(False)

    rng = np.random.default_rng([config.seed, 7])
    tex_gen = torch.Generator().manual_seed(config.seed)
    src_stream = gem.stream(SOURCE_STREAM) if gem else None
    tgt_stream = gem.stream(TARGET_STREAM) if gem else None
    alpha = None if source_alpha is None else torch.as_tensor(np.asarray(source_alpha, dtype=np.float32))
    weights = config.weights
    history = []

    for step in range(1, config.steps + 1):
        si = rng.integers(len(source_images), size=config.batch)
        ti = rng.integers(len(target_images), size=config.batch)
        src = [source_images[i] for i in si]
        tgt = [target_images[i] for i in ti]
        if gem:
            src = expand(src, gem, src_stream)
            tgt = expand(tgt, gem, tgt_stream)
        x_s, x_t = to_tensor(src), to_tensor(tgt)
        tex_w = texture_weights(tex_gen)

        x_g = translator(x_s)
        d_loss, g_loss = style_adversarial_losses(disc, x_t, x_g, tex_w, config.surface_radius,
                                                  config.surface_eps, config.non_saturating)
        opt_d.zero_grad()
        d_loss.backward(inputs=list(disc.parameters()), retain_graph=True)

        parts = {"sty": g_loss, "con": content_loss(x_s, x_g, extractor), "tv": tv_loss(x_g, config.tv_norm)}
        if use_per:
            target_alpha = alpha[si]
            mask = ~torch.isnan(target_alpha).any(dim=1)
            if mask.any():
                parts["per"] = facial_perception_loss(regressor(x_g[mask]), target_alpha[mask])
            else:
                parts["per"] = x_g.new_zeros(())
        else:
            parts["per"] = x_g.new_zeros(())
        try:
            loss = total_loss(parts, weights)
        except NumericAbort as exc:
            exc.state = {"step": step, "translator": translator.state_dict(),
                         "discriminator": disc.state_dict()}
            raise
        opt_g.zero_grad()
        loss.backward(inputs=list(translator.parameters()))
        opt_d.step()
        opt_g.step()

        row = {"step": step, **{k: v.item() for k, v in parts.items()},
               "total": loss.item(), "d_loss": d_loss.item()}
        history.append(row)
        if callback:
            callback(step, row)
        if step == 1 or step % 50 == 0:
            log.info("ttn step %d: %s", step, {k: round(v, 5) for k, v in row.items() if k != "step"})

    translator.eval()
    return TrainResult(translator, disc, history)
