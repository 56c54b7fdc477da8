"""Content calibration: adapt a copy of a source face generator to a style, blend, sample.

Generators are stored as :class:`LayeredGeneratorWeights`, an ordered
coarse-to-fine list of per-resolution parameter blocks. Layer 0 also holds
the latent mapping, so blending the first ``k >= 1`` layers from the source
keeps the source's coarse structure for a given latent code.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import LATENT_DIM, ConfigError, ParameterError, ShapeError, from_tensor, resize, to_tensor
from .networks import seeded
from .providers import unit_embeddings

log = logging.getLogger(__name__)


class CompatibilityError(ShapeError):
    pass


# --------------------------------------------------------------------------
# Layered generator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    n_layers: int = 5
    resolution: int = 64
    latent_dim: int = LATENT_DIM
    w_dim: int = 64
    channels: int = 32

    def layer_resolutions(self) -> list[int]:
        res, out = 4, []
        for i in range(self.n_layers):
            if i > 0 and res < self.resolution:
                res *= 2
            out.append(res)
        return out


class ModulatedConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, w_dim: int, kernel: int = 3, demodulate: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel) / math.sqrt(in_ch * kernel ** 2))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = nn.Linear(w_dim, in_ch)
        nn.init.normal_(self.affine.weight, std=1 / math.sqrt(w_dim))
        nn.init.ones_(self.affine.bias)
        self.demodulate = demodulate
        self.padding = kernel // 2

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        n, c, h, wd = x.shape
        style = self.affine(w).view(n, 1, c, 1, 1)
        weight = self.weight.unsqueeze(0) * style
        if self.demodulate:
            weight = weight * torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
        weight = weight.view(-1, c, *self.weight.shape[2:])
        out = F.conv2d(x.reshape(1, n * c, h, wd), weight, padding=self.padding, groups=n)
        return out.view(n, -1, h, wd) + self.bias.view(1, -1, 1, 1)


class GeneratorLayer(nn.Module):
    """One resolution block: (mapping + constant), modulated conv, toRGB."""

    def __init__(self, spec: GeneratorSpec, index: int, upsample: bool):
        super().__init__()
        self.index = index
        self.upsample = upsample
        ch = spec.channels
        if index == 0:
            self.mapping = nn.Sequential(nn.Linear(spec.latent_dim, spec.w_dim), nn.LeakyReLU(0.2),
                                         nn.Linear(spec.w_dim, spec.w_dim), nn.LeakyReLU(0.2))
            self.const = nn.Parameter(torch.randn(1, ch, 4, 4))
        self.conv = ModulatedConv(ch, ch, spec.w_dim)
        self.to_rgb = ModulatedConv(ch, 3, spec.w_dim, kernel=1, demodulate=False)

    def forward(self, x, rgb, w):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            rgb = F.interpolate(rgb, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.leaky_relu(self.conv(x, w), 0.2)
        rgb = self.to_rgb(x, w) if rgb is None else rgb + self.to_rgb(x, w)
        return x, rgb


class LayeredGenerator(nn.Module):
    """Small style-based generator with skip-to-RGB outputs, organized by layer."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        res = spec.layer_resolutions()
        self.layers = nn.ModuleList(
            GeneratorLayer(spec, i, upsample=i > 0 and res[i] > res[i - 1]) for i in range(spec.n_layers))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.spec.latent_dim:
            raise ShapeError(f"latent dimension {z.shape[-1]} != generator's {self.spec.latent_dim}")
        z = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        first = self.layers[0]
        w = first.mapping(z)
        x = first.const.expand(len(z), -1, -1, -1)
        rgb = None
        for layer in self.layers:
            x, rgb = layer(x, rgb, w)
        return torch.tanh(rgb)

    def weights(self) -> "LayeredGeneratorWeights":
        layers = tuple({k: v.detach().clone() for k, v in layer.state_dict().items()} for layer in self.layers)
        return LayeredGeneratorWeights(layers, self.spec)


@dataclass(frozen=True)
class LayeredGeneratorWeights:
    layers: tuple[dict[str, torch.Tensor], ...]
    spec: GeneratorSpec

    def __post_init__(self):
        if len(self.layers) != self.spec.n_layers:
            raise ShapeError(f"{len(self.layers)} layer blocks for a {self.spec.n_layers}-layer spec")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def manifest(self) -> dict:
        return {
            "spec": self.spec.__dict__,
            "layer_order": "coarse_to_fine",
            "resolution": self.spec.resolution,
            "layers": [{k: list(v.shape) for k, v in layer.items()} for layer in self.layers],
        }

    def build(self) -> LayeredGenerator:
        gen = LayeredGenerator(self.spec)
        for layer, state in zip(gen.layers, self.layers):
            layer.load_state_dict(state)
        gen.eval()
        return gen

    def equal(self, other: "LayeredGeneratorWeights") -> bool:
        """Bit-exact equality of every parameter."""
        if self.manifest() != other.manifest():
            return False
        return all(torch.equal(a[k], b[k]) for a, b in zip(self.layers, other.layers) for k in a)

    def save(self, directory: str | Path) -> None:
        """Write ``manifest.json`` plus one tensor file per layer."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "manifest.json").write_text(json.dumps(self.manifest(), indent=1))
        for i, layer in enumerate(self.layers):
            torch.save(layer, directory / f"layer_{i}.pt")

    @classmethod
    def load(cls, directory: str | Path) -> "LayeredGeneratorWeights":
        directory = Path(directory)
        manifest = read_manifest(directory)
        spec = GeneratorSpec(**manifest["spec"])
        layers = tuple(torch.load(directory / f"layer_{i}.pt", map_location="cpu")
                       for i in range(spec.n_layers))
        weights = cls(layers, spec)
        if weights.manifest()["layers"] != manifest["layers"]:
            raise CompatibilityError(f"layer files in {directory} disagree with the manifest")
        return weights


def read_manifest(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def check_compatible(a: dict | LayeredGeneratorWeights, b: dict | LayeredGeneratorWeights) -> None:
    """Raise unless two weight sets (or their manifests) have pairwise equal layer shapes."""
    ma = a.manifest() if isinstance(a, LayeredGeneratorWeights) else a
    mb = b.manifest() if isinstance(b, LayeredGeneratorWeights) else b
    if ma["layers"] != mb["layers"]:
        raise CompatibilityError("generator layer shapes differ; weights are not blend-compatible")


def init_generator(spec: GeneratorSpec = GeneratorSpec(), seed: int = 0) -> LayeredGeneratorWeights:
    """Randomly initialized toy generator weights."""
    with seeded(seed):
        return LayeredGenerator(spec).weights()


def blend_generators(source: LayeredGeneratorWeights, target: LayeredGeneratorWeights, k: int,
                     interpolation: float | None = None) -> LayeredGeneratorWeights:
    """Take layers ``0..k-1`` from ``source`` and the rest from ``target``.

    With ``interpolation`` set, the first ``k`` layers become
    ``interpolation * source + (1 - interpolation) * target`` instead of a
    hard swap.
    """
    check_compatible(source, target)
    if not 0 <= k <= source.n_layers:
        raise ParameterError(f"blend index k={k} outside [0, {source.n_layers}]")
    layers = []
    for i, (s, t) in enumerate(zip(source.layers, target.layers)):
        if i >= k:
            layers.append(t)
        elif interpolation is None:
            layers.append(s)
        else:
            layers.append({n: interpolation * s[n] + (1 - interpolation) * t[n] for n in s})
    return LayeredGeneratorWeights(tuple(layers), target.spec)


def _as_generator(g) -> LayeredGenerator:
    return g.build() if isinstance(g, LayeredGeneratorWeights) else g


def sample_latents(count: int, seed: int, dim: int = LATENT_DIM) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(count, dim, generator=gen)


def sample_symmetric_pair(z, source, blended) -> tuple[np.ndarray, np.ndarray]:
    """Decode one latent code through the source and blended generators."""
    z = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1)
    gs, gt = _as_generator(source), _as_generator(blended)
    for g in (gs, gt):
        if z.shape[1] != g.spec.latent_dim:
            raise ShapeError(f"latent dimension {z.shape[1]} != generator's {g.spec.latent_dim}")
    with torch.no_grad():
        return from_tensor(gs(z))[0], from_tensor(gt(z))[0]


def generate_calibrated_targets(blended, count: int, seed: int, batch: int = 64) -> list[np.ndarray]:
    """Sample ``count`` images from fresh latent codes."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    gen = _as_generator(blended)
    z = sample_latents(count, seed, gen.spec.latent_dim)
    out: list[np.ndarray] = []
    with torch.no_grad():
        for i in range(0, count, batch):
            out.extend(from_tensor(gen(z[i:i + batch])))
    return out


# --------------------------------------------------------------------------
# Identity preservation and fine-tuning
# --------------------------------------------------------------------------

def identity_loss(a, b, provider) -> torch.Tensor | float:
    """``1 - cos(R(a), R(b))``, averaged over a batch.

    Accepts HWC arrays (returns a float) or NCHW tensors (returns a tensor
    that carries gradients).
    """
    as_float = not torch.is_tensor(a)
    if as_float:
        a, b = to_tensor(a), to_tensor(b)
    ea, eb = unit_embeddings(provider, a), unit_embeddings(provider, b)
    loss = (1 - (ea * eb).sum(dim=1)).mean()
    return float(loss) if as_float else loss


class GeneratorDiscriminator(nn.Module):
    """Small convolutional discriminator producing one logit per image."""

    def __init__(self, resolution: int = 64, base: int = 32):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(3, base, 3, padding=1), nn.LeakyReLU(0.2)]
        res, ch = resolution, base
        while res > 4:
            nxt = min(ch * 2, 128)
            layers += [nn.Conv2d(ch, nxt, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            res //= 2
            ch = nxt
        layers += [nn.Flatten(), nn.Linear(ch * 16, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).view(-1)


def init_discriminator(resolution: int, seed: int = 0, base: int = 32) -> GeneratorDiscriminator:
    with seeded(seed):
        return GeneratorDiscriminator(resolution, base)


@dataclass(frozen=True)
class CCNConfig:
    k: int = 4
    samples: int = 10_000
    lambda_id: float = 1.0
    steps: int = 1000
    seed: int = 0
    lr: float = 2e-3
    beta1: float = 0.0
    beta2: float = 0.99
    batch: int = 4
    r1_gamma: float = 10.0
    r1_interval: int = 4
    n_layers: int = 5
    resolution: int = 64
    channels: int = 32
    w_dim: int = 64
    latent_dim: int = LATENT_DIM
    disc_base: int = 32
    source_checkpoint: str = ""

    @property
    def spec(self) -> GeneratorSpec:
        return GeneratorSpec(self.n_layers, self.resolution, self.latent_dim, self.w_dim, self.channels)


@dataclass
class FinetuneResult:
    weights: LayeredGeneratorWeights
    discriminator: nn.Module
    history: list[dict] = field(default_factory=list)


def finetune_target_generator(init: LayeredGeneratorWeights, discriminator: nn.Module,
                              exemplars: Sequence[np.ndarray], config: CCNConfig = CCNConfig(),
                              id_provider: nn.Module | None = None,
                              source: LayeredGeneratorWeights | None = None) -> FinetuneResult:
    """Adapt a copy of the source generator to the style exemplars.

    Loss: non-saturating logistic adversarial loss with lazy R1 penalty on
    the discriminator, plus ``lambda_id * identity_loss(G_t(z), G_s(z))``
    where ``G_s`` is ``source`` (default: ``init`` itself).
    """
    if not exemplars:
        raise ConfigError("fine-tuning needs at least one style exemplar")
    source = init if source is None else source
    check_compatible(init, source)
    if config.lambda_id > 0 and id_provider is None:
        raise ConfigError("lambda_id > 0 needs an identity provider")

    res = init.spec.resolution
    real_all = to_tensor([resize(im, res, res) for im in exemplars])
    g_s = source.build().requires_grad_(False)
    g_t = init.build().train()
    opt_g = torch.optim.Adam(g_t.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    if id_provider is not None:
        id_provider.requires_grad_(False)
    zgen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng([config.seed, 11])
    history = []

    for step in range(1, config.steps + 1):
        z = torch.randn(config.batch, init.spec.latent_dim, generator=zgen)
        real = real_all[rng.integers(len(real_all), size=config.batch)]

        fake = g_t(z)
        d_loss = F.softplus(discriminator(fake.detach())).mean() + F.softplus(-discriminator(real)).mean()
        r1 = torch.zeros(())
        if config.r1_gamma > 0 and config.r1_interval > 0 and step % config.r1_interval == 0:
            real_req = real.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(discriminator(real_req).sum(), real_req, create_graph=True)
            r1 = grad.pow(2).sum(dim=(1, 2, 3)).mean()
            d_loss = d_loss + config.r1_gamma / 2 * r1 * config.r1_interval
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        adv = F.softplus(-discriminator(fake)).mean()
        if config.lambda_id > 0:
            with torch.no_grad():
                src = g_s(z)
            id_term = config.lambda_id * identity_loss(fake, src, id_provider)
        else:
            id_term = torch.zeros(())
        loss = adv + id_term
        opt_g.zero_grad()
        loss.backward(inputs=list(g_t.parameters()))
        opt_g.step()

        row = {"step": step, "adv": adv.item(), "id": id_term.item(), "r1": r1.item(),
               "d_loss": d_loss.item(), "total": loss.item()}
        history.append(row)
        if step == 1 or step % 50 == 0:
            log.info("ccn step %d: adv %.4f id %.4f d %.4f", step, row["adv"], row["id"], row["d_loss"])

    return FinetuneResult(g_t.weights(), discriminator, history)
