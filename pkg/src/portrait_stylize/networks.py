"""Building blocks: U-net translator, PatchGAN stacks and stand-in feature extractors."""

from __future__ import annotations

import contextlib
import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def weights_hash(module_or_state) -> str:
    """Content hash of a module's parameters and buffers (names, shapes, bytes)."""
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class UNet(nn.Module):
    """Fully convolutional U-net with instance norm and skip connections.

    Inputs whose sides are not multiples of ``2 ** levels`` are reflection
    padded and the output is cropped back, so output size always equals
    input size.
    """

    def __init__(self, in_ch: int = 3, out_ch: int = 3, base: int = 32, levels: int = 4):
        super().__init__()
        self.levels = levels
        self.stem = nn.Sequential(nn.Conv2d(in_ch, base, 7, padding=3, padding_mode="reflect"),
                                  nn.LeakyReLU(0.2))
        self.down = nn.ModuleList()
        self.up = nn.ModuleList()
        ch = base
        widths = []
        for _ in range(levels):
            widths.append(ch)
            self.down.append(nn.Sequential(
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1, padding_mode="reflect"),
                nn.InstanceNorm2d(ch * 2, affine=True),
                nn.LeakyReLU(0.2),
            ))
            ch *= 2
        self.bottleneck = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(ch, affine=True),
            nn.LeakyReLU(0.2),
        )
        for skip in reversed(widths):
            self.up.append(nn.Sequential(
                nn.Conv2d(ch + skip, skip, 3, padding=1, padding_mode="reflect"),
                nn.InstanceNorm2d(skip, affine=True),
                nn.LeakyReLU(0.2),
            ))
            ch = skip
        self.head = nn.Conv2d(ch, out_ch, 7, padding=3, padding_mode="reflect")

    @property
    def factor(self) -> int:
        return 2 ** self.levels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        f = self.factor
        ph, pw = (-h) % f, (-w) % f
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        feat = self.stem(x)
        skips = []
        for down in self.down:
            skips.append(feat)
            feat = down(feat)
        feat = self.bottleneck(feat)
        for up, skip in zip(self.up, reversed(skips)):
            feat = F.interpolate(feat, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            feat = up(torch.cat([feat, skip], dim=1))
        out = torch.tanh(self.head(feat))
        return out[..., :h, :w]


def patchgan_layers(in_ch: int = 3, base: int = 32, n_layers: int = 3, norm: bool = True) -> list[nn.Module]:
    """PatchGAN trunk (without the final 1-channel projection)."""
    layers: list[nn.Module] = [nn.Conv2d(in_ch, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
    ch = base
    for i in range(1, n_layers):
        nxt = min(base * 2 ** i, base * 8)
        layers.append(nn.Conv2d(ch, nxt, 4, stride=2, padding=1))
        if norm:
            layers.append(nn.InstanceNorm2d(nxt, affine=True))
        layers.append(nn.LeakyReLU(0.2))
        ch = nxt
    layers.append(nn.Conv2d(ch, ch, 3, padding=1))
    layers.append(nn.LeakyReLU(0.2))
    return layers


class PatchDiscriminator(nn.Module):
    """PatchGAN discriminator returning a map of real/fake logits."""

    def __init__(self, in_ch: int = 3, base: int = 32, n_layers: int = 3):
        super().__init__()
        self.out_channels = min(base * 2 ** (n_layers - 1), base * 8)
        self.net = nn.Sequential(*patchgan_layers(in_ch, base, n_layers),
                                 nn.Conv2d(self.out_channels, 1, 3, padding=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


# --------------------------------------------------------------------------
# Feature extractors
# --------------------------------------------------------------------------

class StubFeatureExtractor(nn.Module):
    """Frozen random-weight conv stack standing in for the VGG content features.

    Deterministic for a given seed; inputs are the usual [-1, 1] images.
    """

    def __init__(self, seed: int = 0, width: int = 16, depth: int = 3):
        super().__init__()
        layers: list[nn.Module] = []
        ch = 3
        with seeded(seed):
            for i in range(depth):
                layers.append(nn.Conv2d(ch, width, 3, stride=2 if i else 1, padding=1))
                layers.append(nn.Tanh())
                ch = width
        self.net = nn.Sequential(*layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


# ImageNet statistics used by torchvision's pretrained classifiers.
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class VGGFeatureExtractor(nn.Module):
    """Pretrained VGG19 features up to ``conv4_4``.

    This is the single place where [-1, 1] images are re-normalized to the
    ImageNet statistics the classifier expects.
    """

    CONV4_4 = 26  # exclusive end index into vgg19().features

    def __init__(self, weights_path: str | None = None):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        if weights_path:
            model = vgg19()
            model.load_state_dict(torch.load(weights_path, map_location="cpu"))
        else:
            try:
                model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
            except Exception as exc:  # download failure, offline cache miss
                raise RuntimeError(f"pretrained VGG19 weights unavailable: {exc}") from exc
        self.features = model.features[: self.CONV4_4]
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = ((x + 1) / 2 - self.mean) / self.std
        return self.features(x)
