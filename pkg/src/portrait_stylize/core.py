"""Image conventions, affine warping and landmark records shared by every stage.

Images travel between stages as ``numpy.ndarray`` of shape ``(H, W, C)``,
dtype float32, values in ``[-1, 1]`` (the generator convention). Networks
consume ``(N, C, H, W)`` torch tensors; :func:`to_tensor` and
:func:`from_tensor` are the only conversion points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

LATENT_DIM = 512

# 68-point landmark convention, indices are half-open ranges.
LANDMARK_COMPONENTS = {
    "left_eye": (36, 42),
    "right_eye": (42, 48),
    "mouth": (48, 68),
}
EXPRESSION_COMPONENTS = ("left_eye", "right_eye", "mouth")


class ImageFormatError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# Images
# --------------------------------------------------------------------------

def check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an ImageTensor and return it as a float32 array."""
    if image.ndim != 3:
        raise ImageFormatError(f"{name}: expected HxWxC array, got shape {image.shape}")
    h, w, c = image.shape
    if c not in (1, 3):
        raise ImageFormatError(f"{name}: channel count must be 1 or 3, got {c}")
    if h < 1 or w < 1:
        raise ImageFormatError(f"{name}: empty image {image.shape}")
    image = np.asarray(image, dtype=np.float32)
    if not np.all(np.isfinite(image)):
        raise ImageFormatError(f"{name}: non-finite pixel values")
    return image


def normalize(image_u8: np.ndarray) -> np.ndarray:
    """Map an 8-bit image onto [-1, 1] (0 -> -1, 255 -> 1)."""
    image_u8 = np.asarray(image_u8)
    if image_u8.ndim == 2:
        image_u8 = image_u8[:, :, None]
    if image_u8.ndim != 3 or image_u8.shape[2] not in (1, 3):
        raise ImageFormatError(f"expected 1 or 3 channels, got shape {image_u8.shape}")
    if image_u8.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 pixels, got {image_u8.dtype}")
    return image_u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def denormalize(image: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`; values are rounded and clipped to 0..255."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ImageFormatError(f"expected 1 or 3 channels, got shape {image.shape}")
    out = np.rint((image.astype(np.float64) + 1.0) * 127.5)
    return np.clip(out, 0, 255).astype(np.uint8)


def to_tensor(images: np.ndarray | Iterable[np.ndarray]) -> torch.Tensor:
    """HWC image (or list of them) -> NCHW float32 tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    batch = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


def from_tensor(batch: torch.Tensor) -> list[np.ndarray]:
    """NCHW tensor -> list of HWC float32 arrays."""
    arr = batch.detach().to(torch.float32).permute(0, 2, 3, 1).cpu().numpy()
    return [np.ascontiguousarray(a) for a in arr]


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return normalize(np.asarray(im.convert("RGB")))


def save_image(image: np.ndarray, path: str | Path) -> None:
    arr = denormalize(check_image(image))
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    t = to_tensor(image)
    shrinking = height < image.shape[0] or width < image.shape[1]
    out = F.interpolate(t, size=(height, width), mode="bilinear",
                        align_corners=False, antialias=shrinking)
    return np.clip(from_tensor(out)[0], -1.0, 1.0)


def budget_size(height: int, width: int, max_side: int) -> tuple[int, int]:
    if max_side < 1:
        raise ParameterError(f"max_side must be >= 1, got {max_side}")
    longest = max(height, width)
    if longest <= max_side:
        return height, width
    ratio = max_side / longest
    return max(1, round(height * ratio)), max(1, round(width * ratio))


def resize_to_budget(image: np.ndarray, max_side: int) -> np.ndarray:
    """Downscale so the longer side is at most ``max_side``, keeping aspect ratio."""
    h, w = image.shape[:2]
    nh, nw = budget_size(h, w, max_side)
    if (nh, nw) == (h, w):
        return image
    return resize(image, nh, nw)


# --------------------------------------------------------------------------
# Affine warping
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineParams:
    scale: float = 1.0
    rotation: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and math.isfinite(self.rotation)):
            raise ParameterError(f"non-finite affine params {self}")
        if self.scale <= 0:
            raise ParameterError(f"scale must be positive, got {self.scale}")


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    # mirror about the edge pixels: -1 -> 1, n -> n-2
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def source_coordinates(height: int, width: int, params: AffineParams) -> tuple[np.ndarray, np.ndarray]:
    """Input-image sample positions (row, col) for every output pixel.

    The forward map is ``p' = c + scale * R(rotation) (p - c)`` with ``c`` the
    image center, so each output pixel samples the input at the inverse image.
    """
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    dy, dx = ys - cy, xs - cx
    cos, sin = math.cos(params.rotation), math.sin(params.rotation)
    inv = 1.0 / params.scale
    # inverse rotation applied to (dx, dy)
    sx = inv * (cos * dx + sin * dy) + cx
    sy = inv * (-sin * dx + cos * dy) + cy
    return sy, sx


def affine_transform(image: np.ndarray, params: AffineParams) -> np.ndarray:
    """Rotate about the center and scale uniformly; bilinear, reflection padded."""
    if not isinstance(params, AffineParams):
        params = AffineParams(*params)
    image = check_image(image)
    h, w, _ = image.shape
    sy, sx = source_coordinates(h, w, params)
    y0, x0 = np.floor(sy), np.floor(sx)
    fy, fx = (sy - y0)[..., None], (sx - x0)[..., None]
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    ya, yb = _reflect_index(y0, h), _reflect_index(y0 + 1, h)
    xa, xb = _reflect_index(x0, w), _reflect_index(x0 + 1, w)
    src = image.astype(np.float64)
    top = src[ya, xa] * (1.0 - fx) + src[ya, xb] * fx
    bottom = src[yb, xa] * (1.0 - fx) + src[yb, xb] * fx
    out = top * (1.0 - fy) + bottom * fy
    return out.astype(np.float32)


def transform_points(points: np.ndarray, height: int, width: int, params: AffineParams) -> np.ndarray:
    """Apply the forward map of :func:`affine_transform` to (x, y) points."""
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    cos, sin = math.cos(params.rotation), math.sin(params.rotation)
    d = np.asarray(points, dtype=np.float64) - (cx, cy)
    x = params.scale * (cos * d[:, 0] - sin * d[:, 1]) + cx
    y = params.scale * (sin * d[:, 0] + cos * d[:, 1]) + cy
    return np.stack([x, y], axis=1)


# --------------------------------------------------------------------------
# Landmarks
# --------------------------------------------------------------------------

@dataclass
class LandmarkSet:
    """Component-tagged facial points in pixel (x, y) coordinates."""

    components: dict[str, np.ndarray]
    width: int | None = None
    height: int | None = None
    image: str | None = None

    def __post_init__(self):
        self.components = {k: np.asarray(v, dtype=np.float64).reshape(-1, 2)
                           for k, v in self.components.items()}
        for name, pts in self.components.items():
            if len(pts) < 4:
                raise ShapeError(f"landmark component {name!r} needs >= 4 points, has {len(pts)}")
        if self.width is not None and self.height is not None:
            for name, pts in self.components.items():
                if (pts[:, 0].min() < 0 or pts[:, 1].min() < 0
                        or pts[:, 0].max() > self.width - 1 or pts[:, 1].max() > self.height - 1):
                    raise ShapeError(f"landmark component {name!r} lies outside the "
                                     f"{self.width}x{self.height} image")

    @classmethod
    def from_68(cls, points: np.ndarray, **kwargs) -> "LandmarkSet":
        points = np.asarray(points, dtype=np.float64)
        if points.shape != (68, 2):
            raise ShapeError(f"expected 68x2 points, got {points.shape}")
        comps = {name: points[a:b] for name, (a, b) in LANDMARK_COMPONENTS.items()}
        return cls(comps, **kwargs)

    def to_record(self) -> dict:
        rec = {"components": {k: v.tolist() for k, v in self.components.items()}}
        if self.image is not None:
            rec["image"] = self.image
        if self.width is not None:
            rec["width"], rec["height"] = self.width, self.height
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "LandmarkSet":
        return cls(rec["components"], width=rec.get("width"), height=rec.get("height"),
                   image=rec.get("image"))


def write_landmarks(path: str | Path, landmarks: Iterable[LandmarkSet]) -> None:
    """One JSON record per line."""
    with open(path, "w") as fh:
        for lm in landmarks:
            fh.write(json.dumps(lm.to_record()) + "\n")


def read_landmarks(path: str | Path) -> dict[str, LandmarkSet]:
    """Read a landmark file, keyed by the image name of each record."""
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                lm = LandmarkSet.from_record(json.loads(line))
                out[lm.image] = lm
    return out


@dataclass
class LandmarkFileProvider:
    """Landmark provider backed by a precomputed landmark file."""

    path: str | Path
    records: dict[str, LandmarkSet] = field(init=False)

    def __post_init__(self):
        self.records = read_landmarks(self.path)

    def __call__(self, name: str) -> LandmarkSet | None:
        return self.records.get(name)
