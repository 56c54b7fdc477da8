"""Synthetic toy faces with 68-point landmarks.

Photos are shaded, noisy ellipse faces; style exemplars are flat-colored,
outlined faces with enlarged eyes. Both are parametric so landmarks (and
hence expression labels) are known exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LandmarkSet, save_image, write_landmarks


@dataclass(frozen=True)
class FaceParams:
    cx: float
    cy: float
    face_rx: float
    face_ry: float
    eye_open: tuple[float, float]
    mouth_open: float
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    background: tuple[float, float, float]
    eye_scale: float = 1.0


def random_face(rng: np.random.Generator, size: int, style: bool = False) -> FaceParams:
    s = size
    palette = rng.uniform(-0.2, 0.2, size=3)
    if style:
        skin = (0.85, 0.55, 0.35) + 0.1 * palette
        hair = tuple(rng.choice([(-0.6, -0.2, 0.5), (0.6, -0.1, -0.5), (-0.3, 0.4, -0.2)]))
        bg = (0.7, 0.8, 0.9) + 0.2 * rng.uniform(-1, 1, size=3)
    else:
        skin = (0.5, 0.1, -0.1) + palette
        hair = tuple(rng.uniform(-0.95, -0.5, size=3))
        bg = rng.uniform(-0.6, 0.6, size=3)
    return FaceParams(
        cx=s / 2 + rng.uniform(-0.04, 0.04) * s,
        cy=s / 2 + rng.uniform(-0.03, 0.05) * s,
        face_rx=rng.uniform(0.26, 0.32) * s,
        face_ry=rng.uniform(0.33, 0.38) * s,
        eye_open=tuple(np.repeat(rng.uniform(0.08, 0.92), 2) + rng.uniform(-0.06, 0.06, size=2)),
        mouth_open=float(rng.uniform(0.05, 0.95)),
        skin=tuple(np.clip(skin, -1, 1)),
        hair=tuple(np.clip(hair, -1, 1)),
        background=tuple(np.clip(bg, -1, 1)),
        eye_scale=1.35 if style else 1.0,
    )


def _ellipse(cx, cy, rx, ry, angles):
    return np.stack([cx + rx * np.cos(angles), cy - ry * np.sin(angles)], axis=1)


def _geometry(p: FaceParams, s: int):
    eye_dx, eye_dy = 0.38 * p.face_rx, 0.22 * p.face_ry
    eye_rx = 0.16 * p.face_rx * p.eye_scale
    eyes = [(p.cx - eye_dx, p.cy - eye_dy), (p.cx + eye_dx, p.cy - eye_dy)]
    # openings are scaled so the default label constants map them to roughly [0, 1]
    eye_ry = [eye_rx * o * 0.35 / np.sin(np.pi / 3) for o in p.eye_open]
    mouth_c = (p.cx, p.cy + 0.5 * p.face_ry)
    mouth_rx = 0.34 * p.face_rx
    mouth_ry = mouth_rx * p.mouth_open * 0.9
    return eyes, eye_rx, eye_ry, mouth_c, mouth_rx, mouth_ry


def face_landmarks(p: FaceParams, size: int) -> np.ndarray:
    """68 (x, y) points following the usual jaw/brow/nose/eye/mouth layout."""
    eyes, eye_rx, eye_ry, mouth_c, mouth_rx, mouth_ry = _geometry(p, size)
    pts = np.zeros((68, 2))
    jaw = np.linspace(np.pi * 1.0, np.pi * 2.0, 17)
    pts[0:17] = _ellipse(p.cx, p.cy, p.face_rx, p.face_ry, jaw)[::-1]
    for side, (ex, ey) in enumerate(eyes):
        brow = _ellipse(ex, ey - 1.6 * eye_rx, eye_rx * 1.2, eye_rx * 0.4, np.linspace(np.pi, 0, 5))
        pts[17 + 5 * side: 22 + 5 * side] = brow
    pts[27:31] = np.stack([np.full(4, p.cx), np.linspace(p.cy - 0.15 * p.face_ry, p.cy + 0.2 * p.face_ry, 4)], 1)
    pts[31:36] = np.stack([np.linspace(p.cx - 0.1 * p.face_rx, p.cx + 0.1 * p.face_rx, 5),
                           np.full(5, p.cy + 0.25 * p.face_ry)], 1)
    eye_angles = np.deg2rad([180, 120, 60, 0, 300, 240])
    for side, (ex, ey) in enumerate(eyes):
        pts[36 + 6 * side: 42 + 6 * side] = _ellipse(ex, ey, eye_rx, eye_ry[side], eye_angles)
    outer = np.deg2rad(np.arange(180, -180, -30))
    pts[48:60] = _ellipse(*mouth_c, mouth_rx, mouth_ry, outer)
    inner = np.deg2rad(np.arange(180, -180, -45))
    pts[60:68] = _ellipse(*mouth_c, 0.6 * mouth_rx, 0.6 * mouth_ry, inner)
    return np.clip(pts, 0, size - 1)


def render_face(p: FaceParams, size: int, style: bool = False,
                rng: np.random.Generator | None = None, supersample: int = 3) -> np.ndarray:
    s = size * supersample
    k = supersample
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / k

    def inside(cx, cy, rx, ry):
        return ((xx - cx) / max(rx, 1e-6)) ** 2 + ((yy - cy) / max(ry, 1e-6)) ** 2 <= 1.0

    img = np.empty((s, s, 3))
    img[:] = p.background
    if not style:
        img += 0.15 * ((yy / size) - 0.5)[..., None]
    hair = inside(p.cx, p.cy - 0.18 * p.face_ry, p.face_rx * 1.12, p.face_ry * 1.0)
    img[hair] = p.hair
    face = inside(p.cx, p.cy, p.face_rx, p.face_ry)
    img[face] = p.skin
    if not style:
        shade = np.clip(1 - ((xx - p.cx) / p.face_rx) ** 2 * 0.3, 0.6, 1.0)
        img[face] = (np.asarray(p.skin) + 1) * shade[face][:, None] - 1
    eyes, eye_rx, eye_ry, mouth_c, mouth_rx, mouth_ry = _geometry(p, size)
    for side, (ex, ey) in enumerate(eyes):
        eye = inside(ex, ey, eye_rx, eye_ry[side])
        img[eye] = (0.95, 0.95, 0.95)
        pupil = eye & inside(ex, ey, 0.55 * eye_rx, 0.55 * eye_rx)
        img[pupil] = (-0.9, -0.7, -0.5) if style else (-0.7, -0.8, -0.8)
    mouth = inside(*mouth_c, mouth_rx, max(mouth_ry, 0.4))
    img[mouth] = (0.6, -0.7, -0.6) if style else (0.2, -0.6, -0.5)
    if style:
        edges = np.zeros((s, s), bool)
        for m in (hair | face, face, mouth):
            edges |= m ^ np.roll(m, k, 0) | m ^ np.roll(m, k, 1)
        img[edges] = (-0.9, -0.9, -0.9)
    img = img.reshape(size, k, size, k, 3).mean(axis=(1, 3))
    if not style and rng is not None:
        img += rng.normal(0, 0.03, size=img.shape)
    return np.clip(img, -1, 1).astype(np.float32)


def make_faces(count: int, size: int = 64, style: bool = False, seed: int = 0):
    """Return ``(images, landmark_sets)`` for ``count`` random faces."""
    rng = np.random.default_rng([seed, int(style)])
    images, landmarks = [], []
    for i in range(count):
        p = random_face(rng, size, style)
        images.append(render_face(p, size, style, rng))
        landmarks.append(LandmarkSet.from_68(face_landmarks(p, size), width=size, height=size,
                                             image=f"{i:04d}.png"))
    return images, landmarks


def write_toy_dataset(root: str | Path, n_source: int = 16, n_style: int = 16, size: int = 64,
                      seed: int = 0) -> dict:
    """Write ``source/``, ``style/`` and landmark files under ``root``."""
    root = Path(root)
    layout = {}
    for name, count, style in (("source", n_source, False), ("style", n_style, True)):
        images, landmarks = make_faces(count, size, style, seed)
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for image, lm in zip(images, landmarks):
            save_image(image, folder / lm.image)
        write_landmarks(root / f"{name}_landmarks.jsonl", landmarks)
        layout[name] = str(folder)
        layout[f"{name}_landmarks"] = str(root / f"{name}_landmarks.jsonl")
    (root / "toy.json").write_text(json.dumps({"n_source": n_source, "n_style": n_style,
                                               "size": size, "seed": seed}))
    return layout
