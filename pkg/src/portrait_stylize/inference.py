"""One-pass full-image stylization with a trained translator.

The whole frame goes through the translator in a single call: there is no
face detection and no crop-and-merge step.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import ttn
from .core import DataError, check_image, load_image, resize_to_budget, save_image
from .networks import UNet, weights_hash

DEFAULT_MAX_SIDE = 2048


def infer_full_image(translator: UNet, image: np.ndarray, max_side: int = DEFAULT_MAX_SIDE) -> np.ndarray:
    """Downscale to the resolution budget, then translate the entire frame once."""
    image = resize_to_budget(check_image(image), max_side)
    return ttn.translate(translator, image)


def save_translator(path: str | Path, translator: UNet, discriminator=None, config: dict | None = None,
                    fingerprint: str = "") -> str:
    """Write a translator checkpoint; returns the translator's content hash."""
    payload = {
        "translator": translator.state_dict(),
        "unet": {"base": translator.stem[0].out_channels, "levels": translator.levels},
        "config": config or {},
        "fingerprint": fingerprint,
    }
    if discriminator is not None:
        payload["discriminator"] = discriminator.state_dict()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return weights_hash(translator)


def load_translator(path: str | Path) -> UNet:
    payload = torch.load(path, map_location="cpu")
    net = UNet(3, 3, payload["unet"]["base"], payload["unet"]["levels"])
    net.load_state_dict(payload["translator"])
    net.eval()
    return net


def infer_files(translator: UNet, inputs, out_dir: str | Path, max_side: int = DEFAULT_MAX_SIDE) -> list[Path]:
    """Stylize each input file into ``out_dir`` (same stem, PNG), preserving order.

    A ``inference.json`` record with the translator hash and the processed
    resolutions is written alongside the outputs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, entries = [], []
    for src in map(Path, inputs):
        try:
            image = load_image(src)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read input image {src}: {exc}") from exc
        result = infer_full_image(translator, image, max_side)
        dst = out_dir / f"{src.stem}.png"
        save_image(result, dst)
        outputs.append(dst)
        entries.append({"input": str(src), "output": str(dst), "height": result.shape[0],
                        "width": result.shape[1]})
    record = {"translator_hash": weights_hash(translator), "max_side": max_side, "images": entries}
    (out_dir / "inference.json").write_text(json.dumps(record, indent=1))
    return outputs
