"""Raster dumps of clean images, triggered images and the trigger itself."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..attack import Trigger, apply_trigger


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` in [0, 1] to ``(H, W, 3)`` uint8."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def amplify(trigger: Trigger) -> np.ndarray:
    """Map ``[-eps, eps]`` onto ``[0, 1]`` so the pattern is visible; mid-grey is zero."""
    eps = trigger.epsilon if trigger.epsilon > 0 else 1.0
    return np.clip(trigger.delta / (2 * eps) + 0.5, 0, 1)


def dump_images(images, trigger: Trigger, directory, scale: int = 4) -> list[Path]:
    """Write ``clean_i.png``, ``backdoor_i.png`` and ``trigger.png``; nearest-neighbour upscaled."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bd = apply_trigger(images, trigger.delta).data
    out = []

    def save(arr, name):
        im = Image.fromarray(to_uint8(arr))
        if scale > 1:
            im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
        p = directory / name
        im.save(p)
        out.append(p)

    for i, (x, xb) in enumerate(zip(images, bd)):
        save(x, f"clean_{i}.png")
        save(xb, f"backdoor_{i}.png")
    save(amplify(trigger), "trigger.png")
    return out
