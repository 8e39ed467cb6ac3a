"""File-emitting rasterization: annotated images, detection panels, loss curves.

Everything renders to arrays/files without a display server; the loss curve
uses the matplotlib Agg backend, box/caption overlays use Pillow.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError

_PALETTE = [(255, 80, 80), (80, 220, 120), (90, 140, 255), (250, 220, 70),
            (240, 130, 240), (90, 230, 230)]


def clip_corners(corners: Sequence[float], width: int, height: int):
    """Clip a corner-form box to image bounds; None if nothing remains."""
    x1 = min(max(float(corners[0]), 0.0), float(width))
    y1 = min(max(float(corners[1]), 0.0), float(height))
    x2 = min(max(float(corners[2]), 0.0), float(width))
    y2 = min(max(float(corners[3]), 0.0), float(height))
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return None
    return (x1, y1, x2, y2)


def annotate_image(image: np.ndarray, regions: Sequence[Tuple[Sequence[float], str]],
                   scale: int = 4) -> np.ndarray:
    """Draw labeled boxes on an upscaled copy of the image.

    ``regions`` holds (corner box, label) pairs already clipped to bounds.
    Upscaling keeps captions legible on 64-pixel images.
    """
    h, w = image.shape[:2]
    canvas = Image.fromarray(image).resize((w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    for i, (box, label) in enumerate(regions):
        color = _PALETTE[i % len(_PALETTE)]
        x1, y1, x2, y2 = (v * scale for v in box)
        draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
        ty = y1 - 11 if y1 >= 11 else min(y2 + 1, h * scale - 11)
        draw.text((x1 + 2, ty), label, fill=color)
    return np.asarray(canvas)


def crop_region(image: np.ndarray, corners: Sequence[float], pad: int = 2) -> np.ndarray:
    h, w = image.shape[:2]
    clipped = clip_corners(corners, w, h)
    if clipped is None:
        return np.zeros((1, 1, 3), dtype=np.uint8)
    x1, y1, x2, y2 = clipped
    x1 = max(int(np.floor(x1)) - pad, 0)
    y1 = max(int(np.floor(y1)) - pad, 0)
    x2 = min(int(np.ceil(x2)) + pad, w)
    y2 = min(int(np.ceil(y2)) + pad, h)
    return image[y1:y2, x1:x2]


def detection_panel(crops: Sequence[Tuple[np.ndarray, str]], tile: int = 96) -> np.ndarray:
    """Lay out region crops in a row with a label strip under each tile."""
    if not crops:
        return np.zeros((tile + 14, tile, 3), dtype=np.uint8)
    panel = Image.new("RGB", (tile * len(crops), tile + 14), (24, 24, 24))
    draw = ImageDraw.Draw(panel)
    for i, (crop, label) in enumerate(crops):
        im = Image.fromarray(crop).resize((tile - 4, tile - 4), Image.NEAREST)
        panel.paste(im, (i * tile + 2, 2))
        draw.text((i * tile + 3, tile + 1), label[:18], fill=(230, 230, 230))
    return np.asarray(panel)


def save_loss_curve(metrics_tsv, out_path) -> None:
    """Render iteration/loss columns of a metrics log to an image file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lines = Path(metrics_tsv).read_text().splitlines()
    if len(lines) < 2:
        raise DataError(f"{metrics_tsv} holds no training iterations")
    header = lines[0].split("\t")
    cols = {name: [] for name in header}
    for line in lines[1:]:
        for name, val in zip(header, line.split("\t")):
            cols[name].append(float(val))

    fig, ax = plt.subplots(figsize=(7, 4.2), dpi=110)
    it = cols["iteration"]
    ax.plot(it, cols["total"], label="total", linewidth=1.6)
    for term in ("caption", "rpn_score", "rpn_box", "rec_score", "rec_box"):
        ax.plot(it, cols[term], label=term, linewidth=0.9, alpha=0.75)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.25)
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Software": None})
    plt.close(fig)
