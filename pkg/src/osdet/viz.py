"""Annotated detection images and static report figures."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .geometry import Detection
from .labels import LabelSpace

_PALETTE = [
    (66, 135, 245),
    (235, 122, 52),
    (52, 235, 116),
    (235, 64, 192),
    (247, 215, 61),
    (64, 224, 235),
    (171, 99, 250),
    (250, 99, 99),
]
_UNKNOWN_COLOR = (255, 255, 255)


def _color_for(class_id: int, space: LabelSpace):
    if class_id == space.unknown_index:
        return _UNKNOWN_COLOR
    return _PALETTE[class_id % len(_PALETTE)]


def render_annotated(
    pixels: np.ndarray,
    detections: list[Detection],
    space: LabelSpace,
    ground_truth=None,
    scale: int = 4,
) -> Image.Image:
    """Upscaled image with detection boxes; unknown is drawn double-framed
    in white, ground truth (optional) in thin gray."""
    arr = np.round(pixels * 255.0).astype(np.uint8)
    img = Image.fromarray(arr).resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for class_id, box in ground_truth or []:
        coords = [box.x_min * scale, box.y_min * scale, box.x_max * scale - 1, box.y_max * scale - 1]
        draw.rectangle(coords, outline=(160, 160, 160), width=1)
    for det in detections:
        color = _color_for(det.class_id, space)
        b = det.box
        coords = [b.x_min * scale, b.y_min * scale, b.x_max * scale - 1, b.y_max * scale - 1]
        draw.rectangle(coords, outline=color, width=2)
        if det.class_id == space.unknown_index:
            inner = [coords[0] + 3, coords[1] + 3, coords[2] - 3, coords[3] - 3]
            if inner[0] < inner[2] and inner[1] < inner[3]:
                draw.rectangle(inner, outline=color, width=1)
        label = f"{space.class_name(det.class_id)} {det.score:.2f}"
        draw.text((coords[0] + 2, max(0, coords[1] - 11)), label, fill=color)
    return img


def save_annotated(path: Path, pixels, detections, space, ground_truth=None, scale: int = 4):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    render_annotated(pixels, detections, space, ground_truth, scale).save(path, format="PNG")


def plot_training_log(records: list[dict], out_path: Path, title: str):
    """Loss-component curves from a training log."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not records:
        return
    iters = [r["iteration"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    axes[0].plot(iters, [r["loss_total"] for r in records], label="total", lw=1.2)
    for key in ("sup_rpn_cls", "sup_rpn_reg", "sup_roi_reg", "sup_uc"):
        axes[0].plot(iters, [r[key] for r in records], label=key, lw=0.8, alpha=0.8)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=7)
    axes[0].set_title(title)
    axes[1].plot(iters, [r["sup_fc"] for r in records], label="sup_fc", lw=0.8)
    axes[1].plot(iters, [r["unsup_fc"] for r in records], label="unsup_fc", lw=0.8)
    axes[1].plot(iters, [r["unsup_uc"] for r in records], label="unsup_uc", lw=0.8)
    axes[1].plot(iters, [r["alpha_t"] for r in records], label="alpha_t", lw=0.8, ls="--")
    axes[1].set_xlabel("iteration")
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def render_ablation_table(rows: list[dict], out_path: Path):
    """Static image of the component ablation grid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 0.5 + 0.4 * (len(rows) + 1)))
    ax.axis("off")
    header = ["fc", "uc", "map_k", "ap_u"]
    cells = [
        [
            "on" if r["enable_fc"] else "off",
            "on" if r["enable_uc"] else "off",
            f"{r['map_k']:.4f}",
            f"{r['ap_u']:.4f}",
        ]
        for r in rows
    ]
    table = ax.table(cellText=cells, colLabels=header, loc="center")
    table.scale(1.0, 1.3)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
