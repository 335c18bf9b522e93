"""Loss curves, per-class metric curves and a qualitative overlay grid.

Everything renders through the Agg backend and strips the PNG software tag,
so identical inputs give identical files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .domain import CLASS_NAMES, FOREGROUND_CLASSES  # noqa: E402
from .losses import DISC_TERMS, TERMS  # noqa: E402

CURVES = TERMS + ("total",) + DISC_TERMS
# class id -> RGB
OVERLAY_COLORS = {1: (0.0, 0.0, 1.0), 2: (0.0, 1.0, 0.0), 3: (1.0, 0.0, 0.0)}
_PNG_META = {"Software": None}


class EmptyLogError(ValueError):
    pass


def read_jsonl(path) -> List[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=80, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curves(rows: Sequence[dict], out_dir) -> List[Path]:
    """One PNG per declared curve, x axis = global step."""
    if not rows:
        raise EmptyLogError("training log is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in rows]
    written = []
    for name in CURVES:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, [r.get(name, 0.0) for r in rows], lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel(name)
        ax.set_title(name)
        fig.tight_layout()
        written.append(_save(fig, out_dir / f"loss_{name}.png"))
    return written


def plot_metric_history(history: Sequence[dict], out_dir) -> List[Path]:
    """Per-class Dice and ASSD against epoch."""
    if not history:
        raise EmptyLogError("metrics history is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = [h["epoch"] for h in history]
    written = []
    for metric, unit in (("dice", "%"), ("assd", "mm")):
        fig, ax = plt.subplots(figsize=(5, 3))
        for c in FOREGROUND_CLASSES:
            name = CLASS_NAMES[c]
            ax.plot(epochs, [h[metric][name] for h in history], marker="o", ms=3,
                    color=OVERLAY_COLORS[c], label=name)
        ax.plot(epochs, [h[f"mean_{metric}"] for h in history], color="k", ls="--", label="Average")
        ax.set_xlabel("epoch")
        ax.set_ylabel(f"{metric.upper()} ({unit})")
        ax.legend(fontsize=7)
        fig.tight_layout()
        written.append(_save(fig, out_dir / f"{metric}_per_class.png"))
    return written


def overlay(image: np.ndarray, labels: Optional[np.ndarray], alpha: float = 0.5) -> np.ndarray:
    """Grey image in [-1, 1] with class colours blended on top -> (H, W, 3) in [0, 1]."""
    grey = np.clip((np.asarray(image, dtype=np.float64) + 1) / 2, 0, 1)
    rgb = np.repeat(grey[..., None], 3, axis=-1)
    if labels is None:
        return rgb
    for c, color in OVERLAY_COLORS.items():
        sel = labels == c
        rgb[sel] = (1 - alpha) * rgb[sel] + alpha * np.asarray(color)
    return rgb


def qualitative_panels(models, target_samples, source_image, encoder: str = "E_c_tgt") -> List[Dict[str, np.ndarray]]:
    """Per target slice: input, translation into source appearance, prediction, reference."""
    panels = []
    with torch.no_grad():
        style = models.E_s_src(torch.from_numpy(source_image)[None, None])[0]
        for s in target_samples:
            x = torch.from_numpy(s.image.pixels)[None, None]
            c = getattr(models, encoder)(x)
            translated = models.G_src(models.E_c_tgt(x), style)[0, 0].numpy()
            pred = models.S_seg(c).argmax(dim=1)[0].numpy()
            panels.append({
                "image": s.image.pixels,
                "translated": translated,
                "prediction": pred,
                "reference": s.mask.labels if hasattr(s, "mask") else None,
            })
    return panels


def plot_overlay_grid(panels: Sequence[Dict[str, np.ndarray]], path) -> Path:
    if not panels:
        raise EmptyLogError("no samples to draw")
    cols = ("image", "translated", "prediction", "reference")
    fig, axes = plt.subplots(len(panels), len(cols), figsize=(2 * len(cols), 2 * len(panels)), squeeze=False)
    for r, p in enumerate(panels):
        cells = (overlay(p["image"], None), overlay(p["translated"], None),
                 overlay(p["image"], p["prediction"]), overlay(p["image"], p["reference"]))
        for c, (title, cell) in enumerate(zip(cols, cells)):
            ax = axes[r][c]
            ax.imshow(cell, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(title, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return _save(fig, path)
