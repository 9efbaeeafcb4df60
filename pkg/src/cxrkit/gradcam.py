"""Grad-CAM heatmaps at selectable depth, overlays and the three-depth panel."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from cxrkit.models import DEPTHS, ClassifierModel, resolve_layer
from cxrkit.preprocess import read_rgb

DEFAULT_COLORMAP = "inferno"


@dataclass
class Heatmap:
    values: np.ndarray          # (H, W) in [0, 1], upsampled to the input resolution
    source_layer: str
    target_class: str | int
    raw_max: float
    zero_map: bool
    raw_shape: tuple[int, int]  # spatial extent of the layer before upsampling
    raw: np.ndarray | None = None

    def sidecar(self) -> dict:
        return {
            "source_layer": self.source_layer,
            "target_class": self.target_class,
            "raw_max": self.raw_max,
            "zero_map": self.zero_map,
            "raw_shape": list(self.raw_shape),
            "shape": list(self.values.shape),
        }


def cam_from_activations(activations: torch.Tensor, gradients: torch.Tensor) -> torch.Tensor:
    """ReLU(sum_k mean(G_k) * A_k) for (K, h, w) activations and gradients."""
    weights = gradients.mean(dim=(1, 2))
    return F.relu((weights[:, None, None] * activations).sum(dim=0))


def normalize_cam(raw: torch.Tensor) -> tuple[torch.Tensor, float, bool]:
    peak = float(raw.max()) if raw.numel() else 0.0
    if not peak > 0.0:
        return torch.zeros_like(raw), peak, True
    return raw / peak, peak, False


def _class_index(model: nn.Module, target_class: str | int) -> int:
    vocab = getattr(model, "vocabulary", None)
    if isinstance(target_class, str):
        if not vocab or target_class not in vocab:
            raise KeyError(f"target class {target_class!r} not in vocabulary {list(vocab or [])}")
        return list(vocab).index(target_class)
    n_out = model.num_classes if isinstance(model, ClassifierModel) else None
    if target_class < 0 or (n_out is not None and target_class >= n_out):
        raise KeyError(f"target class index {target_class} out of range")
    return int(target_class)


def compute_cam(model: nn.Module, image: torch.Tensor, target_class: str | int,
                layer: str | nn.Module = "final", keep_raw: bool = False) -> Heatmap:
    """Grad-CAM of the ``target_class`` logit at ``layer``.

    ``image`` is a standardized (3, H, W) tensor. Model weights and ``.grad``
    fields are left untouched; the model is switched to eval mode for the call.
    """
    cls_idx = _class_index(model, target_class)
    if isinstance(layer, nn.Module):
        module = layer
        name = next((n for n, m in model.named_modules() if m is module), type(module).__name__)
    else:
        name, module = resolve_layer(model, layer)

    captured: dict[str, torch.Tensor] = {}

    def hook(_mod, _inp, out):
        captured["act"] = out

    x = image.unsqueeze(0) if image.dim() == 3 else image
    if x.shape[0] != 1:
        raise ValueError("compute_cam expects a single image")
    # input requires grad so frozen prefixes still build a graph up to the layer
    x = x.detach().clone().requires_grad_(True)
    was_training = model.training
    model.eval()
    handle = module.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            logits = model(x)
            act = captured["act"]
            score = logits[0, cls_idx]
            grad = torch.autograd.grad(score, act, allow_unused=True)[0] if act.requires_grad else None
    finally:
        handle.remove()
        model.train(was_training)

    A = act[0].detach().double()
    G = torch.zeros_like(A) if grad is None else grad[0].detach().double()
    raw = cam_from_activations(A, G)
    norm, peak, zero = normalize_cam(raw)
    up = F.interpolate(norm[None, None], size=tuple(x.shape[-2:]), mode="bilinear", align_corners=False)[0, 0]
    values = up.clamp(0.0, 1.0).numpy()
    return Heatmap(values, name, target_class, peak, zero, tuple(raw.shape),
                   raw.numpy() if keep_raw else None)


def layer_sweep(model: ClassifierModel, image: torch.Tensor, target_class: str | int) -> dict[str, Heatmap]:
    return {depth: compute_cam(model, image, target_class, depth) for depth in DEPTHS}


def _colormap(name: str):
    import matplotlib

    return matplotlib.colormaps[name]


def _base_gray(original: str | Path | np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if isinstance(original, (str, Path)):
        h, w = shape
        rgb = read_rgb(original)
        img = Image.fromarray(rgb).convert("L").resize((w, h), Image.BILINEAR)
        gray = np.asarray(img, dtype=np.float64) / 255.0
    else:
        arr = np.asarray(original, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr.mean(axis=-1)
        if arr.shape != tuple(shape):
            raise ValueError(f"heatmap shape {tuple(shape)} does not match image shape {arr.shape}")
        gray = arr / 255.0 if arr.max() > 1.0 else arr
    return np.repeat(gray[..., None], 3, axis=-1)


def overlay(heatmap: Heatmap | np.ndarray, original_image: str | Path | np.ndarray, opacity: float = 0.4,
            out_path: str | Path | None = None, colormap: str = DEFAULT_COLORMAP) -> np.ndarray:
    """Alpha-blend the colormapped heatmap onto the grayscale radiograph; returns (H, W, 3) uint8."""
    if not 0.0 <= opacity <= 1.0:
        raise ValueError(f"opacity must be in [0, 1], got {opacity}")
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    base = _base_gray(original_image, values.shape)
    colored = _colormap(colormap)(np.clip(values, 0.0, 1.0))[..., :3]
    blend = (1.0 - opacity) * base + opacity * colored
    out = np.clip(np.round(blend * 255.0), 0, 255).astype(np.uint8)
    if out_path is not None:
        Image.fromarray(out).save(out_path)
    return out


def sweep_panel(heatmaps: dict[str, Heatmap], original_image: str | Path | np.ndarray,
                out_path: str | Path | None = None, opacity: float = 0.4, title: str = "") -> np.ndarray:
    """Side-by-side early | middle | final overlays rendered to an RGB array (and PNG)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(heatmaps), figsize=(4 * len(heatmaps), 4.3))
    for ax, (depth, hm) in zip(np.atleast_1d(axes), heatmaps.items()):
        ax.imshow(overlay(hm, original_image, opacity))
        ax.set_title(f"{depth}: {hm.source_layer} {hm.raw_shape[0]}x{hm.raw_shape[1]}", fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.canvas.draw()
    panel = np.asarray(fig.canvas.buffer_rgba())[..., :3].copy()
    if out_path is not None:
        fig.savefig(out_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return panel
