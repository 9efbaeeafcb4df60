"""Image loading, per-architecture standardization and augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CROP_SCALE = (0.8, 1.0)
CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)
FLIP_PROB = 0.5


class ImageLoadError(OSError):
    def __init__(self, path: Path, reason: str):
        self.path = Path(path)
        super().__init__(f"cannot load image {self.path}: {reason}")


@dataclass(frozen=True)
class ArchProfile:
    """Per-architecture constants shared by preprocessing, model_zoo and Grad-CAM."""

    name: str
    input_size: int
    freeze_boundary: str
    cam_layers: dict[str, str] = field(hash=False)
    norm_mean: tuple[float, float, float] = IMAGENET_MEAN
    norm_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self) -> None:
        if self.input_size <= 0:
            raise ValueError(f"input_size must be positive, got {self.input_size}")
        if len(self.norm_mean) != 3 or len(self.norm_std) != 3:
            raise ValueError("normalization statistics must be 3-vectors")
        if any(s <= 0 for s in self.norm_std):
            raise ValueError(f"norm_std components must be > 0, got {self.norm_std}")
        missing = {"early", "middle", "final"} - set(self.cam_layers)
        if missing:
            raise ValueError(f"cam_layers missing depths: {sorted(missing)}")

    def with_input_size(self, size: int) -> "ArchProfile":
        return replace(self, input_size=int(size))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_size": self.input_size,
            "freeze_boundary": self.freeze_boundary,
            "cam_layers": dict(self.cam_layers),
            "norm_mean": list(self.norm_mean),
            "norm_std": list(self.norm_std),
        }


PROFILES: dict[str, ArchProfile] = {
    "alexnet": ArchProfile(
        "alexnet", 224, freeze_boundary="classifier",
        cam_layers={"early": "features.1", "middle": "features.7", "final": "features.11"},
    ),
    "resnet152": ArchProfile(
        "resnet152", 224, freeze_boundary="layer4",
        cam_layers={"early": "layer1.0", "middle": "layer2.7", "final": "layer4.2"},
    ),
    "inception_v3": ArchProfile(
        "inception_v3", 299, freeze_boundary="Mixed_7c",
        cam_layers={"early": "Conv2d_1a_3x3", "middle": "Mixed_6a", "final": "Mixed_7c"},
    ),
}


def get_profile(name: str) -> ArchProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; valid: {sorted(PROFILES)}") from None


def standardize(pixels: np.ndarray, mean, std) -> np.ndarray:
    """(H, W, 3) uint8-range array -> (3, H, W) float32 normalized array."""
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    x = (x - np.asarray(mean)) / np.asarray(std)
    return np.ascontiguousarray(x.transpose(2, 0, 1)).astype(np.float32)


def destandardize(data: np.ndarray, mean, std) -> np.ndarray:
    """Inverse of :func:`standardize`, returning (H, W, 3) in pixel units."""
    x = np.asarray(data, dtype=np.float64).transpose(1, 2, 0)
    return (x * np.asarray(std) + np.asarray(mean)) * 255.0


def read_rgb(path: str | Path, size: int | None = None) -> np.ndarray:
    """Decode to (H, W, 3) uint8, replicating grayscale; optional bilinear resize to size x size."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float64)
                peak = arr.max() or 1.0
                img = Image.fromarray((arr / peak * 255.0).round().astype(np.uint8), mode="L")
            img = img.convert("RGB")
            if size is not None:
                img = img.resize((size, size), Image.BILINEAR)
            return np.asarray(img, dtype=np.uint8)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(path, str(exc)) from exc


def load_and_standardize(path: str | Path, profile: ArchProfile) -> torch.Tensor:
    pixels = read_rgb(path, profile.input_size)
    return torch.from_numpy(standardize(pixels, profile.norm_mean, profile.norm_std))


def hflip(image: torch.Tensor) -> torch.Tensor:
    return torch.flip(image, dims=(-1,))


def _crop_box(rng: np.random.Generator, height: int, width: int) -> tuple[int, int, int, int]:
    area = height * width
    log_ratio = (math.log(CROP_RATIO[0]), math.log(CROP_RATIO[1]))
    for _ in range(10):
        target = area * rng.uniform(*CROP_SCALE)
        ratio = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fall back to a centred square of the minimum scale
    side = int(round(math.sqrt(area * CROP_SCALE[0])))
    side = min(side, height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def random_resized_crop(image: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    _, height, width = image.shape
    top, left, h, w = _crop_box(rng, height, width)
    patch = image[:, top:top + h, left:left + w].unsqueeze(0)
    out = F.interpolate(patch, size=(height, width), mode="bilinear", align_corners=False)
    return out.squeeze(0)


def augment(image: torch.Tensor, rng_seed: int, policy: str = "train") -> torch.Tensor:
    """Training augmentation: mild random resized crop then a coin-flip mirror.

    ``policy="eval"`` returns the image untouched.
    """
    if policy == "eval":
        return image
    if policy != "train":
        raise ValueError(f"policy must be 'train' or 'eval', got {policy!r}")
    rng = np.random.default_rng(rng_seed)
    out = random_resized_crop(image, rng)
    if rng.random() < FLIP_PROB:
        out = hflip(out)
    return out.contiguous()
