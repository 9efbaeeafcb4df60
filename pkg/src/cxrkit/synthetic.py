"""Synthetic radiograph-like fixtures and a synthetic source corpus for backbone pretraining.

Desk-scale stand-ins: ``make_fixture`` writes an NIH-shaped dataset (PNG images,
``Data_Entry.csv``, split lists, vocabulary file) whose findings are simple
localized patterns; ``pretrain_backbone`` fits a backbone on a generic corpus
of geometric primitives and stores it in a :class:`~cxrkit.models.WeightStore`
for use when ImageNet weights cannot be fetched.
"""

from __future__ import annotations

import csv
import logging
import tempfile
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from cxrkit.dataset import DatasetSplit, LabelVocabulary, SampleRecord
from cxrkit.models import ModelSpec, WeightStore, build_model
from cxrkit.trainer import TrainConfig, train

log = logging.getLogger(__name__)

FIXTURE_CLASSES = ("Atelectasis", "Effusion", "Cardiomegaly")
SOURCE_PRIMITIVES = ("disk", "square", "ring", "cross", "hstripes", "vstripes", "dstripes", "triangle")


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y / (size - 1), x / (size - 1)


def _chest_background(rng: np.random.Generator, size: int) -> np.ndarray:
    y, x = _grid(size)
    img = 0.55 + 0.1 * (y - 0.5) + rng.normal(0, 0.02)
    for cx in (0.3, 0.7):
        cx += rng.normal(0, 0.02)
        lung = ((x - cx) / 0.17) ** 2 + ((y - 0.5) / 0.32) ** 2
        img -= 0.3 * np.clip(1.2 - lung, 0, 1) ** 0.5
    # small mediastinal shadow, the "normal heart"
    heart = ((x - 0.5) / 0.09) ** 2 + ((y - 0.62) / 0.12) ** 2
    img += 0.12 * (heart < 1)
    return img


def _atelectasis(rng, size, img):
    y, x = _grid(size)
    cx = rng.choice([0.3, 0.7]) + rng.uniform(-0.06, 0.06)
    cy = rng.uniform(0.3, 0.65)
    s = rng.uniform(0.05, 0.08)
    img += 0.45 * np.exp(-(((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s)))


def _effusion(rng, size, img):
    y, x = _grid(size)
    cx = rng.choice([0.3, 0.7])
    top = rng.uniform(0.68, 0.76)
    band = 1.0 / (1.0 + np.exp(-(y - top) / 0.015))
    img += 0.4 * band * (np.abs(x - cx) < 0.18)


def _cardiomegaly(rng, size, img):
    y, x = _grid(size)
    w, h = rng.uniform(0.17, 0.21), rng.uniform(0.17, 0.2)
    heart = ((x - 0.5) / w) ** 2 + ((y - 0.62) / h) ** 2
    img += 0.22 * (heart < 1)


def _ring(rng, size, img):
    y, x = _grid(size)
    cx, cy = rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75)
    r = np.hypot(x - cx, y - cy)
    img += 0.35 * (np.abs(r - 0.08) < 0.02)


def _stripes(rng, size, img):
    y, x = _grid(size)
    cx = rng.choice([0.3, 0.7])
    img += 0.2 * (np.sin(y * 40 + rng.uniform(0, 6)) > 0.3) * (np.abs(x - cx) < 0.12) * (np.abs(y - 0.45) < 0.2)


FINDING_PATTERNS: tuple[Callable, ...] = (_atelectasis, _effusion, _cardiomegaly, _ring, _stripes)


def render_radiograph(rng: np.random.Generator, size: int, present: Sequence[int]) -> np.ndarray:
    img = _chest_background(rng, size)
    for k in present:
        FINDING_PATTERNS[k](rng, size, img)
    img += rng.normal(0, 0.03, size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_fixture(out_dir: str | Path, n_images: int = 50, size: int = 64, seed: int = 0,
                 classes: Sequence[str] = FIXTURE_CLASSES, prevalence: float = 0.4,
                 test_fraction: float = 0.2) -> dict[str, Path]:
    """Write an NIH-shaped synthetic dataset; returns the paths of its parts."""
    if len(classes) > len(FINDING_PATTERNS):
        raise ValueError(f"at most {len(FINDING_PATTERNS)} synthetic finding classes are available")
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_images):
        present = [k for k in range(len(classes)) if rng.random() < prevalence]
        image_id = f"{i:08d}_000.png"
        Image.fromarray(render_radiograph(rng, size, present), mode="L").save(img_dir / image_id)
        labels = "|".join(classes[k] for k in present) or "No Finding"
        rows.append((image_id, labels, i))

    manifest = out / "Data_Entry.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["Image Index", "Finding Labels", "Patient ID"])
        w.writerows(rows)
    order = rng.permutation(n_images)
    n_test = int(round(test_fraction * n_images))
    test_ids = sorted(rows[i][0] for i in order[:n_test])
    train_ids = sorted(rows[i][0] for i in order[n_test:])
    (out / "train_val_list.txt").write_text("\n".join(train_ids) + "\n", encoding="utf-8")
    (out / "test_list.txt").write_text("\n".join(test_ids) + ("\n" if test_ids else ""), encoding="utf-8")
    vocab = out / "classes.txt"
    vocab.write_text("\n".join(classes) + "\n", encoding="utf-8")
    return {"root": out, "images": img_dir, "manifest": manifest, "train_list": out / "train_val_list.txt",
            "test_list": out / "test_list.txt", "vocabulary": vocab}


def _primitive(rng: np.random.Generator, size: int, kind: str, img: np.ndarray) -> None:
    y, x = _grid(size)
    cx, cy = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)
    r = rng.uniform(0.08, 0.16)
    amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.5)
    dx, dy = x - cx, y - cy
    inside = (np.abs(dx) < r) & (np.abs(dy) < r)
    freq = rng.uniform(25, 45)
    if kind == "disk":
        mask = np.hypot(dx, dy) < r
    elif kind == "square":
        mask = inside
    elif kind == "ring":
        mask = np.abs(np.hypot(dx, dy) - r) < 0.025
    elif kind == "cross":
        mask = inside & ((np.abs(dx) < 0.025) | (np.abs(dy) < 0.025))
    elif kind == "hstripes":
        mask = inside & (np.sin(y * freq) > 0)
    elif kind == "vstripes":
        mask = inside & (np.sin(x * freq) > 0)
    elif kind == "dstripes":
        mask = inside & (np.sin((x + y) * freq) > 0)
    elif kind == "triangle":
        mask = inside & (dy > -r) & (np.abs(dx) < (dy + r) / 2)
    else:
        raise ValueError(kind)
    img += amp * mask


def render_source_image(rng: np.random.Generator, size: int, present: Sequence[int]) -> np.ndarray:
    y, x = _grid(size)
    img = rng.uniform(0.3, 0.7) + rng.uniform(-0.2, 0.2) * x + rng.uniform(-0.2, 0.2) * y
    for k in present:
        _primitive(rng, size, SOURCE_PRIMITIVES[k], img)
    img += rng.normal(0, rng.uniform(0.01, 0.05), size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_source_split(out_dir: str | Path, n_images: int, size: int, seed: int) -> DatasetSplit:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = LabelVocabulary(SOURCE_PRIMITIVES)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_images):
        present = [k for k in range(len(SOURCE_PRIMITIVES)) if rng.random() < 0.3]
        path = out / f"src_{i:06d}.png"
        Image.fromarray(render_source_image(rng, size, present), mode="L").save(path)
        rec = SampleRecord(path.name, path, frozenset(SOURCE_PRIMITIVES[k] for k in present))
        records.append(rec.with_target(vocab))
    return DatasetSplit("source", tuple(records), vocab)


def pretrain_backbone(arch: str, store: WeightStore, *, n_images: int = 1200, input_size: int = 64,
                      epochs: int = 4, base_lr: float = 1e-3, batch_size: int = 32, seed: int = 0,
                      work_dir: str | Path | None = None) -> Path:
    """Fit a full backbone on the synthetic primitive corpus and save it to ``store``."""
    with tempfile.TemporaryDirectory(dir=work_dir) as tmp:
        split = make_source_split(tmp, n_images, input_size, seed)
        model = build_model(ModelSpec(arch, len(SOURCE_PRIMITIVES), pretrained=False, freeze_policy="none",
                                      input_size=input_size, seed=seed), split.vocabulary.classes)
        cfg = TrainConfig(epochs=epochs, batch_train=batch_size, base_lr=base_lr,
                          lr_step_epochs=max(1, epochs - 1), seed=seed)
        history = train(model, split, cfg)
    info = {"arch": arch, "source": "synthetic-primitives", "n_images": n_images, "input_size": input_size,
            "epochs": epochs, "seed": seed, "losses": history.losses}
    log.info("pretrained %s on synthetic primitives: losses %s", arch, history.losses)
    return store.save(arch, model.net.state_dict(), info)
