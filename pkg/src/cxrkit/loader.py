"""Torch data plumbing over a DatasetSplit."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from cxrkit.dataset import DatasetSplit
from cxrkit.preprocess import ArchProfile, ImageLoadError, augment, load_and_standardize


def sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


class SplitDataset(Dataset):
    """Yields ``(image, target, index)``; augmentation seeds derive from (seed, epoch, index)."""

    def __init__(self, split: DatasetSplit, profile: ArchProfile, policy: str = "eval", seed: int = 0):
        self.split = split
        self.profile = profile
        self.policy = policy
        self.seed = seed
        self.epoch = 0
        self._targets = torch.from_numpy(split.targets())

    def __len__(self) -> int:
        return len(self.split)

    def __getitem__(self, index: int):
        rec = self.split.records[index]
        try:
            image = load_and_standardize(rec.path, self.profile)
        except ImageLoadError as exc:
            raise ImageLoadError(rec.path, f"sample {rec.image_id}: {exc}") from exc
        if self.policy == "train":
            image = augment(image, sample_seed(self.seed, self.epoch, index), "train")
        return image, self._targets[index], index


def batch_order(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> list[list[int]]:
    idx = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    return [idx[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


def make_loader(dataset: SplitDataset, batches: Sequence[Sequence[int]], num_workers: int = 0) -> DataLoader:
    # explicit batch list: delivery order is fixed regardless of worker count
    return DataLoader(dataset, batch_sampler=list(batches), num_workers=num_workers)


@torch.no_grad()
def predict_logits(model: torch.nn.Module, split: DatasetSplit, profile: ArchProfile,
                   batch_size: int = 32, device: str = "cpu", num_workers: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Single eval-mode pass; returns ``(logits, targets)`` as float64 arrays in split order."""
    was_training = model.training
    model.eval()
    ds = SplitDataset(split, profile, "eval")
    logits, targets = [], []
    try:
        for x, y, _ in make_loader(ds, batch_order(len(ds), batch_size, 0, 0, shuffle=False), num_workers):
            logits.append(model(x.to(device)).double().cpu())
            targets.append(y.double())
    finally:
        model.train(was_training)
    if not logits:
        raise ValueError(f"split {split.name!r} is empty")
    return torch.cat(logits).numpy(), torch.cat(targets).numpy()
