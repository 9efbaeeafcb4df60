"""Fine-tuning loop: Adam over trainable groups, step LR decay, per-epoch checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from cxrkit.dataset import DatasetSplit
from cxrkit.loader import SplitDataset, batch_order, make_loader
from cxrkit.losses import LossConfig, bce_with_logits, make_criterion
from cxrkit.models import (
    CheckpointMismatchError,
    ClassifierModel,
    load_checkpoint,
    read_checkpoint_meta,
    save_checkpoint,
    trainable_parameters,
)

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, epoch: int, image_ids: list[str], value: float | None = None):
        self.step = step
        self.epoch = epoch
        self.image_ids = image_ids
        self.value = value
        super().__init__(
            f"non-finite loss at step {step} (epoch {epoch + 1}); batch image ids: {', '.join(image_ids)}"
        )

    def to_dict(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "image_ids": self.image_ids,
                "value": None if self.value is None else repr(self.value)}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_train: int = 64
    batch_eval: int = 32
    base_lr: float = 1e-4
    lr_step_epochs: int = 5
    lr_factor: float = 0.1
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    device: str = "cpu"
    augment: bool = True
    num_workers: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 < self.lr_factor < 1.0):
            raise ValueError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.batch_train < 1 or self.batch_eval < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lr_step_epochs < 1:
            raise ValueError(f"lr_step_epochs must be >= 1, got {self.lr_step_epochs}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.optimizer != "adam":
            raise ValueError(f"only the 'adam' optimizer is supported, got {self.optimizer!r}")
        object.__setattr__(self, "betas", tuple(self.betas))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    lr = cfg.base_lr * cfg.lr_factor ** (epoch // cfg.lr_step_epochs)
    # drop float residue so 1e-4 * 0.1**2 logs as 1e-06, not 1.0000000000000002e-06
    return float(f"{lr:.12g}")


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    model: ClassifierModel | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r["mean_train_loss"] for r in self.records]

    @property
    def lrs(self) -> list[float]:
        return [r["lr"] for r in self.records]

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text("".join(json.dumps(r) + "\n" for r in self.records), encoding="utf-8")
        return path

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "TrainHistory":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([json.loads(ln) for ln in lines if ln.strip()])


def build_optimizer(model: ClassifierModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    groups = trainable_parameters(model)
    if not groups:
        raise ValueError("model has no trainable parameters")
    kwargs = dict(lr=lr_at(0, cfg), betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    try:
        # the fused kernel is ~10x faster than the per-tensor loop on CPU
        return torch.optim.Adam(groups, fused=True, **kwargs)
    except (RuntimeError, TypeError):
        return torch.optim.Adam(groups, **kwargs)


def _epoch_torch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, 7919]).generate_state(1)[0])


def train(model: ClassifierModel, train_split: DatasetSplit, cfg: TrainConfig,
          out_dir: str | Path | None = None) -> TrainHistory:
    """Run ``cfg.epochs`` epochs of fine-tuning.

    With ``out_dir`` set, writes ``checkpoints/epoch_NNN``, ``checkpoints/final``,
    ``history.jsonl`` and ``loss_curve.png`` there.
    """
    return _fit(model, train_split, cfg, out_dir, start_epoch=0, history=TrainHistory(), optimizer_state=None)


def resume(checkpoint_path: str | Path, train_split: DatasetSplit, cfg: TrainConfig,
           out_dir: str | Path | None = None, arch: str | None = None) -> TrainHistory:
    """Continue training from a per-epoch checkpoint; the resumed model is ``history.model``."""
    checkpoint_path = Path(checkpoint_path)
    meta = read_checkpoint_meta(checkpoint_path)
    vocab = list(train_split.vocabulary.classes)
    if arch is not None and meta["arch"] != arch:
        raise CheckpointMismatchError("arch", arch, meta["arch"])
    if meta["num_classes"] != len(vocab):
        raise CheckpointMismatchError("num_classes", len(vocab), meta["num_classes"])
    if meta.get("vocabulary") != vocab:
        raise CheckpointMismatchError("vocabulary", vocab, meta.get("vocabulary"))
    state_path = checkpoint_path / "trainer_state.pt"
    if not state_path.is_file():
        raise FileNotFoundError(f"{checkpoint_path} has no trainer_state.pt; cannot resume")
    model, meta = load_checkpoint(checkpoint_path)
    state = torch.load(state_path, map_location="cpu", weights_only=False)
    history = TrainHistory(list(state["history"]), [])
    return _fit(model, train_split, cfg, out_dir, start_epoch=int(meta["epoch"]), history=history,
                optimizer_state=state["optimizer"])


def _fit(model, split, cfg, out_dir, *, start_epoch, history, optimizer_state) -> TrainHistory:
    if len(split) == 0:
        raise ValueError("cannot train on an empty split")
    if model.vocabulary is not None and tuple(model.vocabulary) != split.vocabulary.classes:
        raise CheckpointMismatchError("vocabulary", list(split.vocabulary.classes), list(model.vocabulary))
    device = torch.device(cfg.device)
    model.to(device)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    optimizer = build_optimizer(model, cfg)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    criterion = make_criterion(cfg.loss)
    dataset = SplitDataset(split, model.profile, "train" if cfg.augment else "eval", cfg.seed)
    ids = split.image_ids
    steps_per_epoch = math.ceil(len(split) / cfg.batch_train)
    cfg_hash = cfg.config_hash()

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        torch.manual_seed(_epoch_torch_seed(cfg.seed, epoch))
        dataset.epoch = epoch
        model.train()
        total, count = 0.0, 0
        batches = batch_order(len(split), cfg.batch_train, cfg.seed, epoch)
        for i, (x, y, idx) in enumerate(make_loader(dataset, batches, cfg.num_workers)):
            step = epoch * steps_per_epoch + i
            x, y = x.to(device), y.to(device)
            logits = model(x)
            batch_ids = [ids[j] for j in idx.tolist()]
            if not torch.isfinite(logits).all():
                raise NonFiniteLossError(step, epoch, batch_ids)
            loss = criterion(logits, y)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(step, epoch, batch_ids, float(loss.detach()))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)

        record = {"epoch": epoch + 1, "mean_train_loss": total / count, "lr": lr,
                  "wall_time": round(time.perf_counter() - t0, 3)}
        history.records.append(record)
        log.info("epoch %d/%d  loss %.5f  lr %.1e", epoch + 1, cfg.epochs, record["mean_train_loss"], lr)
        if out_dir is not None:
            ckpt = save_checkpoint(
                model, out_dir / "checkpoints" / f"epoch_{epoch + 1:03d}", epoch=epoch + 1,
                config_hash=cfg_hash, extra={"train_config": cfg.to_dict()},
                trainer_state={"optimizer": optimizer.state_dict(), "history": list(history.records)},
            )
            history.checkpoints.append(ckpt)
            history.write_jsonl(out_dir / "history.jsonl")

    if out_dir is not None:
        final = save_checkpoint(model, out_dir / "checkpoints" / "final", epoch=len(history.records),
                                config_hash=cfg_hash, extra={"train_config": cfg.to_dict()})
        history.checkpoints.append(final)
        history.write_jsonl(out_dir / "history.jsonl")
        plot_history(history, out_dir / "loss_curve.png", title=model.spec.arch)
    history.model = model
    return history


def fit_batch(model: ClassifierModel, inputs: torch.Tensor, targets: torch.Tensor, steps: int,
              cfg: TrainConfig | None = None) -> list[float]:
    """Repeatedly optimize on one fixed batch at ``lr_at(0)``; returns per-step training losses."""
    cfg = cfg or TrainConfig()
    torch.manual_seed(cfg.seed)
    optimizer = build_optimizer(model, cfg)
    criterion = make_criterion(cfg.loss)
    model.train()
    losses = []
    for step in range(steps):
        loss = criterion(model(inputs), targets)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(step, 0, [], float(loss.detach()))
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return losses


@torch.no_grad()
def batch_bce(model: ClassifierModel, inputs: torch.Tensor, targets: torch.Tensor) -> float:
    was = model.training
    model.eval()
    try:
        return float(bce_with_logits(model(inputs), targets))
    finally:
        model.train(was)


def plot_history(history: TrainHistory, path: str | Path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in history.records]
    ax.plot(epochs, history.losses, marker="o")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Mean training loss")
    ax.set_title(f"Training loss {title}".strip())
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
