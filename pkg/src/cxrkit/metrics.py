"""Evaluation suite: BCE, focal loss, macro F1 and macro AUC, with table/JSON reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from cxrkit.dataset import DatasetSplit
from cxrkit.loader import predict_logits
from cxrkit.losses import LossConfig, bce_with_logits, focal_loss
from cxrkit.trainer import TrainConfig


class DegenerateMetricError(ValueError):
    """Every class lacks either positives or negatives, so macro AUC is undefined."""


def _as_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b.astype(bool)


def f1_macro(probabilities, targets, threshold: float = 0.5) -> tuple[float, list[dict]]:
    """Per-class F1 = 2TP / (2TP + FP + FN) (0 when undefined) and its unweighted mean."""
    probs, y = _as_pair(probabilities, targets)
    pred = probs >= threshold
    tp = (pred & y).sum(axis=0)
    fp = (pred & ~y).sum(axis=0)
    fn = (~pred & y).sum(axis=0)
    per_class = []
    for c in range(y.shape[1]):
        denom = 2 * tp[c] + fp[c] + fn[c]
        per_class.append({
            "f1": float(2 * tp[c] / denom) if denom else 0.0,
            "zero_division": bool(denom == 0),
            "tp": int(tp[c]), "fp": int(fp[c]), "fn": int(fn[c]),
        })
    macro = float(np.mean([p["f1"] for p in per_class]))
    return macro, per_class


def auc_macro(scores, targets) -> tuple[float, list[dict]]:
    """Mann-Whitney AUC per class via average ranks (ties count one half).

    Classes without both positives and negatives get ``auc=None`` and are left
    out of the macro mean.
    """
    s, y = _as_pair(scores, targets)
    per_class = []
    for c in range(y.shape[1]):
        pos = int(y[:, c].sum())
        neg = int(y.shape[0] - pos)
        if pos == 0 or neg == 0:
            per_class.append({"auc": None, "degenerate": True, "support_pos": pos, "support_neg": neg})
            continue
        ranks = rankdata(s[:, c], method="average")
        u = ranks[y[:, c]].sum() - pos * (pos + 1) / 2.0
        per_class.append({"auc": float(u / (pos * neg)), "degenerate": False,
                          "support_pos": pos, "support_neg": neg})
    defined = [p["auc"] for p in per_class if p["auc"] is not None]
    if not defined:
        raise DegenerateMetricError("macro AUC undefined: no class has both positive and negative samples")
    return float(np.mean(defined)), per_class


@dataclass
class EvalReport:
    model_name: str
    bce_loss: float
    focal_loss: float
    f1: float
    auc: float
    per_class: list[dict] = field(default_factory=list)
    threshold: float = 0.5
    n_samples: int = 0
    averaging: str = "macro"

    def to_dict(self) -> dict:
        return asdict(self)

    def save_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(**data)


def report_from_logits(model_name: str, logits, targets, class_names: Sequence[str],
                       threshold: float = 0.5, loss_cfg: LossConfig | None = None) -> EvalReport:
    loss_cfg = loss_cfg or LossConfig()
    z = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    y = torch.as_tensor(np.asarray(targets, dtype=np.float64))
    bce = float(bce_with_logits(z, y, "mean"))
    foc = float(focal_loss(z, y, loss_cfg.focal("mean")))
    probs = torch.sigmoid(z).numpy()
    f1, f1_per = f1_macro(probs, y.numpy(), threshold)
    auc, auc_per = auc_macro(probs, y.numpy())
    per_class = []
    for name, f, a in zip(class_names, f1_per, auc_per):
        per_class.append({
            "class": name, "f1": f["f1"], "f1_zero_division": f["zero_division"],
            "auc": a["auc"], "auc_degenerate": a["degenerate"],
            "support_pos": a["support_pos"], "support_neg": a["support_neg"],
        })
    return EvalReport(model_name, bce, foc, f1, auc, per_class, threshold, int(z.shape[0]))


def evaluate(model, split: DatasetSplit, cfg=None, *, model_name: str | None = None,
             threshold: float = 0.5) -> EvalReport:
    """One no-grad, un-augmented pass over ``split``; all four headline metrics come from it.

    ``cfg`` is a TrainConfig (``batch_eval``, ``loss``, ``device``, ``num_workers`` are used).
    """
    cfg = cfg or TrainConfig()
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits, targets = predict_logits(model, split, model.profile, cfg.batch_eval, cfg.device, cfg.num_workers)
    name = model_name or model.spec.arch
    return report_from_logits(name, logits, targets, split.vocabulary.classes, threshold, cfg.loss)


TABLE_COLUMNS = ("Model", "BCE Loss", "F Loss", "F1-Score", "AUC")


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table: Model | BCE Loss | F Loss | F1-Score | AUC."""
    rows = [TABLE_COLUMNS] + [
        (r.model_name, f"{r.bce_loss:.4f}", f"{r.focal_loss:.4f}", f"{r.f1:.4f}", _fmt(r.auc))
        for r in reports
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_COLUMNS))]
    lines = []
    for k, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append(" | ".join(cells))
        if k == 0:
            lines.append("-+-".join("-" * w for w in widths))
    if reports:
        t = reports[0].threshold
        lines.append(f"(F1: {reports[0].averaging} average at threshold {t:g}; AUC: macro over non-degenerate classes)")
    return "\n".join(lines) + "\n"


def _fmt(x: float | None) -> str:
    return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"
