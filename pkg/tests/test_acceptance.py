"""Acceptance criteria, one test each; every test records a PASS/FAIL line shown in the pytest summary.

The slow ones (overfit, transfer direction, end-to-end CLI) are marked ``slow``;
``pytest -m "not slow"`` skips them.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from cxrkit.cli import main
from cxrkit.dataset import (
    NO_FINDING,
    DatasetSplit,
    LabelVocabulary,
    build_splits,
    decode_one_hot,
    encode_one_hot,
    parse_label_manifest,
)
from cxrkit.gradcam import compute_cam
from cxrkit.losses import FocalLossConfig, bce_grad, bce_with_logits, focal_grad, focal_loss
from cxrkit.metrics import DegenerateMetricError, auc_macro, evaluate, f1_macro
from cxrkit.models import ModelSpec, WeightStore, build_model, trainable_parameters
from cxrkit.preprocess import IMAGENET_MEAN, IMAGENET_STD, standardize
from cxrkit.synthetic import make_fixture, pretrain_backbone, render_radiograph
from cxrkit.trainer import TrainConfig, batch_bce, fit_batch, train

from toy_cnn import IMAGE, ToyCNN, symbolic_cam

# desk-scale input sizes; the full 224/299 inputs are exercised in test_preprocess
SMALL = {"alexnet": 64, "resnet152": 64, "inception_v3": 80}
# at 64 px alexnet's conv stack collapses to 1x1 and its classifier sees 256 distinct features,
# too few for reliable memorization, so the overfit check runs it at its native resolution
OVERFIT = {**SMALL, "alexnet": 224}
TRANSFER_SIZE = 64


# ---- 1-2: losses ----------------------------------------------------------------

def test_c01_loss_identities(criterion):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(1)
    worst_identity, dominance_ok = 0.0, True
    for _ in range(1000):
        z = torch.randn(4, 14, generator=g, dtype=torch.float64) * 4
        y = torch.randint(0, 2, (4, 14), generator=g).double()
        bce = bce_with_logits(z, y, "none")
        fl = focal_loss(z, y, FocalLossConfig(alpha=1.0, gamma=0.0, reduction="none"))
        worst_identity = max(worst_identity, float((fl - bce).abs().max()))
        for gamma in (0.5, 1.0, 2.0):
            for alpha in (1.0, 0.25):
                fg = focal_loss(z, y, FocalLossConfig(alpha=alpha, gamma=gamma, reduction="none"))
                dominance_ok &= bool((fg <= bce).all())
    elapsed = time.perf_counter() - t0
    ok = worst_identity <= 1e-7 and dominance_ok and elapsed < 5.0
    criterion(1, ok, f"max |focal(a=1,g=0) - bce| = {worst_identity:.1e} (<= 1e-7), "
                     f"focal <= bce for g in {{0.5,1,2}}: {dominance_ok}, {elapsed:.2f}s (< 5s)")
    assert ok


def _relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    # floor the denominator so vanishing gradients in saturated regions compare on an absolute scale
    return float(((a - b).abs() / torch.maximum(torch.maximum(a.abs(), b.abs()), torch.tensor(1e-6))).max())


def test_c02_gradient_checks(criterion):
    g = torch.Generator().manual_seed(2)
    h = 1e-4
    worst = {"bce": 0.0, "focal": 0.0}
    for _ in range(100):
        z = torch.randn(4, 14, generator=g, dtype=torch.float64) * 3
        y = torch.randint(0, 2, (4, 14), generator=g).double()
        cfg = FocalLossConfig(alpha=float(torch.rand(1, generator=g)), gamma=float(3 * torch.rand(1, generator=g)),
                              reduction="none")
        pairs = {
            "bce": (lambda v: bce_with_logits(v, y, "none"), bce_grad(z, y)),
            "focal": (lambda v: focal_loss(v, y, cfg), focal_grad(z, y, cfg)),
        }
        for name, (fn, analytic) in pairs.items():
            # each element's loss depends only on its own logit, so one vector step is a full central difference
            numeric = (fn(z + h) - fn(z - h)) / (2 * h)
            worst[name] = max(worst[name], _relative_error(analytic, numeric))
    ok = max(worst.values()) < 1e-4
    criterion(2, ok, f"max relative error vs central differences (h=1e-4): bce {worst['bce']:.1e}, "
                     f"focal {worst['focal']:.1e} (< 1e-4)")
    assert ok


# ---- 3: metrics -----------------------------------------------------------------

def _brute_auc(scores, targets):
    pos = [s for s, t in zip(scores, targets) if t]
    neg = [s for s, t in zip(scores, targets) if not t]
    if not pos or not neg:
        return None
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def _brute_f1(probs, targets, threshold):
    tp = sum(1 for p, t in zip(probs, targets) if p >= threshold and t)
    fp = sum(1 for p, t in zip(probs, targets) if p >= threshold and not t)
    fn = sum(1 for p, t in zip(probs, targets) if p < threshold and t)
    return 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def test_c03_metric_oracles(criterion):
    rng = np.random.default_rng(3)
    mismatches, kinds, monotone_ok = 0, set(), True
    for i in range(500):
        n, c = int(rng.integers(1, 21)), int(rng.integers(1, 5))
        kind = ["uniform", "all_ties", "heavy_ties", "degenerate"][i % 4]
        kinds.add(kind)
        scores = {"all_ties": np.full((n, c), 0.5), "heavy_ties": rng.integers(0, 3, (n, c)) / 2.0}.get(
            kind, rng.uniform(size=(n, c)))
        targets = rng.integers(0, 2, (n, c))
        if kind == "degenerate":
            targets[:, 0] = int(rng.integers(0, 2))
        _, per_f1 = f1_macro(scores, targets, 0.5)
        mismatches += [p["f1"] for p in per_f1] != [_brute_f1(scores[:, k], targets[:, k], 0.5) for k in range(c)]
        expected = [_brute_auc(scores[:, k], targets[:, k]) for k in range(c)]
        if all(e is None for e in expected):
            try:
                auc_macro(scores, targets)
                mismatches += 1
            except DegenerateMetricError:
                pass
            continue
        macro, per = auc_macro(scores, targets)
        mismatches += [p["auc"] for p in per] != expected
        mismatches += macro != float(np.mean([e for e in expected if e is not None]))
        for transform in (np.exp, lambda s: 5 * s ** 3 - 2):
            monotone_ok &= auc_macro(transform(scores), targets)[0] == macro
    ok = mismatches == 0 and monotone_ok
    criterion(3, ok, f"500 instances ({', '.join(sorted(kinds))}): {mismatches} mismatches vs brute force, "
                     f"monotone invariance: {monotone_ok}")
    assert ok


# ---- 4: encoding ----------------------------------------------------------------

def test_c04_encoding_round_trip(criterion):
    t0 = time.perf_counter()
    vocab = LabelVocabulary.default()
    rng = np.random.default_rng(4)
    masks = rng.integers(0, 2, (10_000, len(vocab))).astype(bool)
    failures = 0
    for mask in masks:
        labels = frozenset(c for c, m in zip(vocab.classes, mask) if m)
        vec = encode_one_hot(labels, vocab)
        failures += not (np.array_equal(vec, mask.astype(vec.dtype)) and decode_one_hot(vec, vocab) == labels)
    no_finding = encode_one_hot([NO_FINDING], vocab)
    zero_ok = no_finding.shape == (14,) and not no_finding.any() and decode_one_hot(no_finding, vocab) == frozenset()
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and zero_ok and elapsed < 10.0
    criterion(4, ok, f"10000 random subsets: {failures} round-trip failures, 'No Finding' -> zeros: {zero_ok}, "
                     f"{elapsed:.2f}s (< 10s)")
    assert ok


# ---- 5-7: models and training ---------------------------------------------------

def _synthetic_batch(size: int, n: int = 8, seed: int = 0):
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, 2, (n, 3))
    ys[0], ys[1] = 0, 1  # every class has both outcomes
    xs = [standardize(np.repeat(render_radiograph(rng, size, list(np.flatnonzero(r)))[..., None], 3, -1),
                      IMAGENET_MEAN, IMAGENET_STD) for r in ys]
    return torch.from_numpy(np.stack(xs)), torch.tensor(ys, dtype=torch.float32)


def test_c05_freeze_correctness(criterion):
    details, ok = [], True
    for arch, size in SMALL.items():
        model = build_model(ModelSpec(arch, 3, pretrained=False, freeze_policy="up_to_boundary", input_size=size))
        frozen = {n: p.detach().clone() for n, p in model.net.named_parameters() if not p.requires_grad}
        trainable = {n: p.detach().clone() for n, p in model.net.named_parameters() if p.requires_grad}
        x, y = _synthetic_batch(size, seed=5)
        fit_batch(model, x, y, steps=10)
        params = dict(model.net.named_parameters())
        frozen_same = all(torch.equal(params[n], v) for n, v in frozen.items())
        changed = sum(not torch.equal(params[n], v) for n, v in trainable.items())
        groups = [g["name"] for g in trainable_parameters(model)]
        ok &= frozen_same and changed > 0 and len(frozen) > 0
        details.append(f"{arch} (trains {'+'.join(groups)}): {len(frozen)} frozen identical={frozen_same}, "
                       f"{changed}/{len(trainable)} unfrozen changed")
    criterion(5, ok, "; ".join(details))
    assert ok


def test_c06_schedule_exactness(criterion, fixture50):
    vocab = LabelVocabulary.from_file(fixture50["vocabulary"])
    records = parse_label_manifest(fixture50["manifest"], fixture50["images"])
    train_split, _ = build_splits(records, fixture50["train_list"], fixture50["test_list"], vocab)
    tiny = DatasetSplit("tiny", train_split.records[:2], vocab)
    model = build_model(ModelSpec("alexnet", 3, pretrained=False, input_size=64), vocab.classes)
    cfg = TrainConfig()  # defaults: 20 epochs, 1e-4, x0.1 every 5 epochs
    history = train(model, tiny, cfg)
    expected = [1e-4] * 5 + [1e-5] * 5 + [1e-6] * 5 + [1e-7] * 5
    ok = history.lrs == expected
    criterion(6, ok, f"logged lr over {len(history)} epochs: {sorted(set(history.lrs), reverse=True)} "
                     f"each x5, exact match: {ok}")
    assert ok


@pytest.mark.slow
def test_c07_overfit_smoke(criterion):
    t0 = time.perf_counter()
    details, ok = [], True
    for arch, size in OVERFIT.items():
        model = build_model(ModelSpec(arch, 3, pretrained=False, input_size=size))
        x, y = _synthetic_batch(size, seed=7)
        losses = fit_batch(model, x, y, steps=200)
        reached = next((i + 1 for i, v in enumerate(losses) if v < 0.05), None)
        ok &= reached is not None
        details.append(f"{arch}@{size}px first BCE<0.05 at step {reached}, final {losses[-1]:.4f} "
                       f"(eval-mode {batch_bce(model, x, y):.4f})")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 300
    criterion(7, ok, "; ".join(details) + f"; {elapsed:.0f}s (< 300s)")
    assert ok


# ---- 8: transfer direction --------------------------------------------------------

@pytest.fixture(scope="session")
def pretrained_store(tmp_path_factory):
    """resnet152 backbone pretrained on the synthetic primitive corpus, shared by criteria 8 and 10."""
    t0 = time.perf_counter()
    store = WeightStore(tmp_path_factory.mktemp("weights"), allow_download=False)
    pretrain_backbone("resnet152", store, n_images=800, input_size=TRANSFER_SIZE, epochs=3, seed=0)
    store.pretrain_seconds = time.perf_counter() - t0
    return store


@pytest.mark.slow
def test_c08_transfer_direction(criterion, pretrained_store, tmp_path):
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in range(5):
        fx = make_fixture(tmp_path / f"fx{seed}", n_images=200, size=TRANSFER_SIZE, seed=100 + seed)
        vocab = LabelVocabulary.from_file(fx["vocabulary"])
        records = parse_label_manifest(fx["manifest"], fx["images"])
        train_split, test_split = build_splits(records, fx["train_list"], fx["test_list"], vocab)
        cfg = TrainConfig(epochs=5, batch_train=16, seed=seed)
        auc = {}
        for pretrained in (True, False):
            spec = ModelSpec("resnet152", 3, pretrained=pretrained, input_size=TRANSFER_SIZE, seed=seed)
            model = build_model(spec, vocab.classes, pretrained_store)
            train(model, train_split, cfg)
            auc[pretrained] = evaluate(model, test_split, cfg).auc
        wins += auc[True] > auc[False]
        rows.append(f"{auc[True]:.3f} vs {auc[False]:.3f}")
    elapsed = time.perf_counter() - t0 + pretrained_store.pretrain_seconds
    ok = wins >= 4 and elapsed < 1800
    criterion(8, ok, f"pretrained beats random init in {wins}/5 seeds (>= 4) [AUC {'; '.join(rows)}], "
                     f"{elapsed / 60:.1f} min incl. pretraining (< 30)")
    assert ok


# ---- 9: Grad-CAM -----------------------------------------------------------------

def test_c09_gradcam_oracle(criterion):
    image = torch.tensor(IMAGE)
    worst, in_range = 0.0, True
    for layer, cls in itertools.product(("act1", "act2"), (0, 1)):
        hm = compute_cam(ToyCNN(), image, cls, layer)
        expected, _ = symbolic_cam(IMAGE, cls, layer)
        worst = max(worst, float(np.abs(hm.values - expected).max()))
        in_range &= bool(hm.values.min() >= 0.0 and hm.values.max() <= 1.0)
    base = compute_cam(ToyCNN(), image, 1, "act1").values
    scale_ok = True
    for c in (0.01, 3.0, 250.0):
        model = ToyCNN()
        with torch.no_grad():
            model.fc.weight[1] *= c
            model.fc.bias[1] *= c
        scale_ok &= bool(np.allclose(compute_cam(model, image, 1, "act1").values, base, atol=1e-9))
    dead = ToyCNN()
    with torch.no_grad():
        dead.fc.weight[0].zero_()
    zero = compute_cam(dead, image, 0, "act2")
    zero_ok = zero.zero_map and not zero.values.any()
    ok = worst <= 1e-6 and in_range and scale_ok and zero_ok
    criterion(9, ok, f"max |cam - symbolic| = {worst:.1e} (<= 1e-6), in [0,1]: {in_range}, "
                     f"scale invariant: {scale_ok}, zero-gradient flagged: {zero_ok}")
    assert ok


# ---- 10: end-to-end CLI ------------------------------------------------------------

@pytest.mark.slow
def test_c10_end_to_end_cli(criterion, pretrained_store, fixture50, tmp_path, capsys):
    t0 = time.perf_counter()
    prep, run, rep, exp = (tmp_path / d for d in ("prep", "run", "report", "explain"))
    codes = {}
    codes["prepare"] = main(["-q", "prepare", "--manifest", str(fixture50["manifest"]),
                             "--image-root", str(fixture50["images"]), "--train-list", str(fixture50["train_list"]),
                             "--test-list", str(fixture50["test_list"]), "--vocab", str(fixture50["vocabulary"]),
                             "--fraction", "0.1", "--seed", "7", "--out-dir", str(prep)])
    codes["train"] = main(["-q", "train", "--arch", "resnet152", "--data", str(prep / "train_mini.json"),
                           "--epochs", "2", "--batch-train", "8", "--input-size", str(TRANSFER_SIZE),
                           "--weights-dir", str(pretrained_store.root), "--out-dir", str(run)])
    ckpt = run / "checkpoints" / "final"
    codes["evaluate"] = main(["-q", "evaluate", "--checkpoint", str(ckpt), "--data", str(prep / "test.json"),
                              "--no-pretrained-baseline", "--out-dir", str(rep)])
    image = fixture50["images"] / (DatasetSplit.load(prep / "test.json").image_ids[0])
    codes["explain"] = main(["-q", "explain", "--checkpoint", str(ckpt), "--class", "Atelectasis", "--sweep",
                             "--out-dir", str(exp), str(image)])
    capsys.readouterr()
    elapsed = time.perf_counter() - t0

    table = (rep / "report.txt").read_text() if (rep / "report.txt").exists() else ""
    header = [h.strip() for h in table.splitlines()[0].split("|")] if table else []
    table_ok = header == ["Model", "BCE Loss", "F Loss", "F1-Score", "AUC"] and len(table.splitlines()) >= 4
    panel = exp / f"panel_{image.stem}_Atelectasis.png"
    sidecars = [json.loads((exp / f"{image.stem}_Atelectasis_{d}.json").read_text())
                for d in ("early", "middle", "final") if (exp / f"{image.stem}_Atelectasis_{d}.json").exists()]
    panel_ok = panel.is_file() and len(sidecars) == 3
    mini = DatasetSplit.load(prep / "train_mini.json")
    ok = all(c == 0 for c in codes.values()) and table_ok and panel_ok and elapsed < 600
    criterion(10, ok, f"exit codes {codes}, train_mini n={len(mini)}, table columns ok: {table_ok}, "
                      f"3-depth panel ({', '.join(s['source_layer'] for s in sidecars)}): {panel_ok}, "
                      f"{elapsed:.0f}s (< 600s)")
    assert ok
    assert not math.isnan(json.loads((rep / "report.json").read_text())["reports"][-1]["bce_loss"])
