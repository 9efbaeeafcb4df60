"""Command-line entry point: prepare, train, evaluate, explain.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from cxrkit import config as runconfig
from cxrkit.dataset import (
    DatasetSplit,
    LabelVocabulary,
    SchemaError,
    SplitOverlapError,
    UnknownLabelError,
    build_splits,
    class_frequencies,
    make_subset,
    parse_label_manifest,
)
from cxrkit.models import (
    CheckpointMismatchError,
    LayerNotFoundError,
    ModelSpec,
    RegistryError,
    WeightLoadError,
    WeightStore,
    build_model,
    load_checkpoint,
    state_checksum,
)
from cxrkit.preprocess import PROFILES, ImageLoadError

log = logging.getLogger("cxrkit")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
ARCHS = tuple(sorted(PROFILES))
USAGE_ERRORS = (SchemaError, UnknownLabelError, SplitOverlapError, CheckpointMismatchError, RegistryError,
                LayerNotFoundError, WeightLoadError, ImageLoadError, FileNotFoundError, KeyError, ValueError)


class UsageError(Exception):
    """Invalid flags or inputs detected before any work starts."""


def _require_file(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {what}")
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _frequency_table(splits: list[DatasetSplit]) -> str:
    vocab = splits[0].vocabulary.classes
    freqs = [class_frequencies(s) for s in splits]
    header = ["Class"] + [f"{s.name} (n={len(s)})" for s in splits]
    rows = [header] + [[c] + [str(f[c]) for f in freqs] for c in vocab]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(r[0].ljust(widths[0]) if i == 0 else r[i].rjust(widths[i]) for i in range(len(r))).rstrip()
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def _overrides(args: argparse.Namespace, mapping: dict[str, tuple[str, str]]) -> dict:
    out: dict[str, dict] = {}
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.setdefault(section, {})[key] = value
    return out


def _load_config(args: argparse.Namespace, mapping: dict[str, tuple[str, str]]) -> runconfig.RunConfig:
    if args.config is not None:
        _require_file(args.config, "config file")
    return runconfig.load(args.config, _overrides(args, mapping))


# -- prepare -------------------------------------------------------------------

PREPARE_FLAGS = {
    "manifest": ("paths", "manifest"), "image_root": ("paths", "image_root"),
    "train_list": ("paths", "train_list"), "test_list": ("paths", "test_list"),
    "vocab": ("paths", "vocabulary"), "out_dir": ("paths", "output_dir"),
    "fraction": ("subset", "fraction"), "seed": ("subset", "seed"),
}


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _load_config(args, PREPARE_FLAGS)
    p = cfg.paths
    manifest = _require_file(p.manifest, "label manifest (--manifest)")
    image_root = _require_file(p.image_root, "image root (--image-root)")
    train_list = _require_file(p.train_list, "train split list (--train-list)")
    test_list = _require_file(p.test_list, "test split list (--test-list)")
    vocab = LabelVocabulary.from_file(_require_file(p.vocabulary, "vocabulary")) if p.vocabulary \
        else LabelVocabulary.default()
    out_dir = Path(p.output_dir or "prepared")

    records = parse_label_manifest(manifest, image_root)
    train, test = build_splits(records, train_list, test_list, vocab)
    out_dir.mkdir(parents=True, exist_ok=True)
    train.save(out_dir / "train.json")
    test.save(out_dir / "test.json")
    shown = [train, test]
    if cfg.subset.fraction is not None:
        for split in (train, test):
            mini = make_subset(split, cfg.subset.fraction, cfg.subset.seed)
            mini.save(out_dir / f"{split.name}_mini.json")
            shown.append(mini)
    cfg.write(out_dir)
    print(_frequency_table(shown))
    print(f"wrote {', '.join(s.name + '.json' for s in shown)} to {out_dir}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

TRAIN_FLAGS = {
    "data": ("paths", "data"), "out_dir": ("paths", "output_dir"), "weights_dir": ("paths", "weights_dir"),
    "arch": ("model", "arch"), "freeze_policy": ("model", "freeze_policy"), "input_size": ("model", "input_size"),
    "pretrained": ("model", "pretrained"),
    "epochs": ("train", "epochs"), "lr": ("train", "base_lr"), "batch_train": ("train", "batch_train"),
    "seed": ("train", "seed"), "loss": ("loss", "kind"), "focal_alpha": ("loss", "alpha"),
    "focal_gamma": ("loss", "gamma"),
}


def cmd_train(args: argparse.Namespace) -> int:
    from cxrkit.trainer import NonFiniteLossError, resume, train

    cfg = _load_config(args, TRAIN_FLAGS)
    data = _require_file(cfg.paths.data, "training manifest (--data)")
    if args.resume is not None:
        _require_file(args.resume, "resume checkpoint")
    out_dir = Path(cfg.paths.output_dir or Path("runs") / cfg.model.arch)
    cfg = runconfig.with_output_dir(cfg, out_dir)
    split = DatasetSplit.load(data)
    m = cfg.model
    spec = ModelSpec(m.arch, len(split.vocabulary), pretrained=m.pretrained, freeze_policy=m.freeze_policy,
                     freeze_boundary=m.freeze_boundary, input_size=m.input_size, seed=cfg.train.seed)
    store = WeightStore(cfg.paths.weights_dir, allow_download=True)
    if args.resume is None:
        model = build_model(spec, split.vocabulary.classes, store)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir)
    if args.dry_run:
        print(f"dry run: configuration valid, resolved config written to {out_dir / runconfig.CONFIG_NAME}")
        return EXIT_OK

    try:
        if args.resume is not None:
            history = resume(args.resume, split, cfg.train, out_dir, arch=m.arch)
        else:
            history = train(model, split, cfg.train, out_dir)
    except NonFiniteLossError as exc:
        diag = out_dir / "diagnostics.json"
        diag.write_text(json.dumps(exc.to_dict(), indent=2) + "\n", encoding="utf-8")
        print(f"error: {exc}\ndiagnostics written to {diag}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {m.arch} for {len(history)} epoch(s); final loss {history.losses[-1]:.5f}")
    print(f"checkpoints in {out_dir / 'checkpoints'}")
    return EXIT_OK


# -- evaluate ------------------------------------------------------------------

EVAL_FLAGS = {"data": ("paths", "data"), "out_dir": ("paths", "output_dir"),
              "threshold": ("eval", "threshold"), "batch_eval": ("train", "batch_eval")}


def _check_vocabulary(meta: dict, split: DatasetSplit) -> None:
    if meta.get("vocabulary") != list(split.vocabulary.classes):
        raise CheckpointMismatchError("vocabulary", list(split.vocabulary.classes), meta.get("vocabulary"))


def cmd_evaluate(args: argparse.Namespace) -> int:
    from cxrkit.metrics import evaluate, format_table

    cfg = _load_config(args, EVAL_FLAGS)
    data = _require_file(cfg.paths.data, "test manifest (--data)")
    checkpoints = [_require_file(c, "checkpoint") for c in args.checkpoint]
    out_dir = Path(cfg.paths.output_dir or "report")
    cfg = runconfig.with_output_dir(cfg, out_dir)
    split = DatasetSplit.load(data)

    models = []
    for ckpt in checkpoints:
        model, meta = load_checkpoint(ckpt)
        _check_vocabulary(meta, split)
        models.append((model, meta))
    reports = []
    if args.no_pretrained_baseline:
        done = set()
        for model, meta in models:
            if meta["arch"] in done:
                continue
            done.add(meta["arch"])
            spec = ModelSpec(meta["arch"], meta["num_classes"], pretrained=False, input_size=meta.get("input_size"),
                             seed=meta.get("seed", 0))
            baseline = build_model(spec, meta["vocabulary"])
            reports.append(evaluate(baseline, split, cfg.train, model_name=f"{meta['arch']} (random init)",
                                    threshold=cfg.eval.threshold))
    for (model, meta), ckpt in zip(models, checkpoints):
        name = meta["arch"] if len(models) == 1 else f"{meta['arch']} [{ckpt.parent.parent.name}/{ckpt.name}]"
        reports.append(evaluate(model, split, cfg.train, model_name=name, threshold=cfg.eval.threshold))

    out_dir.mkdir(parents=True, exist_ok=True)
    table = format_table(reports)
    (out_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    payload = {"data": str(data), "checkpoints": [str(c) for c in checkpoints],
               "reports": [r.to_dict() for r in reports]}
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    cfg.write(out_dir)
    print(table)
    return EXIT_OK


# -- explain -------------------------------------------------------------------

def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", str(text))


def cmd_explain(args: argparse.Namespace) -> int:
    import numpy as np
    from PIL import Image

    from cxrkit.gradcam import compute_cam, layer_sweep, overlay, sweep_panel
    from cxrkit.preprocess import load_and_standardize

    ckpt = _require_file(args.checkpoint, "checkpoint")
    images = [_require_file(p, "image") for p in args.images]
    model, meta = load_checkpoint(ckpt)
    vocab = meta["vocabulary"]
    if args.target_class not in vocab:
        raise UsageError(f"unknown class {args.target_class!r}; vocabulary: {', '.join(vocab)}")
    out_dir = Path(args.out_dir or "explain")
    out_dir.mkdir(parents=True, exist_ok=True)
    checksum = state_checksum(ckpt / "weights.pt")
    cls = _slug(args.target_class)
    written = []

    for path in images:
        image = load_and_standardize(path, model.profile)
        size = image.shape[-1]
        with Image.open(path) as im:
            original = np.asarray(im.convert("L").resize((size, size), Image.BILINEAR))
        maps = layer_sweep(model, image, args.target_class) if args.sweep \
            else {args.layer: compute_cam(model, image, args.target_class, args.layer)}
        for depth, hm in maps.items():
            stem = f"{_slug(path.stem)}_{cls}_{_slug(depth)}"
            overlay(hm, original, args.opacity, out_path=out_dir / f"{stem}.png")
            sidecar = {**hm.sidecar(), "image": str(path), "depth": depth, "checkpoint": str(ckpt),
                       "checkpoint_sha256": checksum, "opacity": args.opacity}
            (out_dir / f"{stem}.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
            written.append(out_dir / f"{stem}.png")
        if args.sweep:
            panel = out_dir / f"panel_{_slug(path.stem)}_{cls}.png"
            sweep_panel(maps, original, panel, args.opacity,
                        title=f"{meta['arch']}: {args.target_class} ({path.name})")
            written.append(panel)
    for p in written:
        print(p)
    return EXIT_OK


# -- synthetic helpers ---------------------------------------------------------

def cmd_make_fixture(args: argparse.Namespace) -> int:
    from cxrkit.synthetic import make_fixture

    paths = make_fixture(args.out_dir, n_images=args.n_images, size=args.size, seed=args.seed)
    for key, value in paths.items():
        print(f"{key}: {value}")
    return EXIT_OK


def cmd_pretrain_synthetic(args: argparse.Namespace) -> int:
    from cxrkit.synthetic import pretrain_backbone

    store = WeightStore(args.weights_dir, allow_download=False)
    path = pretrain_backbone(args.arch, store, n_images=args.n_images, input_size=args.input_size,
                             epochs=args.epochs, seed=args.seed)
    print(path)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrkit", description="Chest X-ray transfer-learning toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build normalized split manifests")
    p.add_argument("--config", help="TOML run config")
    p.add_argument("--manifest", help="label manifest CSV (Image Index, Finding Labels)")
    p.add_argument("--image-root", help="directory holding the images")
    p.add_argument("--train-list", help="train/val image id list")
    p.add_argument("--test-list", help="test image id list")
    p.add_argument("--vocab", help="class vocabulary file (default: the 14 NIH classes)")
    p.add_argument("--fraction", type=float, help="also write stratified *_mini.json subsets of this size")
    p.add_argument("--seed", type=int, help="subset seed")
    p.add_argument("--out-dir", help="output directory (default: prepared)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fine-tune a model")
    p.add_argument("--config", help="TOML run config")
    p.add_argument("--data", help="training split JSON written by prepare")
    p.add_argument("--arch", choices=ARCHS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch-train", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--input-size", type=int, help="override the architecture's input resolution")
    p.add_argument("--freeze-policy", choices=("none", "backbone", "up_to_boundary"))
    p.add_argument("--loss", choices=("bce", "focal"))
    p.add_argument("--focal-alpha", type=float)
    p.add_argument("--focal-gamma", type=float)
    p.add_argument("--no-pretrained", dest="pretrained", action="store_const", const=False,
                   help="start from random initialization")
    p.add_argument("--weights-dir", help="pretrained weight cache (default: $CXRKIT_WEIGHTS_DIR)")
    p.add_argument("--resume", help="per-epoch checkpoint directory to continue from")
    p.add_argument("--out-dir", help="run directory (default: runs/<arch>)")
    p.add_argument("--dry-run", action="store_true", help="validate and write the resolved config only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score checkpoints on a split")
    p.add_argument("--config", help="TOML run config")
    p.add_argument("--checkpoint", action="append", required=True, help="checkpoint directory (repeatable)")
    p.add_argument("--data", help="split JSON to evaluate on")
    p.add_argument("--threshold", type=float)
    p.add_argument("--batch-eval", type=int)
    p.add_argument("--no-pretrained-baseline", action="store_true",
                   help="add a row for an untrained, randomly initialized twin of each architecture")
    p.add_argument("--out-dir", help="report directory (default: report)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="Grad-CAM overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="target_class", required=True, help="class name from the vocabulary")
    p.add_argument("--layer", default="final", help="early, middle, final or an explicit module name")
    p.add_argument("--sweep", action="store_true", help="all three depths plus a side-by-side panel")
    p.add_argument("--opacity", type=float, default=0.4)
    p.add_argument("--out-dir", help="output directory (default: explain)")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("make-fixture", help="write a small synthetic radiograph dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-images", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("pretrain-synthetic", help="pretrain a backbone on synthetic shapes into the weight store")
    p.add_argument("--arch", choices=ARCHS, required=True)
    p.add_argument("--weights-dir", help="weight store (default: $CXRKIT_WEIGHTS_DIR)")
    p.add_argument("--n-images", type=int, default=800)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain_synthetic)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except SplitOverlapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("overlapping ids: " + ", ".join(exc.overlap), file=sys.stderr)
    except USAGE_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args and not isinstance(exc, UnknownLabelError) \
            else exc
        print(f"error: {msg}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
