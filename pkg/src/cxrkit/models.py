"""Classifier construction: torchvision backbones, multi-label head, freezing, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torchvision

from cxrkit.preprocess import ArchProfile, get_profile

log = logging.getLogger(__name__)

FREEZE_POLICIES = ("none", "backbone", "up_to_boundary")
WEIGHTS_ENV = "CXRKIT_WEIGHTS_DIR"
DEPTHS = ("early", "middle", "final")

# parameter-name prefixes of the replaced classification head
HEAD_PREFIX = {"alexnet": "classifier.6", "resnet152": "fc", "inception_v3": "fc"}


class RegistryError(KeyError):
    def __str__(self) -> str:
        return self.args[0]


class WeightLoadError(RuntimeError):
    pass


class LayerNotFoundError(KeyError):
    def __init__(self, name: str, available: Sequence[str]):
        self.name = name
        self.available = list(available)
        super().__init__(f"no layer named {name!r}; available layers: {', '.join(self.available)}")

    def __str__(self) -> str:
        return self.args[0]


class CheckpointMismatchError(ValueError):
    def __init__(self, field: str, expected, found):
        self.field = field
        super().__init__(f"checkpoint {field} mismatch: expected {expected!r}, checkpoint has {found!r}")


def _construct(arch: str) -> nn.Module:
    if arch == "alexnet":
        return torchvision.models.alexnet(weights=None)
    if arch == "resnet152":
        return torchvision.models.resnet152(weights=None)
    if arch == "inception_v3":
        # transform_input re-maps ImageNet-normalized input to the [-1, 1] scale the
        # published inception weights expect; kept on for random init so both match
        return torchvision.models.inception_v3(weights=None, aux_logits=False, init_weights=True, transform_input=True)
    raise RegistryError(f"unknown architecture {arch!r}; valid names: {', '.join(sorted(HEAD_PREFIX))}")


def _group_prefixes(arch: str) -> "OrderedDict[str, tuple[str, ...]]":
    if arch == "alexnet":
        return OrderedDict(features=("features",), classifier=("classifier.",), head=("classifier.6",))
    if arch == "resnet152":
        return OrderedDict(
            stem=("conv1", "bn1"), layer1=("layer1",), layer2=("layer2",), layer3=("layer3",),
            layer4=("layer4",), head=("fc",),
        )
    if arch == "inception_v3":
        stem = ("Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "Conv2d_3b_1x1", "Conv2d_4a_3x3")
        mixed = ["Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b", "Mixed_6c", "Mixed_6d",
                 "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c"]
        groups: OrderedDict[str, tuple[str, ...]] = OrderedDict(stem=stem)
        for m in mixed:
            groups[m] = (m,)
        groups["head"] = ("fc",)
        return groups
    raise RegistryError(f"unknown architecture {arch!r}; valid names: {', '.join(sorted(HEAD_PREFIX))}")


def _matches(param_name: str, prefix: str) -> bool:
    if prefix.endswith("."):
        return param_name.startswith(prefix)
    return param_name == prefix or param_name.startswith(prefix + ".")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    num_classes: int = 14
    pretrained: bool = True
    freeze_policy: str = "up_to_boundary"
    freeze_boundary: str | None = None
    input_size: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.arch not in HEAD_PREFIX:
            raise RegistryError(f"unknown architecture {self.arch!r}; valid names: {', '.join(sorted(HEAD_PREFIX))}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"freeze_policy must be one of {FREEZE_POLICIES}, got {self.freeze_policy!r}")

    def profile(self) -> ArchProfile:
        prof = get_profile(self.arch)
        if self.freeze_boundary is not None:
            prof = replace(prof, freeze_boundary=self.freeze_boundary)
        if self.input_size is not None:
            prof = prof.with_input_size(self.input_size)
        return prof


class ClassifierModel(nn.Module):
    """A torchvision backbone with a fresh ``num_classes``-wide linear head.

    ``forward`` returns raw logits of shape ``(B, num_classes)``. Parameters are
    partitioned into ordered named groups (``stem``, ``layer1`` ... ``head``);
    freezing acts on whole groups.
    """

    def __init__(self, net: nn.Module, spec: ModelSpec, vocabulary: Sequence[str] | None = None):
        super().__init__()
        self.net = net
        self.spec = spec
        self.profile = spec.profile()
        self.vocabulary = tuple(vocabulary) if vocabulary is not None else None
        self.groups = _group_prefixes(spec.arch)
        self._param_group: dict[str, str] = {}
        for pname, _ in self.net.named_parameters():
            # head is listed last and is the most specific prefix, so the last match wins
            owner = [g for g, prefixes in self.groups.items() if any(_matches(pname, p) for p in prefixes)]
            if not owner:
                raise RuntimeError(f"parameter {pname} not assigned to any group")
            self._param_group[pname] = owner[-1]
        if self.profile.freeze_boundary not in self.groups:
            raise ValueError(
                f"freeze boundary {self.profile.freeze_boundary!r} is not a group of {spec.arch}; "
                f"groups: {list(self.groups)}"
            )
        self.trainable_mask: dict[str, bool] = {}
        self.apply_freeze(spec.freeze_policy)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def group_of(self, param_name: str) -> str:
        return self._param_group[param_name.removeprefix("net.")]

    def named_group_parameters(self) -> "OrderedDict[str, list[tuple[str, nn.Parameter]]]":
        out: OrderedDict[str, list[tuple[str, nn.Parameter]]] = OrderedDict((g, []) for g in self.groups)
        for pname, p in self.net.named_parameters():
            out[self._param_group[pname]].append((pname, p))
        return out

    def apply_freeze(self, policy: str) -> None:
        if policy not in FREEZE_POLICIES:
            raise ValueError(f"freeze_policy must be one of {FREEZE_POLICIES}, got {policy!r}")
        names = list(self.groups)
        boundary = names.index(self.profile.freeze_boundary)
        for i, g in enumerate(names):
            if g == "head" or policy == "none":
                trainable = True
            elif policy == "backbone":
                trainable = False
            else:
                trainable = i >= boundary
            self.trainable_mask[g] = trainable
        for pname, p in self.net.named_parameters():
            p.requires_grad_(self.trainable_mask[self._param_group[pname]])

    def layer_names(self) -> list[str]:
        return [n for n, _ in self.net.named_modules() if n]

    def resolve_layer(self, depth: str) -> tuple[str, nn.Module]:
        return resolve_layer(self, depth)


def _init_head(linear: nn.Linear, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(linear.in_features)
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=gen)
        linear.bias.zero_()


class WeightStore:
    """Directory of backbone state dicts, one ``<arch>.pt`` per architecture.

    Resolution order: explicit ``root``, then ``$CXRKIT_WEIGHTS_DIR``, then
    ``~/.cache/cxrkit/weights``. When no local file exists the torchvision
    ImageNet weights are fetched (cached under ``$TORCH_HOME``); any failure is
    raised, never silently replaced by a random initialization.
    """

    def __init__(self, root: str | Path | None = None, allow_download: bool = True):
        root = root or os.environ.get(WEIGHTS_ENV) or Path.home() / ".cache" / "cxrkit" / "weights"
        self.root = Path(root)
        self.allow_download = allow_download

    def path_for(self, arch: str) -> Path:
        return self.root / f"{arch}.pt"

    def save(self, arch: str, state_dict: dict, info: dict | None = None) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path_for(arch)
        torch.save(state_dict, path)
        if info is not None:
            path.with_suffix(".json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        return path

    def load(self, arch: str) -> dict:
        path = self.path_for(arch)
        if path.is_file():
            try:
                return torch.load(path, map_location="cpu", weights_only=True)
            except Exception as exc:  # corrupt or foreign file
                raise WeightLoadError(f"cannot read pretrained weights {path}: {exc}") from exc
        if not self.allow_download:
            raise WeightLoadError(f"no pretrained weights for {arch} at {path} and downloading is disabled")
        try:
            weights = torchvision.models.get_model_weights(arch).DEFAULT
            return weights.get_state_dict(progress=False)
        except Exception as exc:
            raise WeightLoadError(
                f"pretrained weights for {arch} unavailable: not found at {path} and download failed ({exc}). "
                f"Place a state dict there or set ${WEIGHTS_ENV}."
            ) from exc


def _load_backbone(net: nn.Module, arch: str, state: dict) -> None:
    head = HEAD_PREFIX[arch]
    state = {k: v for k, v in state.items() if not _matches(k, head) and not k.startswith("AuxLogits.")}
    try:
        result = net.load_state_dict(state, strict=False)
    except RuntimeError as exc:  # shape mismatches
        raise WeightLoadError(f"pretrained {arch} state dict does not fit the backbone: {exc}") from exc
    missing = [k for k in result.missing_keys if not _matches(k, head)]
    if missing or result.unexpected_keys:
        raise WeightLoadError(
            f"pretrained {arch} state dict does not fit the backbone: "
            f"missing={missing[:5]} unexpected={result.unexpected_keys[:5]}"
        )


def build_model(
    spec: ModelSpec,
    vocabulary: Sequence[str] | None = None,
    store: WeightStore | None = None,
) -> ClassifierModel:
    if vocabulary is not None and len(vocabulary) != spec.num_classes:
        raise ValueError(f"vocabulary has {len(vocabulary)} classes but num_classes={spec.num_classes}")
    torch.manual_seed(spec.seed)
    net = _construct(spec.arch)
    if spec.pretrained:
        _load_backbone(net, spec.arch, (store or WeightStore()).load(spec.arch))
    if spec.arch == "alexnet":
        head = nn.Linear(net.classifier[6].in_features, spec.num_classes)
        net.classifier[6] = head
    else:
        head = nn.Linear(net.fc.in_features, spec.num_classes)
        net.fc = head
    _init_head(head, spec.seed)
    return ClassifierModel(net, spec, vocabulary)


def trainable_parameters(model: ClassifierModel) -> list[dict]:
    """Optimizer-ready parameter groups, one per trainable named group."""
    groups = []
    for name, params in model.named_group_parameters().items():
        if model.trainable_mask[name] and params:
            groups.append({"name": name, "params": [p for _, p in params]})
    return groups


def resolve_layer(model: nn.Module, depth: str) -> tuple[str, nn.Module]:
    """Map ``early``/``middle``/``final`` or an explicit module name to ``(name, module)``.

    Explicit names may use python-style negative indices (``layer2.-1``).
    """
    root = model.net if isinstance(model, ClassifierModel) else model
    if isinstance(model, ClassifierModel) and depth in DEPTHS:
        name = model.profile.cam_layers[depth]
    else:
        name = depth
    modules = dict(root.named_modules())
    if name in modules and name:
        return name, modules[name]
    # dotted path with integer (possibly negative) indices into Sequentials
    node = root
    try:
        for part in name.split("."):
            if part.lstrip("-").isdigit():
                node = node[int(part)]
            else:
                node = getattr(node, part)
            if not isinstance(node, nn.Module):
                raise AttributeError(part)
    except (AttributeError, IndexError, TypeError, KeyError):
        raise LayerNotFoundError(name, [n for n in modules if n]) from None
    for n, m in modules.items():
        if m is node and n:
            return n, m
    raise LayerNotFoundError(name, [n for n in modules if n])


def state_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(
    model: ClassifierModel,
    directory: str | Path,
    *,
    epoch: int,
    config_hash: str = "",
    extra: dict | None = None,
    trainer_state: dict | None = None,
) -> Path:
    """Write ``weights.pt`` + ``meta.json`` (+ ``trainer_state.pt`` when resuming is wanted)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "weights.pt")
    meta = {
        "arch": model.spec.arch,
        "num_classes": model.num_classes,
        "vocabulary": list(model.vocabulary) if model.vocabulary is not None else None,
        "freeze_policy": model.spec.freeze_policy,
        "freeze_boundary": model.profile.freeze_boundary,
        "input_size": model.profile.input_size,
        "pretrained": model.spec.pretrained,
        "seed": model.spec.seed,
        "epoch": epoch,
        "config_hash": config_hash,
    }
    if extra:
        meta.update(extra)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    if trainer_state is not None:
        torch.save(trainer_state, directory / "trainer_state.pt")
    return directory


def read_checkpoint_meta(directory: str | Path) -> dict:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file() or not (directory / "weights.pt").is_file():
        raise FileNotFoundError(f"{directory} is not a checkpoint directory (needs weights.pt and meta.json)")
    return json.loads(meta_path.read_text(encoding="utf-8"))


def load_checkpoint(directory: str | Path) -> tuple[ClassifierModel, dict]:
    directory = Path(directory)
    meta = read_checkpoint_meta(directory)
    spec = ModelSpec(
        arch=meta["arch"],
        num_classes=meta["num_classes"],
        pretrained=False,
        freeze_policy=meta["freeze_policy"],
        freeze_boundary=meta.get("freeze_boundary"),
        input_size=meta.get("input_size"),
        seed=meta.get("seed", 0),
    )
    model = build_model(spec, meta.get("vocabulary"))
    state = torch.load(directory / "weights.pt", map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    # restore the original provenance flag; the weights just loaded carry it
    model.spec = ModelSpec(**{**asdict(spec), "pretrained": bool(meta.get("pretrained", False))})
    return model, meta
