"""JSON network/run configuration documents.

A document describes the stem, the stages of inception blocks with their
inter-stage pools, the classifier head, block-level toggles shared by every
block, and optionally a training section. Unknown keys are rejected at every
level. Missing keys take the defaults below; ``null`` block toggles resolve
from the variant (the pruning default follows the per-variant ratio policy:
0.7 for ResFRI-addition, 0 otherwise).
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from .block import GOOGLENET_INCEPTIONS, ResFRIConfig

VARIANTS = {
    # name: (split, fusion, transverse+residual on)
    "baseline": (False, "addition", False),
    "RI-addition": (False, "addition", True),
    "RI-concatenation": (False, "concatenation", True),
    "SRI-addition": (True, "addition", True),
    "SRI-concatenation": (True, "concatenation", True),
}

DEFAULT_PRUNE_RATIO = {"RI-addition": 0.7}


class ConfigError(ValueError):
    pass


_DEFAULTS: dict[str, Any] = {
    "name": "custom",
    "variant": "RI-addition",
    "input_shape": [3, 32, 32],
    "stem": [{"out_channels": 192, "kernel": 3, "stride": 1, "padding": 1}],
    "stages": None,
    "head": {"pool": "avg", "dropout": 0.4, "classes": 10},
    "pool_kind": "avg",
    "block_options": {
        "use_residual": None,
        "use_transverse": None,
        "passage_prune_ratio": None,
        "branch4_pool": "max",
        "cmbr_pool": "max",
    },
    "seed": 0,
    "training": {
        "dataset": "cifar10",
        "epochs": 200,
        "batch_size": 64,
        "lr": 0.01,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "patience": 10,
        "lr_factor": 0.5,
        "min_lr": 0.0,
        "val_fraction": 0.1,
        "val_subset": None,
        "train_subset": None,
        "test_subset": None,
        "augment": True,
        "flip": None,
    },
}
_STEM_KEYS = {"out_channels", "kernel", "stride", "padding"}
_STAGE_KEYS = {"blocks", "pool"}
_POOL_KEYS = {"kind", "kernel", "stride", "padding"}


def _check_keys(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def normalize(raw: dict) -> dict:
    """Validate keys and fill defaults; returns a new document."""
    _check_keys(raw, _DEFAULTS, "config")
    doc = copy.deepcopy(_DEFAULTS)
    for key, value in raw.items():
        if key in ("head", "block_options", "training"):
            _check_keys(value, _DEFAULTS[key], key)
            doc[key].update(copy.deepcopy(value))
        else:
            doc[key] = copy.deepcopy(value)
    if doc["stages"] is None:
        raise ConfigError("config: 'stages' is required")
    for i, s in enumerate(doc["stem"]):
        _check_keys(s, _STEM_KEYS, f"stem[{i}]")
    for i, st in enumerate(doc["stages"]):
        _check_keys(st, _STAGE_KEYS, f"stages[{i}]")
        st.setdefault("pool", None)
        if st["pool"] is not None:
            _check_keys(st["pool"], _POOL_KEYS, f"stages[{i}].pool")
    return doc


@dataclass
class TrainingConfig:
    dataset: str = "cifar10"
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    patience: int = 10
    lr_factor: float = 0.5
    min_lr: float = 0.0
    val_fraction: float = 0.1
    val_subset: Optional[int] = None
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    augment: bool = True
    flip: Optional[bool] = None

    def __post_init__(self):
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"training.dataset must be mnist or cifar10, got {self.dataset!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("training: batch_size >= 1, epochs >= 0 and lr > 0 required")

    @property
    def use_flip(self) -> bool:
        # digits are chirality-sensitive
        return self.flip if self.flip is not None else self.dataset != "mnist"


@dataclass
class StageSpec:
    blocks: list  # ResFRIConfig per block
    pool: Optional[dict]


@dataclass
class NetworkConfig:
    name: str
    variant: str
    input_shape: tuple
    stem: list
    stages: list
    head: dict
    pool_kind: str
    seed: int
    training: TrainingConfig = field(default_factory=TrainingConfig)
    document: dict = field(default_factory=dict, repr=False)

    @property
    def classes(self) -> int:
        return int(self.head["classes"])

    @classmethod
    def from_dict(cls, raw: dict) -> "NetworkConfig":
        doc = normalize(raw)
        variant = doc["variant"]
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANTS)}, got {variant!r}")
        split, fusion, extras = VARIANTS[variant]
        opts = doc["block_options"]
        use_res = extras if opts["use_residual"] is None else bool(opts["use_residual"])
        use_tr = extras if opts["use_transverse"] is None else bool(opts["use_transverse"])
        ratio = opts["passage_prune_ratio"]
        if ratio is None:
            ratio = DEFAULT_PRUNE_RATIO.get(variant, 0.0)
        if doc["pool_kind"] not in ("avg", "max"):
            raise ConfigError(f"pool_kind must be avg or max, got {doc['pool_kind']!r}")
        head = doc["head"]
        if int(head["classes"]) < 2:
            raise ConfigError("head.classes must be >= 2")
        if head["pool"] not in ("avg", "max"):
            raise ConfigError("head.pool must be avg or max")
        shape = tuple(int(v) for v in doc["input_shape"])
        if len(shape) != 3:
            raise ConfigError("input_shape must be [C, H, W]")

        channels = shape[0]
        if doc["stem"]:
            channels = int(doc["stem"][-1]["out_channels"])
        stages = []
        for si, st in enumerate(doc["stages"]):
            blocks = []
            for bi, entry in enumerate(st["blocks"]):
                if isinstance(entry, str):
                    if entry not in GOOGLENET_INCEPTIONS:
                        raise ConfigError(f"stages[{si}].blocks[{bi}]: unknown inception {entry!r}")
                    cin, *widths = GOOGLENET_INCEPTIONS[entry]
                    if cin != channels:
                        raise ConfigError(f"stage {si} block {bi} ({entry}): expects {cin} input channels "
                                          f"but previous layer gives {channels}")
                elif isinstance(entry, list) and len(entry) == 6:
                    widths = entry
                else:
                    raise ConfigError(f"stages[{si}].blocks[{bi}]: expected inception name or 6 widths")
                try:
                    bc = ResFRIConfig(channels, tuple(widths), fusion=fusion, split=split,
                                      use_residual=use_res, use_transverse=use_tr,
                                      passage_prune_ratio=float(ratio),
                                      branch4_pool=opts["branch4_pool"], cmbr_pool=opts["cmbr_pool"])
                except ValueError as e:
                    raise ConfigError(f"stage {si} block {bi}: {e}") from e
                blocks.append(bc)
                channels = sum(bc.branch_outputs())
            pool = None
            if st["pool"] is not None:
                pool = {"kind": None, "kernel": 3, "stride": 2, "padding": 1, **st["pool"]}
            stages.append(StageSpec(blocks, pool))
        try:
            training = TrainingConfig(**doc["training"])
        except TypeError as e:
            raise ConfigError(f"training: {e}") from e
        return cls(name=doc["name"], variant=variant, input_shape=shape, stem=doc["stem"],
                   stages=stages, head=head, pool_kind=doc["pool_kind"], seed=int(doc["seed"]),
                   training=training, document=doc)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.document)


def preset_names() -> list[str]:
    root = resources.files("resfri") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def read_document(source) -> dict:
    """Load a JSON document from a path, falling back to a bundled preset of the same stem."""
    path = Path(source)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        name = path.name[:-5] if path.name.endswith(".json") else path.name
        res = resources.files("resfri") / "presets" / f"{name}.json"
        if not res.is_file():
            raise ConfigError(f"config {str(source)!r} not found (bundled presets: {', '.join(preset_names())})")
        text = res.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {str(source)!r}: invalid JSON ({e})") from e
    return doc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.path=value`` overrides to a normalized document; keys must exist."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for part in parts[:-1]:
            node = _step(node, part, key)
        last = parts[-1]
        if isinstance(node, list):
            idx = _index(node, last, key)
            node[idx] = _parse_value(value)
        elif isinstance(node, dict) and last in node:
            node[last] = _parse_value(value)
        else:
            raise ConfigError(f"override key {key!r} does not exist")
    return doc


def _index(node: list, part: str, key: str) -> int:
    try:
        idx = int(part)
        node[idx]
        return idx
    except (ValueError, IndexError):
        raise ConfigError(f"override key {key!r} does not exist") from None


def _step(node, part, key):
    if isinstance(node, list):
        return node[_index(node, part, key)]
    if isinstance(node, dict) and part in node and node[part] is not None:
        return node[part]
    raise ConfigError(f"override key {key!r} does not exist")


def load_config(source, overrides=None, seed: Optional[int] = None) -> NetworkConfig:
    doc = normalize(read_document(source))
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = int(seed)
    return NetworkConfig.from_dict(doc)


def training_dict(cfg: NetworkConfig) -> dict:
    return asdict(cfg.training)
