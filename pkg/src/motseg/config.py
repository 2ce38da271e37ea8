"""Run configuration: one YAML document with dataset / model / train / eval sections and a root seed.

Precedence is command-line flags over the file over built-in defaults. Unknown
keys are rejected with a message that lists the accepted ones. Per-module seeds
(synthetic scenes, model init, data order, augmentation) are all derived from
the single root ``seed``, so sections do not carry seeds of their own.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from .evaluation import config_fingerprint
from .features import BACKBONES, FUSION_MODES, INPUT_MODES
from .heads import ModelConfig
from .synthetic import SyntheticSceneConfig
from .training import TrainConfig, derive_seed

DATASET_KINDS = ("synthetic", "instancemotseg")
SPLITS = ("train", "test", "all")


class RunConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    root: Optional[str] = None  # on-disk dataset; synthetic scenes are rendered in memory when unset
    motion_root: Optional[str] = None  # optional class-agnostic source for the motion phase
    train_split: str = "train"
    eval_split: str = "test"
    synthetic: Dict[str, Any] = field(default_factory=dict)


@dataclass
class EvalSection:
    conf_thresh: float = 0.3
    score_thresh: float = 0.05
    iou_thresh: float = 0.5
    top_k: int = 200
    warmup: int = 10
    runs: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    eval: EvalSection = field(default_factory=EvalSection)

    # resolved views -------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": self.seed})

    def synthetic_config(self) -> SyntheticSceneConfig:
        return SyntheticSceneConfig.from_dict({**self.dataset.synthetic, "seed": derive_seed(self.seed, "synthetic")})

    def to_dict(self) -> dict:
        """Fully resolved document: every default filled in."""
        syn = dataclasses.asdict(SyntheticSceneConfig.from_dict(self.dataset.synthetic))
        syn.pop("seed")
        train = dataclasses.asdict(TrainConfig.from_dict(self.train))
        train.pop("seed")
        return _plain(
            {
                "seed": self.seed,
                "dataset": {**dataclasses.asdict(self.dataset), "synthetic": syn},
                "model": dataclasses.asdict(self.model_config()),
                "train": train,
                "eval": dataclasses.asdict(self.eval),
            }
        )

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())

    def dump(self, path) -> None:
        doc = self.to_dict()
        doc["fingerprint"] = self.fingerprint()
        Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _fields(cls, exclude: Iterable[str] = ()) -> Dict[str, Any]:
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in exclude}


SECTION_KEYS = {
    "dataset": _fields(DatasetSection),
    "model": _fields(ModelConfig),
    "train": _fields(TrainConfig, exclude=("seed",)),
    "eval": _fields(EvalSection),
}
SYNTHETIC_KEYS = _fields(SyntheticSceneConfig, exclude=("seed",))
TOP_KEYS = ("seed", "dataset", "model", "train", "eval")
CHOICES = {
    "dataset.kind": DATASET_KINDS,
    "dataset.train_split": SPLITS,
    "dataset.eval_split": SPLITS,
    "model.backbone": BACKBONES,
    "model.input_mode": INPUT_MODES,
    "model.fusion": FUSION_MODES,
}


def _check_keys(where: str, given: dict, accepted) -> None:
    for key in given:
        if key not in accepted:
            raise RunConfigError(f"unknown key {where}{key!r}; accepted: {', '.join(sorted(accepted))}")


def validate_document(doc: dict) -> None:
    if not isinstance(doc, dict):
        raise RunConfigError("config must be a mapping with sections " + ", ".join(TOP_KEYS))
    _check_keys("", doc, TOP_KEYS)
    for section, keys in SECTION_KEYS.items():
        body = doc.get(section) or {}
        if not isinstance(body, dict):
            raise RunConfigError(f"section {section!r} must be a mapping")
        _check_keys(f"{section}.", body, keys)
    syn = (doc.get("dataset") or {}).get("synthetic") or {}
    _check_keys("dataset.synthetic.", syn, SYNTHETIC_KEYS)
    for dotted, choices in CHOICES.items():
        section, key = dotted.split(".")
        value = (doc.get(section) or {}).get(key)
        if value is not None and value not in choices:
            raise RunConfigError(f"{dotted}={value!r} is not valid; accepted: {', '.join(choices)}")


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``train.lr=0.01`` -> {"train": {"lr": 0.01}}; the value is parsed as YAML."""
    if "=" not in text:
        raise RunConfigError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    doc: Dict[str, Any] = value
    for part in reversed(dotted.strip().split(".")):
        doc = {part: doc}
    return doc


def from_document(doc: dict) -> RunConfig:
    validate_document(doc)
    ds = dict(doc.get("dataset") or {})
    cfg = RunConfig(
        seed=int(doc.get("seed", 0)),
        dataset=DatasetSection(**ds),
        model=dict(doc.get("model") or {}),
        train=dict(doc.get("train") or {}),
        eval=EvalSection(**(doc.get("eval") or {})),
    )
    try:
        cfg.model_config()
        cfg.train_config().validate()
        cfg.synthetic_config().validate()
    except (TypeError, ValueError) as exc:
        raise RunConfigError(str(exc)) from exc
    return cfg


def load_run_config(path=None, overrides: Optional[Iterable[dict]] = None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then each override mapping in order."""
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        validate_document(loaded)
        doc = _merge(doc, loaded)
    for o in overrides or ():
        validate_document(o)
        doc = _merge(doc, o)
    return from_document(doc)
