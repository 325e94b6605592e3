"""Experiment configuration: strict JSON dicts -> runnable objects.

Parsing is deliberately unforgiving: unknown keys, wrong types, and
out-of-range values all raise ``ConfigError`` with the dotted path of the
offending field, so a typo in a preset never silently changes a run.  The
canonical serialization (``to_dict``) round-trips through ``from_dict`` and
feeds ``config_hash``, which identifies a configuration independently of
where its outputs are written.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .continual import LossWeights, MethodKind, Schedule
from .data import Dataset, generate_synthetic, load_cifar_binary
from .engine import ValidationError
from .network import BackboneSpec, HeadSpec, InverseSpec, Network

_MISSING = object()


class ConfigError(ValidationError):
    """Bad configuration value, reported with its dotted field path."""


class _Section:
    """A dict being consumed key by key; leftovers are a config error."""

    def __init__(self, mapping, path):
        if not isinstance(mapping, dict):
            where = path or "config"
            raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
        self._d = dict(mapping)
        self._path = path

    def key(self, name):
        return f"{self._path}.{name}" if self._path else name

    def take(self, name, default=_MISSING):
        if name in self._d:
            return self._d.pop(name)
        if default is _MISSING:
            raise ConfigError(f"{self.key(name)}: missing required key")
        return default

    def done(self):
        if self._d:
            where = self._path or "config"
            raise ConfigError(f"{where}: unknown keys {sorted(self._d)}")


def _as_int(path, value, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return int(value)


def _as_float(path, value, minimum=None, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    v = float(value)
    if positive and v <= 0:
        raise ConfigError(f"{path}: must be > 0, got {value}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return v


def _as_str(path, value):
    if not isinstance(value, str) or not value:
        raise ConfigError(f"{path}: expected a non-empty string, got {value!r}")
    return value


def _as_ints(path, value, minimum=None, length=None):
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"{path}: expected a non-empty list of integers, got {value!r}")
    if length is not None and len(value) != length:
        raise ConfigError(f"{path}: expected {length} entries, got {len(value)}")
    return tuple(_as_int(f"{path}[{i}]", v, minimum=minimum) for i, v in enumerate(value))


@dataclass(frozen=True)
class DataConfig:
    """Where examples come from: a seeded generator or binary record files."""

    kind: str
    val_count: int
    positive_class: int = 1
    # synthetic source
    classes: int = 0
    n_per_class: int = 0
    image_hw: tuple = (8, 8)
    channels: int = 1
    noise_sigma: float = 0.0
    template_contrast: float = 1.0
    label_noise: float = 0.0
    fine_split: tuple | None = None
    seed: int = 0
    test_n_per_class: int = 0
    # binary record files
    paths: tuple = ()
    test_path: str = ""
    limit: int | None = None

    @classmethod
    def from_dict(cls, raw, path="data"):
        sec = _Section(raw, path)
        kind = _as_str(sec.key("kind"), sec.take("kind"))
        if kind not in ("synthetic", "cifar-binary"):
            raise ConfigError(f"{sec.key('kind')}: expected 'synthetic' or "
                              f"'cifar-binary', got '{kind}'")
        val_count = _as_int(sec.key("val_count"), sec.take("val_count"), minimum=1)
        positive_class = _as_int(sec.key("positive_class"),
                                 sec.take("positive_class", 1), minimum=0)
        fields = {"kind": kind, "val_count": val_count, "positive_class": positive_class}
        if kind == "synthetic":
            classes = _as_int(sec.key("classes"), sec.take("classes"), minimum=2)
            fine_raw = sec.take("fine_split", None)
            fine = (None if fine_raw is None else
                    _as_ints(sec.key("fine_split"), fine_raw, minimum=1, length=classes))
            fields.update(
                classes=classes,
                n_per_class=_as_int(sec.key("n_per_class"), sec.take("n_per_class"), minimum=1),
                image_hw=_as_ints(sec.key("image_hw"), sec.take("image_hw", [8, 8]),
                                  minimum=4, length=2),
                channels=_as_int(sec.key("channels"), sec.take("channels", 1), minimum=1),
                noise_sigma=_as_float(sec.key("noise_sigma"), sec.take("noise_sigma"),
                                      minimum=0.0),
                template_contrast=_as_float(sec.key("template_contrast"),
                                            sec.take("template_contrast", 1.0), positive=True),
                label_noise=_as_float(sec.key("label_noise"), sec.take("label_noise", 0.0),
                                      minimum=0.0),
                fine_split=fine,
                seed=_as_int(sec.key("seed"), sec.take("seed", 0)),
                test_n_per_class=_as_int(sec.key("test_n_per_class"),
                                         sec.take("test_n_per_class"), minimum=1),
            )
            if fields["label_noise"] >= 1.0:
                raise ConfigError(f"{sec.key('label_noise')}: must be < 1")
        else:
            raw_paths = sec.take("paths")
            if not isinstance(raw_paths, (list, tuple)) or not raw_paths:
                raise ConfigError(f"{sec.key('paths')}: expected a non-empty list of paths")
            limit_raw = sec.take("limit", None)
            fields.update(
                classes=_as_int(sec.key("classes"), sec.take("classes", 10), minimum=2),
                paths=tuple(_as_str(f"{sec.key('paths')}[{i}]", p)
                            for i, p in enumerate(raw_paths)),
                test_path=_as_str(sec.key("test_path"), sec.take("test_path")),
                limit=(None if limit_raw is None else
                       _as_int(sec.key("limit"), limit_raw, minimum=1)),
            )
        sec.done()
        cfg = cls(**fields)
        if cfg.positive_class >= cfg.classes:
            raise ConfigError(f"{sec.key('positive_class')}: {cfg.positive_class} is not a "
                              f"class index (have {cfg.classes} classes)")
        return cfg

    def to_dict(self):
        d = {"kind": self.kind, "val_count": self.val_count,
             "positive_class": self.positive_class, "classes": self.classes}
        if self.kind == "synthetic":
            d.update(n_per_class=self.n_per_class, image_hw=list(self.image_hw),
                     channels=self.channels, noise_sigma=self.noise_sigma,
                     template_contrast=self.template_contrast, label_noise=self.label_noise,
                     fine_split=None if self.fine_split is None else list(self.fine_split),
                     seed=self.seed, test_n_per_class=self.test_n_per_class)
        else:
            d.update(paths=list(self.paths), test_path=self.test_path, limit=self.limit)
        return d

    # -- derived geometry ---------------------------------------------------

    @property
    def image_shape(self):
        if self.kind == "synthetic":
            return (self.image_hw[0], self.image_hw[1], self.channels)
        return (32, 32, 3)

    @property
    def fine_classes(self):
        """Classes the main head predicts (the fine level when it exists)."""
        if self.fine_split is not None:
            return int(sum(self.fine_split))
        return self.classes

    @property
    def total_train(self):
        if self.kind == "synthetic":
            return self.n_per_class * self.fine_classes
        return self.limit  # unknown until loaded when no limit is set

    # -- dataset construction -------------------------------------------------

    def build_train(self) -> Dataset:
        if self.kind == "synthetic":
            return generate_synthetic(
                self.n_per_class, self.classes, self.image_shape, self.noise_sigma,
                self.seed, fine_split=self.fine_split,
                template_contrast=self.template_contrast,
                label_noise=self.label_noise, instance=0)
        ds = self._load_records([os.path.expandvars(p) for p in self.paths])
        if self.limit is not None:
            ds = Dataset(ds.images[:self.limit], ds.labels[:self.limit])
        return ds

    def build_test(self) -> Dataset:
        if self.kind == "synthetic":
            # same templates, fresh noise draws, no label corruption
            return generate_synthetic(
                self.test_n_per_class, self.classes, self.image_shape, self.noise_sigma,
                self.seed, fine_split=self.fine_split,
                template_contrast=self.template_contrast,
                label_noise=0.0, instance=1)
        return load_cifar_binary(os.path.expandvars(self.test_path))

    @staticmethod
    def _load_records(paths):
        parts = [load_cifar_binary(p) for p in paths]
        if len(parts) == 1:
            return parts[0]
        return Dataset(np.concatenate([d.images for d in parts]),
                       np.concatenate([d.labels for d in parts]))


@dataclass(frozen=True)
class NetworkConfig:
    widths: tuple = (8, 16, 32)
    blocks_per_stage: int = 1
    inverse_widths: tuple | None = None

    @classmethod
    def from_dict(cls, raw, path="network"):
        sec = _Section(raw, path)
        widths = _as_ints(sec.key("widths"), sec.take("widths", [8, 16, 32]),
                          minimum=1, length=3)
        blocks = _as_int(sec.key("blocks_per_stage"), sec.take("blocks_per_stage", 1),
                         minimum=1)
        inv_raw = sec.take("inverse_widths", None)
        inv = (None if inv_raw is None else
               _as_ints(sec.key("inverse_widths"), inv_raw, minimum=1))
        sec.done()
        if list(widths) != sorted(widths):
            raise ConfigError(f"{sec.key('widths')}: must be non-decreasing, got {list(widths)}")
        if inv is not None and inv[-1] != widths[2]:
            raise ConfigError(f"{sec.key('inverse_widths')}: must end at the feature "
                              f"width {widths[2]}, got {inv[-1]}")
        return cls(widths=widths, blocks_per_stage=blocks, inverse_widths=inv)

    def to_dict(self):
        return {"widths": list(self.widths), "blocks_per_stage": self.blocks_per_stage,
                "inverse_widths": None if self.inverse_widths is None
                else list(self.inverse_widths)}


def _schedule_from(raw, path="schedule"):
    sec = _Section(raw, path)
    fields = dict(
        lr0=_as_float(sec.key("lr0"), sec.take("lr0"), positive=True),
        decay_factor=_as_float(sec.key("decay_factor"), sec.take("decay_factor", 0.1),
                               positive=True),
        decay_period=_as_int(sec.key("decay_period"), sec.take("decay_period", 40), minimum=1),
        epochs=_as_int(sec.key("epochs"), sec.take("epochs", 120), minimum=1),
        momentum=_as_float(sec.key("momentum"), sec.take("momentum", 0.9), minimum=0.0),
        weight_decay=_as_float(sec.key("weight_decay"), sec.take("weight_decay", 0.0001),
                               minimum=0.0),
    )
    sec.done()
    return Schedule(**fields)


def _weights_from(raw, path="weights"):
    sec = _Section(raw, path)
    fields = dict(
        lambda_lwf_base=_as_float(sec.key("lambda_lwf_base"),
                                  sec.take("lambda_lwf_base", 0.1), minimum=0.0),
        lambda_lwf_plus=_as_float(sec.key("lambda_lwf_plus"),
                                  sec.take("lambda_lwf_plus", 0.1), minimum=0.0),
        lambda_ewc=_as_float(sec.key("lambda_ewc"), sec.take("lambda_ewc", 0.1), minimum=0.0),
        lambda_rec=_as_float(sec.key("lambda_rec"), sec.take("lambda_rec", 1.0), minimum=0.0),
        temperature=_as_float(sec.key("temperature"), sec.take("temperature", 1.0),
                              positive=True),
    )
    sec.done()
    return LossWeights(**fields)


@dataclass(frozen=True)
class ExperimentConfig:
    """One full experiment: a method, a data source, and every knob it needs."""

    method: MethodKind
    stages: int
    seeds: tuple
    data: DataConfig
    network: NetworkConfig
    schedule: Schedule
    weights: LossWeights
    batch_size: int = 64
    eval_batch: int = 256
    augment_pad: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds: must be distinct, got {list(self.seeds)}")
        if self.method.uses_inverse and self.network.inverse_widths is None:
            raise ConfigError("network.inverse_widths: required for method "
                              f"'{self.method.value}'")
        total = self.data.total_train
        if total is not None and total - self.data.val_count < self.stages:
            raise ConfigError(f"data.val_count: {self.data.val_count} leaves fewer than "
                              f"{self.stages} training examples for {self.stages} stage(s)")

    @classmethod
    def from_dict(cls, raw):
        sec = _Section(raw, "")
        method = MethodKind.from_string(_as_str("method", sec.take("method")))
        fields = dict(
            method=method,
            stages=_as_int("stages", sec.take("stages"), minimum=1),
            seeds=_as_ints("seeds", sec.take("seeds"), minimum=0),
            data=DataConfig.from_dict(sec.take("data")),
            network=NetworkConfig.from_dict(sec.take("network", {})),
            schedule=_schedule_from(sec.take("schedule")),
            weights=_weights_from(sec.take("weights", {})),
            batch_size=_as_int("batch_size", sec.take("batch_size", 64), minimum=1),
            eval_batch=_as_int("eval_batch", sec.take("eval_batch", 256), minimum=1),
            augment_pad=_as_int("augment_pad", sec.take("augment_pad", 0), minimum=0),
            output_dir=_as_str("output_dir", sec.take("output_dir", "runs")),
        )
        sec.done()
        try:
            return cls(**fields)
        except ValidationError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        return {
            "method": self.method.value,
            "stages": self.stages,
            "seeds": list(self.seeds),
            "data": self.data.to_dict(),
            "network": self.network.to_dict(),
            "schedule": {
                "lr0": self.schedule.lr0,
                "decay_factor": self.schedule.decay_factor,
                "decay_period": self.schedule.decay_period,
                "epochs": self.schedule.epochs,
                "momentum": self.schedule.momentum,
                "weight_decay": self.schedule.weight_decay,
            },
            "weights": {
                "lambda_lwf_base": self.weights.lambda_lwf_base,
                "lambda_lwf_plus": self.weights.lambda_lwf_plus,
                "lambda_ewc": self.weights.lambda_ewc,
                "lambda_rec": self.weights.lambda_rec,
                "temperature": self.weights.temperature,
            },
            "batch_size": self.batch_size,
            "eval_batch": self.eval_batch,
            "augment_pad": self.augment_pad,
            "output_dir": self.output_dir,
        }

    def config_hash(self):
        """Digest of everything that affects results (output_dir excluded)."""
        d = self.to_dict()
        del d["output_dir"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def dual_head(self):
        """Whether runs also train a coarse measurement head."""
        return self.data.fine_split is not None

    def with_method(self, method):
        """Same experiment, different sequential-training method."""
        kind = method if isinstance(method, MethodKind) else MethodKind.from_string(method)
        d = self.to_dict()
        d["method"] = kind.value
        return ExperimentConfig.from_dict(d)

    # -- builders used by the run loop ----------------------------------------

    def build_train_dataset(self) -> Dataset:
        return self.data.build_train()

    def build_test_dataset(self) -> Dataset:
        return self.data.build_test()

    def build_network(self) -> Network:
        h, w, c = self.data.image_shape
        heads = [HeadSpec(self.data.fine_classes, "new_head")]
        if self.dual_head:
            heads.append(HeadSpec(self.data.classes, "aux_head"))
        inverse = (InverseSpec(self.network.inverse_widths)
                   if self.method.uses_inverse else None)
        backbone = BackboneSpec((h, w, c), widths=self.network.widths,
                                blocks_per_stage=self.network.blocks_per_stage)
        return Network(backbone, heads, inverse=inverse)


def load_config(path):
    """Read a JSON experiment file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


def available_presets():
    from importlib import resources

    names = []
    for entry in resources.files("stagenet.presets").iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[:-5])
    return sorted(names)


def load_preset(name):
    """Load a packaged experiment preset by bare name."""
    from importlib import resources

    ref = resources.files("stagenet.presets").joinpath(f"{name}.json")
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"unknown preset '{name}' (available: "
                          f"{', '.join(available_presets())})") from None
    return ExperimentConfig.from_dict(json.loads(text))
