"""Run configuration: a YAML document with ``sre``, ``heads``, ``train``,
``data`` and ``seed`` sections.

Every section is optional and falls back to the documented defaults; any key
that is not a known field is rejected with its dotted path. The run seed can
be overridden with the ``MTL_SEED`` environment variable.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

import yaml

from .data import KWS, SV, SynthSpec
from .heads import CLASSES, EMBEDDING, LINEAR, HeadConfig
from .losses import AngularSoftmaxConfig
from .sre import SREConfig
from .trainer import TrainConfig

SEED_ENV = "MTL_SEED"
SYNTHETIC = "synthetic"
FOLDERS = "folders"


class ConfigError(ValueError):
    """A configuration document is malformed or violates a field constraint."""


@dataclass
class HeadSpec:
    """One task's head: its network, plus the A-Softmax settings for SV."""

    task: str
    head: HeadConfig
    angular_softmax: AngularSoftmaxConfig = field(default_factory=AngularSoftmaxConfig)

    def to_dict(self):
        out = {"task": self.task}
        out.update(self.head.to_dict())
        if self.head.output == EMBEDDING:
            out["angular_softmax"] = self.angular_softmax.to_dict()
        return out


@dataclass
class DataConfig:
    """Synthetic corpus spec, or directories of real recordings.

    ``folders`` layout: ``kws_train``/``kws_test`` are folder-per-keyword
    trees, ``sv_train`` a speaker/video/clip tree, ``trials`` a trial list
    whose paths are relative to ``sv_test``.
    """

    source: str = SYNTHETIC
    synthetic: SynthSpec = field(default_factory=SynthSpec)
    kws_train: str = ""
    kws_test: str = ""
    sv_train: str = ""
    sv_test: str = ""
    trials: str = ""

    def validate(self):
        if self.source not in (SYNTHETIC, FOLDERS):
            raise ConfigError(f"data.source must be 'synthetic' or 'folders', got {self.source!r}")
        if self.source == SYNTHETIC:
            self.synthetic.validate()
        else:
            for name in ("kws_train", "kws_test", "sv_train", "sv_test", "trials"):
                if not getattr(self, name):
                    raise ConfigError(f"data.{name} is required when data.source is 'folders'")

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "synthetic"}
        out["synthetic"] = {f.name: getattr(self.synthetic, f.name) for f in fields(self.synthetic)}
        return out


def default_heads(n_keywords=12):
    return [
        HeadSpec(KWS, HeadConfig(kind=LINEAR, output=CLASSES, n_out=n_keywords, input_seconds=1)),
        HeadSpec(SV, HeadConfig(kind=LINEAR, output=EMBEDDING, n_out=256, input_seconds=2)),
    ]


@dataclass
class RunConfig:
    sre: SREConfig = field(default_factory=SREConfig)
    heads: list = field(default_factory=default_heads)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 7

    def head_for(self, task):
        for spec in self.heads:
            if spec.task == task:
                return spec
        raise ConfigError(f"no head configured for task {task!r}")

    def validate(self):
        tasks = [h.task for h in self.heads]
        if len(set(tasks)) != len(tasks):
            raise ConfigError(f"heads: each task may appear once, got {tasks}")
        for task in self.train.tasks:
            self.head_for(task)
        if self.data.source == SYNTHETIC and KWS in tasks:
            n_kws = self.data.synthetic.n_keywords
            if self.head_for(KWS).head.output != CLASSES or self.head_for(KWS).head.n_out != n_kws:
                raise ConfigError(
                    f"heads[kws]: needs output 'classes' with n_out equal to "
                    f"data.synthetic.n_keywords ({n_kws})")
        if SV in tasks and self.head_for(SV).head.output != EMBEDDING:
            raise ConfigError("heads[sv]: output must be 'embedding'")
        self.data.validate()

    def to_dict(self):
        return {
            "sre": self.sre.to_dict(),
            "heads": [h.to_dict() for h in self.heads],
            "train": copy.deepcopy(self.train.to_dict()),
            "data": self.data.to_dict(),
            "seed": self.seed,
        }

    def canonical_json(self):
        return canonical_json(self.to_dict())

    @property
    def hash(self):
        return config_hash(self.to_dict())


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj):
    """SHA-256 hex digest of the canonical JSON form of a config mapping."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


# -- parsing ----------------------------------------------------------------------

def _coerce(value, default, path):
    """Convert a YAML scalar to the type of the field's default value."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path} must be true or false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        try:
            number = float(value)
        except ValueError:
            raise ConfigError(f"{path} must be an integer, got {value!r}") from None
        if number != int(number):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return int(number)
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        try:
            return float(value)        # YAML reads "1e-4" as a string
        except (TypeError, ValueError):
            raise ConfigError(f"{path} must be a number, got {value!r}") from None
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        items = list(value)
        if default:
            items = [_coerce(v, default[0], f"{path}[{i}]") for i, v in enumerate(items)]
        return type(default)(items)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a mapping, got {value!r}")
        sample = next(iter(default.values()), None)
        merged = dict(default)          # keys left out keep their defaults
        for k, v in value.items():
            merged[str(k)] = _coerce(v, sample, f"{path}.{k}") if sample is not None else v
        return merged
    return value


def _section(cls, raw, path, skip=()):
    """Build a config dataclass from a mapping, rejecting unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be a mapping, got {type(raw).__name__}")
    defaults = cls()
    known = {f.name for f in fields(cls) if f.name not in skip}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key '{path}.{key}'")
        kwargs[key] = _coerce(value, getattr(defaults, key), f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _heads(raw):
    if raw is None:
        return default_heads()
    if not isinstance(raw, list) or not raw:
        raise ConfigError("heads must be a non-empty list of head entries")
    out = []
    for i, entry in enumerate(raw):
        path = f"heads[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{path} must be a mapping")
        entry = dict(entry)
        task = entry.pop("task", None)
        if task not in (KWS, SV):
            raise ConfigError(f"{path}.task must be 'kws' or 'sv', got {task!r}")
        angular = entry.pop("angular_softmax", None)
        head = _section(HeadConfig, entry, path)
        spec = HeadSpec(task, head)
        if angular is not None:
            if head.output != EMBEDDING:
                raise ConfigError(f"{path}.angular_softmax applies only to embedding heads")
            spec.angular_softmax = _section(AngularSoftmaxConfig, angular, f"{path}.angular_softmax")
        out.append(spec)
    return out


def _data(raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("data must be a mapping")
    raw = dict(raw)
    synthetic = _section(SynthSpec, raw.pop("synthetic", None), "data.synthetic")
    data = _section(DataConfig, raw, "data", skip=("synthetic",))
    data.synthetic = synthetic
    return data


SECTIONS = ("sre", "heads", "train", "data", "seed")


def parse_config(document, env=None):
    """RunConfig from a parsed YAML mapping (``None`` means all defaults)."""
    env = os.environ if env is None else env
    document = {} if document is None else document
    if not isinstance(document, dict):
        raise ConfigError("config document must be a mapping of sections")
    for key in document:
        if key not in SECTIONS:
            raise ConfigError(f"unknown key '{key}' (sections: {', '.join(SECTIONS)})")
    seed = _coerce(document.get("seed", 7), 7, "seed")
    if env.get(SEED_ENV, "") != "":
        seed = _coerce(env[SEED_ENV], 7, SEED_ENV)
    cfg = RunConfig(
        sre=_section(SREConfig, document.get("sre"), "sre"),
        heads=_heads(document.get("heads")),
        train=_section(TrainConfig, document.get("train"), "train"),
        data=_data(document.get("data")),
        seed=seed,
    )
    cfg.validate()
    return cfg


def load_config(path, env=None):
    """Read and validate a YAML run config. Missing files raise ``OSError``."""
    with open(path) as fh:
        text = fh.read()
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(document, env)


def dump_config(cfg: RunConfig):
    """YAML text that parses back to an equal config."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
