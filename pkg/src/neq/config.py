"""Experiment configuration.

Config files are TOML with the sections ``[model]``, ``[data]``, ``[train]``,
``[freeze]`` and ``[run]``.  Every key maps onto a :class:`TrainConfig` field
of the same name; unknown keys are errors.
"""

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


SECTIONS = {
    "model": ("arch", "widths", "blocks", "batchnorm"),
    "data": ("source", "kind", "n", "noise", "image_size", "classes", "data_seed",
             "train_images", "train_labels", "test_images", "test_labels",
             "test_fraction", "normalize", "hflip"),
    "train": ("epochs", "batch_size", "optimizer", "lr", "momentum", "weight_decay",
              "beta1", "beta2", "adam_eps", "milestones", "lr_divisor"),
    "freeze": ("policy", "mu_eq", "epsilon", "probe_size", "p", "replay_file"),
    "run": ("seed", "output_dir", "precision", "diagnostics", "checkpoint",
            "include_optimizer_flops"),
}


@dataclass
class TrainConfig:
    # model
    arch: str = "smallcnn"
    widths: list = field(default_factory=lambda: [8, 16])
    blocks: int = 1
    batchnorm: bool = True
    # data
    source: str = "synthetic"
    kind: str = "rings-image"
    n: int = 10000
    noise: float = 0.15
    image_size: int = 8
    classes: int = 4
    data_seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    test_fraction: float = 0.2
    normalize: bool = True
    hflip: bool = False
    # train
    epochs: int = 60
    batch_size: int = 100
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    milestones: list = field(default_factory=lambda: [24, 36])
    lr_divisor: object = 10.0
    # freeze
    policy: str = "neq"
    mu_eq: float = 0.5
    epsilon: float = 0.001
    probe_size: int = 50
    p: float = 0.0
    replay_file: str = ""
    # run
    seed: int = 0
    output_dir: str = ""
    precision: str = "float32"
    diagnostics: bool = False
    checkpoint: bool = False
    include_optimizer_flops: bool = True

    def schedule_pairs(self):
        divs = self.lr_divisor
        if not isinstance(divs, (list, tuple)):
            divs = [divs] * len(self.milestones)
        return [(int(m), float(d)) for m, d in zip(self.milestones, divs)]

    def validate(self):
        _check(self.arch in ("mlp", "smallcnn", "smallresnet"), "arch",
               f"unknown architecture {self.arch!r}")
        _check(all(isinstance(w, int) and w >= 1 for w in self.widths), "widths",
               "must be positive integers")
        _check(self.blocks >= 1, "blocks", "must be >= 1")
        _check(self.source in ("synthetic", "idx"), "source", "must be 'synthetic' or 'idx'")
        if self.source == "synthetic":
            _check(self.kind in ("rings", "moons", "rings-image", "moons-image"), "kind",
                   f"unknown synthetic kind {self.kind!r}")
            _check(self.n >= 0, "n", "must be >= 0")
            _check(self.noise >= 0, "noise", "must be >= 0")
            _check(self.image_size >= 2, "image_size", "must be >= 2")
            _check(self.classes >= 2, "classes", "must be >= 2")
        else:
            _check(bool(self.train_images), "train_images", "missing dataset path")
            _check(bool(self.train_labels), "train_labels", "missing dataset path")
            _check(bool(self.test_images) == bool(self.test_labels), "test_images",
                   "test images and labels must be given together")
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                val = getattr(self, key)
                _check(not val or Path(val).is_file(), key, f"file not found: {val}")
        _check(0.0 < self.test_fraction < 1.0, "test_fraction", "must lie in (0, 1)")
        _check(self.epochs >= 1, "epochs", "must be >= 1")
        _check(self.batch_size >= 1, "batch_size", "must be >= 1")
        _check(self.optimizer in ("sgd", "adam"), "optimizer", "must be 'sgd' or 'adam'")
        _check(self.lr >= 0, "lr", "must be >= 0")
        _check(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        _check(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        _check(0 <= self.beta1 < 1, "beta1", "must lie in [0, 1)")
        _check(0 <= self.beta2 < 1, "beta2", "must lie in [0, 1)")
        _check(self.adam_eps > 0, "adam_eps", "must be > 0")
        ms = list(self.milestones)
        _check(all(isinstance(m, int) and m >= 1 for m in ms), "milestones", "must be positive integers")
        _check(all(a < b for a, b in zip(ms, ms[1:])), "milestones", "must be strictly increasing")
        if isinstance(self.lr_divisor, (list, tuple)):
            _check(len(self.lr_divisor) == len(ms), "lr_divisor", "needs one divisor per milestone")
            divs = self.lr_divisor
        else:
            divs = [self.lr_divisor]
        _check(all(isinstance(d, (int, float)) and d > 0 for d in divs), "lr_divisor", "must be > 0")
        _check(self.policy in ("neq", "stochastic", "none", "replay"), "policy",
               "must be one of neq, stochastic, none, replay")
        _check(0 <= self.mu_eq < 1, "mu_eq", "must lie in [0, 1)")
        _check(self.epsilon >= 0, "epsilon", "must be >= 0")
        _check(self.probe_size >= 1, "probe_size", "must be >= 1")
        _check(0 <= self.p <= 1, "p", "must lie in [0, 1]")
        if self.policy == "replay":
            _check(bool(self.replay_file), "replay_file", "required for the replay policy")
        _check(self.precision in ("float32", "float64"), "precision", "must be float32 or float64")
        return self


def _check(ok, name, message):
    if not ok:
        raise ConfigError(name, message)


_FIELD_TYPES = {f.name: f for f in fields(TrainConfig)}
_KEY_SECTION = {k: s for s, keys in SECTIONS.items() for k in keys}


def _coerce(name, value):
    default = getattr(TrainConfig(), name)
    if name == "lr_divisor":
        if isinstance(value, list):
            return [float(v) for v in value]
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(name, f"expected a string, got {value!r}")
    return value


def config_from_mapping(data, base=None):
    cfg = asdict(base) if base is not None else asdict(TrainConfig())
    for section, body in data.items():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(section, "expected a table")
        for key, value in body.items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            cfg[key] = _coerce(key, value)
    return TrainConfig(**cfg)


def parse_config(path, overrides=None):
    """Read, merge ``overrides`` (field -> value), and validate a config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"malformed TOML: {exc}") from None
    cfg = config_from_mapping(data)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    base = path.parent
    for key in ("train_images", "train_labels", "test_images", "test_labels", "replay_file"):
        val = getattr(cfg, key)
        if val and not Path(val).is_absolute():
            setattr(cfg, key, str(base / val))
    return cfg.validate()


def apply_overrides(cfg, overrides):
    values = asdict(cfg)
    for key, value in overrides.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, value)
    return TrainConfig(**values)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_config(cfg):
    """Resolved config as TOML text, every field present, sections in fixed order."""
    lines = []
    for section, keys in SECTIONS.items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_toml_value(getattr(cfg, key))}")
    return "\n".join(lines) + "\n"
