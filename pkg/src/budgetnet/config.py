"""Hyperparameter records and the ``key = value`` config file format.

A config file is flat text, one ``key = value`` per line, ``#`` starts a
comment. Values are ints, floats, ``true``/``false``, ``none``, bare strings,
or bracketed lists such as ``residual_blocks = [4, 4, 3]``. Key names follow
the rows of the hyperparameter table they were taken from.
"""

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from budgetnet.errors import ConfigError

INPUT_SIZE = 32
PARAM_BUDGET = 5_000_000
DATA_DIR_ENV = "BUDGETNET_DATA_DIR"


def avgpool_kernel(n_layers):
    """Final average-pool window for 32x32 inputs halved once per extra layer."""
    if not 1 <= n_layers <= 5:
        raise ConfigError(f"residual_layers must be in 1..5 for 32x32 inputs, got {n_layers}")
    p, rem = divmod(INPUT_SIZE, 2 ** (n_layers - 1))
    if rem or p < 1:
        raise ConfigError(f"residual_layers={n_layers} gives a non-integer pool kernel")
    return p


@dataclass
class ResNetConfig:
    n_layers: int
    blocks: list
    channels: list
    conv_kernels: list
    skip_kernels: list
    pool_kernel: int = None
    se_enabled: bool = False
    se_ratio: int = 16
    dropout_p: float = 0.0
    num_classes: int = 10

    def __post_init__(self):
        if self.pool_kernel is None and isinstance(self.n_layers, int) and 1 <= self.n_layers <= 5:
            self.pool_kernel = avgpool_kernel(self.n_layers)
        self.validate()

    def validate(self):
        n = self.n_layers
        if not isinstance(n, int) or not 1 <= n <= 4:
            raise ConfigError(f"residual_layers: must be an integer in 1..4, got {n!r}")
        for name in ("blocks", "channels", "conv_kernels", "skip_kernels"):
            values = getattr(self, name)
            if not isinstance(values, (list, tuple)) or len(values) != n:
                raise ConfigError(f"{name}: expected a list of {n} entries, got {values!r}")
            if any(not isinstance(v, int) or v < 1 for v in values):
                raise ConfigError(f"{name}: entries must be positive integers, got {values!r}")
        for name in ("conv_kernels", "skip_kernels"):
            if any(v % 2 == 0 for v in getattr(self, name)):
                raise ConfigError(f"{name}: kernel sizes must be odd, got {getattr(self, name)!r}")
        if self.pool_kernel != avgpool_kernel(n):
            raise ConfigError(
                f"pool_kernel: {self.pool_kernel} does not match 32/2^(N-1) = {avgpool_kernel(n)}"
            )
        if self.se_enabled:
            if not isinstance(self.se_ratio, int) or self.se_ratio < 1:
                raise ConfigError(f"se_ratio: must be a positive integer, got {self.se_ratio!r}")
            bad = [c for c in self.channels if c % self.se_ratio]
            if bad:
                raise ConfigError(f"se_ratio: {self.se_ratio} does not divide channels {bad}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p: must be in [0, 1), got {self.dropout_p}")
        if not isinstance(self.num_classes, int) or self.num_classes < 1:
            raise ConfigError(f"num_classes: must be a positive integer, got {self.num_classes!r}")


@dataclass
class TrainConfig:
    model: ResNetConfig
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    schedule: dict = field(default_factory=lambda: {"kind": "cosine"})
    lookahead: bool = False
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    grad_clip: float = None
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    init: str = "he"
    normal_std: float = 0.01
    augment: bool = True
    normalize: bool = True
    data_dir: str = None
    workers: int = 0
    output_dir: str = "runs/default"
    subset: int = None
    enforce_budget: bool = False
    wall_clock: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer: must be sgd or adam, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr: must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum: must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be non-negative")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"gradient_clip: must be positive, got {self.grad_clip}")
        if self.lookahead_k < 1 or not 0.0 < self.lookahead_alpha <= 1.0:
            raise ConfigError("lookahead: need k >= 1 and alpha in (0, 1]")
        if self.init not in ("he", "xavier", "normal"):
            raise ConfigError(f"init: must be he, xavier or normal, got {self.init!r}")
        if self.workers < 0:
            raise ConfigError("workers: must be non-negative")
        if self.subset is not None and self.subset < 1:
            raise ConfigError("subset: must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must fit in 64 bits")

    def resolved_data_dir(self):
        return os.environ.get(DATA_DIR_ENV) or self.data_dir


# --- text format -----------------------------------------------------------

_MODEL_KEYS = {
    "residual_layers": "n_layers",
    "residual_blocks": "blocks",
    "channels": "channels",
    "conv_kernel_sizes": "conv_kernels",
    "shortcut_kernel_sizes": "skip_kernels",
    "avg_pool_kernel_size": "pool_kernel",
    "squeeze_excitation": "se_enabled",
    "se_ratio": "se_ratio",
    "dropout": "dropout_p",
    "num_classes": "num_classes",
}

_TRAIN_KEYS = {
    "optimizer": "optimizer",
    "lr": "lr",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "adam_betas": "adam_betas",
    "adam_eps": "adam_eps",
    "lookahead": "lookahead",
    "lookahead_k": "lookahead_k",
    "lookahead_alpha": "lookahead_alpha",
    "gradient_clip": "grad_clip",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "init": "init",
    "normal_std": "normal_std",
    "data_augmentation": "augment",
    "data_normalization": "normalize",
    "data_dir": "data_dir",
    "number_of_workers": "workers",
    "output_dir": "output_dir",
    "subset": "subset",
    "enforce_budget": "enforce_budget",
    "wall_clock": "wall_clock",
}

_SCHEDULE_KEYS = (
    "t_max", "eta_min", "step_size", "gamma", "milestones", "max_lr", "pct_start",
    "div_factor", "final_div_factor", "total_steps", "t_0", "t_mult",
)

_SCHEDULER_NAMES = {
    "cosineannealinglr": "cosine",
    "steplr": "step",
    "multisteplr": "multistep",
    "exponentiallr": "exponential",
    "onecyclelr": "onecycle",
    "cosineannealingwarmrestarts": "cosine_warm_restarts",
}


def parse_value(text):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError(f"unterminated list: {text!r}")
        inner = text[1:-1].strip()
        return [parse_value(v) for v in inner.split(",")] if inner else []
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if low in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text):
    """Parse config text into an ordered ``{key: value}`` dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().lower()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def config_from_dict(values):
    values = dict(values)
    model_kw, train_kw, sched = {}, {}, {}
    if values.pop("batch_normalization", True) is not True:
        raise ConfigError("batch_normalization: only true is supported")
    for key, value in values.items():
        if key in _MODEL_KEYS:
            model_kw[_MODEL_KEYS[key]] = value
        elif key in _TRAIN_KEYS:
            train_kw[_TRAIN_KEYS[key]] = value
        elif key == "workers":
            train_kw["workers"] = value
        elif key == "lr_scheduler":
            sched["kind"] = _SCHEDULER_NAMES.get(str(value).lower(), str(value).lower())
        elif key in _SCHEDULE_KEYS:
            sched[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for required in ("n_layers", "blocks", "channels", "conv_kernels", "skip_kernels"):
        if required not in model_kw:
            inverse = {v: k for k, v in _MODEL_KEYS.items()}
            raise ConfigError(f"missing config key {inverse[required]!r}")
    if "dropout_p" in model_kw:
        model_kw["dropout_p"] = float(model_kw["dropout_p"])
    if "adam_betas" in train_kw:
        train_kw["adam_betas"] = tuple(float(b) for b in train_kw["adam_betas"])
    for k in ("lr", "momentum", "weight_decay", "adam_eps", "lookahead_alpha", "normal_std"):
        if k in train_kw:
            train_kw[k] = float(train_kw[k])
    if train_kw.get("grad_clip") is not None:
        train_kw["grad_clip"] = float(train_kw["grad_clip"])
    sched.setdefault("kind", "cosine")
    model = ResNetConfig(**model_kw)
    return TrainConfig(model=model, schedule=sched, **train_kw)


def loads(text):
    return config_from_dict(parse_text(text))


def load(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return loads(text)


def dumps(config):
    """Serialise a TrainConfig; ``loads(dumps(c)) == c``."""
    m = config.model
    lines = []
    for key, attr in _MODEL_KEYS.items():
        lines.append(f"{key} = {format_value(getattr(m, attr))}")
    lines.append("batch_normalization = true")
    for key, attr in _TRAIN_KEYS.items():
        lines.append(f"{key} = {format_value(getattr(config, attr))}")
    sched = dict(config.schedule)
    lines.append(f"lr_scheduler = {sched.pop('kind')}")
    for key in _SCHEDULE_KEYS:
        if key in sched:
            lines.append(f"{key} = {format_value(sched[key])}")
    return "\n".join(lines) + "\n"


def replace(config, **changes):
    """Copy of ``config`` with top-level TrainConfig fields changed."""
    out = dataclasses.replace(config, model=dataclasses.replace(config.model), schedule=dict(config.schedule))
    for k, v in changes.items():
        setattr(out, k, v)
    out.validate()
    return out
