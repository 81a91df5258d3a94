"""Flat ``key = value`` run configuration shared by every CLI command.

:data:`KEYS` is the single table of keys, defaults and help strings; both the
parser and ``--help`` read it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping

from .architectures import ARCH_ALIASES, NetConfig
from .data import DEFAULT_RATIOS, PhantomConfig
from .losses import LOSS_KINDS, DEFAULT_CLASS_WEIGHTS, LossParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _tuple(kind: Callable) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(kind(p) for p in parts)

    return parse


def _choice(options: Iterable[str]) -> Callable[[str], str]:
    options = tuple(options)

    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    parse: Callable[[str], Any]
    help: str


KEYS: tuple[Key, ...] = (
    # training
    Key("lr", 5e-5, float, "base Adam learning rate"),
    Key("lr_decay", 0.95, float, "staircase decay factor"),
    Key("decay_steps", 10000, int, "iterations per decay step"),
    Key("ema_decay", 0.9999, float, "parameter moving-average decay"),
    Key("ema_warmup", True, _bool, "cap EMA decay at (1+n)/(10+n)"),
    Key("beta1", 0.9, float, "Adam first-moment decay"),
    Key("beta2", 0.999, float, "Adam second-moment decay"),
    Key("adam_eps", 1e-8, float, "Adam denominator epsilon"),
    Key("batch", 8, int, "slices per worker per iteration"),
    Key("workers", 1, int, "data-parallel workers"),
    Key("iterations", 1000, int, "training iterations"),
    Key("checkpoint_every", 0, int, "write intermediate checkpoints every N iterations (0 = off)"),
    Key("seed", 0, int, "random seed for phantoms and training"),
    # network
    Key("arch", "res-unet", _choice(ARCH_ALIASES), "fcn8s-vgg | fcn8s-resnet | unet | res-unet"),
    Key("depth", 3, int, "down-sampling stages"),
    Key("base_width", 8, int, "channels at the first stage"),
    Key("input_size", 64, int, "slice extent (H = W)"),
    Key("skip_weights", (1.0, 2.0, 4.0), _tuple(float), "skip-add branch weights, deepest first"),
    Key("units_per_stage", 1, int, "residual units per encoder stage"),
    Key("bn_epsilon", 1e-5, float, "batch-norm epsilon"),
    Key("bn_momentum", 0.9, float, "batch-norm running-stat momentum"),
    # loss
    Key("loss", "hdice", _choice(LOSS_KINDS), "ce | wce | bootstrap | ss | dice | hdice"),
    Key("class_weights", DEFAULT_CLASS_WEIGHTS, _tuple(float), "weighted-CE class weights (sum to 1)"),
    Key("threshold", 0.9, float, "bootstrap probability threshold"),
    Key("ss_lambda", 0.5, float, "sensitivity/specificity balance"),
    Key("epsilon", 1e-5, float, "dice / ss smoothing epsilon"),
    Key("hdice_weights", (1 / 3, 1 / 3, 1 / 3), _tuple(float), "weights of the three nested dice terms"),
    Key("standard_dice", False, _bool, "use the factor-2 dice coefficient"),
    # phantoms
    Key("count", 16, int, "phantoms to generate"),
    Key("dims", (32, 64, 64), _tuple(int), "phantom extents D H W"),
    Key("ratios", DEFAULT_RATIOS, _tuple(float), "target class-frequency ratios, labels 0..4"),
    Key("tumor_count", 1, int, "tumors per phantom"),
    Key("noise", 0.25, float, "Gaussian intensity noise"),
)

_BY_NAME = {k.name: k for k in KEYS}


def experiment_fingerprint(arch: str, loss: str) -> str:
    return hashlib.sha256(f"{arch}|{loss}".encode()).hexdigest()[:12]


class RunConfig:
    """Resolved configuration values; unknown keys are rejected."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values = {k.name: k.default for k in KEYS}
        for name, v in (values or {}).items():
            if name not in _BY_NAME:
                raise ConfigError(f"unknown key {name!r}")
            self.values[name] = v
        self.validate()

    def __getitem__(self, name: str):
        return self.values[name]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    def fingerprint(self) -> str:
        """Identifies the experiment cell: architecture and loss only."""
        return experiment_fingerprint(self["arch"], self["loss"])

    def net_config(self) -> NetConfig:
        v = self.values
        return NetConfig.from_alias(
            v["arch"], depth=v["depth"], base_width=v["base_width"], input_size=v["input_size"],
            skip_weights=tuple(v["skip_weights"]), units_per_stage=v["units_per_stage"],
            bn_epsilon=v["bn_epsilon"], bn_momentum=v["bn_momentum"],
        )

    def loss_params(self) -> LossParams:
        v = self.values
        return LossParams(
            class_weights=tuple(v["class_weights"]), threshold=v["threshold"], ss_lambda=v["ss_lambda"],
            epsilon=v["epsilon"], hdice_weights=tuple(v["hdice_weights"]), standard_dice=v["standard_dice"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            base_lr=v["lr"], lr_decay=v["lr_decay"], decay_steps=v["decay_steps"], ema_decay=v["ema_decay"],
            ema_warmup=v["ema_warmup"], batch_per_worker=v["batch"], workers=v["workers"],
            max_iterations=v["iterations"], loss=v["loss"], loss_params=self.loss_params(),
            net=self.net_config(), seed=v["seed"], beta1=v["beta1"], beta2=v["beta2"],
            adam_eps=v["adam_eps"], checkpoint_every=v["checkpoint_every"],
        )

    def phantom_config(self, seed: int) -> PhantomConfig:
        v = self.values
        return PhantomConfig(seed=seed, dims=tuple(v["dims"]), ratios=tuple(v["ratios"]),
                             tumor_count=v["tumor_count"], noise=v["noise"])

    def validate(self) -> None:
        v = self.values
        for name in ("lr", "lr_decay", "ema_decay", "beta1", "beta2"):
            if not 0 < v[name] <= 1:
                raise ConfigError(f"{name}: must lie in (0, 1]")
        for name in ("workers", "batch", "count", "depth", "base_width", "decay_steps", "tumor_count",
                     "units_per_stage", "input_size"):
            if v[name] < 1:
                raise ConfigError(f"{name}: must be >= 1")
        for name in ("iterations", "checkpoint_every", "noise"):
            if v[name] < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if len(v["dims"]) != 3 or min(v["dims"]) < 1:
            raise ConfigError("dims: need three positive extents")
        if len(v["ratios"]) != 5 or min(v["ratios"]) <= 0:
            raise ConfigError("ratios: need five positive values")
        if len(v["skip_weights"]) != 3:
            raise ConfigError("skip_weights: need three weights")
        try:
            self.loss_params().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        try:
            self.net_config().validate()
        except ValueError as exc:
            raise ConfigError(f"arch: {exc}") from None

    def dumps(self) -> str:
        lines = []
        for k in KEYS:
            v = self.values[k.name]
            if isinstance(v, tuple):
                v = " ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_lines(lines: Iterable[str], source: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        name, value = (p.strip() for p in line.split("=", 1))
        if name not in _BY_NAME:
            raise ConfigError(f"unknown key {name!r} ({source}:{lineno})")
        try:
            out[name] = _BY_NAME[name].parse(value)
        except ValueError as exc:
            raise ConfigError(f"{name}: cannot parse {value!r}: {exc}") from None
    return out


def parse_config(text: str = "", overrides: Iterable[str] = ()) -> RunConfig:
    """Merge a config file's text with ``key=value`` overrides; overrides win."""
    values = _parse_lines(text.splitlines(), "config")
    values.update(_parse_lines(list(overrides), "override"))
    return RunConfig(values)


def describe_keys() -> str:
    width = max(len(k.name) for k in KEYS)
    rows = []
    for k in KEYS:
        d = " ".join(f"{x:g}" if isinstance(x, float) else str(x) for x in k.default) if isinstance(k.default, tuple) else k.default
        rows.append(f"  {k.name:<{width}}  {k.help} (default: {d})")
    return "configuration keys:\n" + "\n".join(rows)
