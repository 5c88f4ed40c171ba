"""Line-oriented ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Lists are comma separated. Every
key is validated when parsed, and errors carry the source line.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .data import DEFAULT_MEAN, DEFAULT_STD, AugmentConfig
from .nn import EncoderConfig
from .train import REGIMES, TrainConfig


class ConfigParseError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(item: Callable[[str], Any]) -> Callable[[str], list]:
    def parse(text: str) -> list:
        return [item(part.strip()) for part in text.split(",") if part.strip()]

    return parse


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 <= v <= 1


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""


KEYS: dict[str, _Key] = {
    "regime": _Key(str, "srcl", lambda v: v in REGIMES, "regime in {" + ", ".join(REGIMES) + "}"),
    "labeled_fraction": _Key(float, 0.2, lambda v: 0 < v <= 1, "0 < labeled_fraction <= 1"),
    "seed": _Key(int, 0, lambda v: 0 <= v < 2**64, "0 <= seed < 2^64"),
    # data
    "data_dir": _Key(str, ""),
    "labels_csv": _Key(str, ""),
    "class_names": _Key(_list(str), []),
    "num_images": _Key(int, 3000, _positive, "num_images > 0"),
    "num_classes": _Key(int, 4, lambda v: v >= 2, "num_classes >= 2"),
    "image_size": _Key(int, 32, lambda v: v >= 4, "image_size >= 4"),
    "imbalance_ratio": _Key(float, 34.85, lambda v: v >= 1, "imbalance_ratio >= 1"),
    "split": _Key(_list(float), [0.7, 0.1, 0.2], lambda v: len(v) == 3 and abs(sum(v) - 1) <= 1e-6 and min(v) >= 0,
                  "three non-negative split fractions summing to 1"),
    # model
    "conv_channels": _Key(_list(int), [8, 16, 32], lambda v: len(v) > 0 and min(v) > 0, "positive channel counts"),
    "kernel_size": _Key(int, 3, _positive, "kernel_size > 0"),
    "stride": _Key(int, 2, _positive, "stride > 0"),
    "projection_dims": _Key(_list(int), [100, 50, 25], lambda v: len(v) > 0 and min(v) > 0, "positive widths"),
    # training
    "epochs_pre": _Key(int, 100, _nonneg, "epochs_pre >= 0"),
    "epochs_down": _Key(int, 100, _positive, "epochs_down > 0"),
    "warmup": _Key(int, 20, _nonneg, "warmup >= 0"),
    "batch_size": _Key(int, 20, lambda v: v >= 2, "batch_size >= 2"),
    "tau": _Key(float, 0.1, _positive, "tau > 0"),
    "lambda_sup": _Key(float, 1.0, _nonneg, "lambda_sup >= 0"),
    "lambda_con": _Key(float, 1.0, _nonneg, "lambda_con >= 0"),
    "lambda_src": _Key(float, 1.0, _nonneg, "lambda_src >= 0"),
    "optimizer": _Key(str, "adam", lambda v: v in ("adam", "sgd"), "optimizer in {adam, sgd}"),
    "lr": _Key(float, 1e-3, _positive, "lr > 0"),
    "beta1": _Key(float, 0.9, lambda v: 0 <= v < 1, "0 <= beta1 < 1"),
    "beta2": _Key(float, 0.999, lambda v: 0 <= v < 1, "0 <= beta2 < 1"),
    "eps": _Key(float, 1e-8, _positive, "eps > 0"),
    "alpha": _Key(float, 0.99, _unit, "0 <= alpha <= 1"),
    "ema_granularity": _Key(str, "epoch", lambda v: v in ("epoch", "step"), "ema_granularity in {epoch, step}"),
    "supervised_loss": _Key(str, "mse", lambda v: v in ("mse", "ce"), "supervised_loss in {mse, ce}"),
    "log_wall_time": _Key(_bool, False),
    # augmentation
    "crop_min": _Key(float, 0.6, lambda v: 0 < v <= 1, "0 < crop_min <= 1"),
    "crop_max": _Key(float, 1.0, lambda v: 0 < v <= 1, "0 < crop_max <= 1"),
    "brightness": _Key(float, 0.4, _nonneg, "brightness >= 0"),
    "contrast": _Key(float, 0.4, _nonneg, "contrast >= 0"),
    "saturation": _Key(float, 0.4, _nonneg, "saturation >= 0"),
    "grayscale_probability": _Key(float, 0.2, _unit, "0 <= grayscale_probability <= 1"),
    "norm_mean": _Key(_list(float), list(DEFAULT_MEAN)),
    "norm_std": _Key(_list(float), list(DEFAULT_STD), lambda v: len(v) > 0 and min(v) > 0, "norm_std > 0"),
    # sweep
    "fractions": _Key(_list(float), [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0],
                      lambda v: len(v) > 0 and all(0 < f <= 1 for f in v), "fractions within (0, 1]"),
    "regimes": _Key(_list(str), ["supervised", "src", "srcl", "srcl-joint"],
                    lambda v: len(v) > 0 and all(r in REGIMES for r in v), "regimes drawn from " + ", ".join(REGIMES)),
    "sweep_seeds": _Key(_list(int), [], lambda v: all(s >= 0 for s in v), "non-negative seeds"),
    "jobs": _Key(int, 1, _positive, "jobs > 0"),
}


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v.default for k, v in KEYS.items()})

    def __getattr__(self, name: str):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def encoder(self) -> EncoderConfig:
        k, s = self.kernel_size, self.stride
        return EncoderConfig(
            input_size=self.image_size,
            input_channels=len(self.norm_mean),
            conv_blocks=tuple((c, k, s) for c in self.conv_channels),
            projection_dims=tuple(self.projection_dims),
        )

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(
            crop_scale_range=(self.crop_min, self.crop_max),
            brightness=self.brightness,
            contrast=self.contrast,
            saturation=self.saturation,
            grayscale_probability=self.grayscale_probability,
            mean=tuple(self.norm_mean),
            std=tuple(self.norm_std),
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        names = (
            "epochs_pre epochs_down warmup batch_size tau lambda_sup lambda_con lambda_src optimizer lr "
            "beta1 beta2 eps alpha ema_granularity supervised_loss log_wall_time"
        ).split()
        kwargs = {n: self.values[n] for n in names}
        return TrainConfig(seed=self.seed if seed is None else seed, encoder=self.encoder, augment=self.augment, **kwargs)


def _assign(values: dict, key: str, raw: str, where: str) -> None:
    spec = KEYS.get(key)
    if spec is None:
        raise ConfigParseError(f"{where}: unknown key {key!r}")
    try:
        value = spec.parse(raw)
    except ValueError as exc:
        raise ConfigParseError(f"{where}: {key} = {raw!r} is not a valid {spec.parse.__name__} ({exc})") from None
    if spec.check is not None and not spec.check(value):
        raise ConfigParseError(f"{where}: {key} = {raw} violates constraint {spec.rule}")
    values[key] = value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        _assign(values, key, raw, f"{source}:{lineno}")
    return values


def parse_config(path: str | Path | None = None, overrides: Mapping[str, str] | Sequence[tuple[str, str]] = ()) -> RunConfig:
    """Read the file (if any), then apply string overrides, then validate cross-key rules."""
    cfg = RunConfig()
    if path is not None:
        cfg.values.update(parse_config_text(Path(path).read_text(), str(path)))
    items = overrides.items() if isinstance(overrides, Mapping) else overrides
    for key, raw in items:
        _assign(cfg.values, key, str(raw), "override")
    if cfg.crop_min > cfg.crop_max:
        raise ConfigParseError("crop_min must not exceed crop_max")
    if len(cfg.norm_mean) != len(cfg.norm_std):
        raise ConfigParseError("norm_mean and norm_std must have equal length")
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigParseError(str(exc)) from None
    return cfg
