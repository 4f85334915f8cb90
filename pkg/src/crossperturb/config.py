"""Run configuration: a flat key=value schema shared by config files and CLI flags.

Files hold one ``key=value`` pair per line ('#' comments and blank lines
allowed). Flags override file values, which override defaults. Unknown keys
are rejected before any work starts, and the effective configuration can be
echoed back out in a form that re-runs to identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .augment import AugmentConfig
from .model import CnnConfig
from .perturb import PerturbConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration key, value, or combination."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": lambda s: s.strip(),
    "int_list": _parse_int_list,
    "str_list": _parse_str_list,
}


@dataclass(frozen=True)
class _Key:
    kind: str
    default: object
    help: str


# Every tunable of the training, perturbation, augmentation, model, and
# dataset-generation surfaces. CLI flags carry the same names with '-' for '_'.
SCHEMA: dict[str, _Key] = {
    "seed": _Key("int", 0, "master seed for the run"),
    "epochs": _Key("int", 30, "training epochs"),
    "batch_size": _Key("int", 32, "minibatch size"),
    "lr0": _Key("float", 0.1, "initial learning rate (cosine-annealed to 0)"),
    "momentum": _Key("float", 0.9, "Nesterov momentum coefficient"),
    "weight_decay": _Key("float", 5e-4, "L2 weight decay"),
    "lambda": _Key("float", 5.0, "consistency loss weight"),
    "routes": _Key("str_list", ("O", "I", "F", "IF"), "enabled prediction routes"),
    "widths": _Key("int_list", (32, 64, 128), "conv block channel widths"),
    "insertion_points": _Key("str_list", ("after_block_2",),
                             "blocks after which feature perturbation applies"),
    "perturb_kind": _Key("str", "mixpatch", "feature perturbation: mixpatch, dsu, or mixstyle"),
    "perturb_scheme": _Key("str", "P2-UD-random", "patch split scheme"),
    "perturb_prob": _Key("float", 0.5, "per-batch probability of applying feature perturbation"),
    "perturb_eps": _Key("float", 1e-6, "variance stabilizer inside patch statistics"),
    "noise_enabled": _Key("bool", True, "Gaussian noise on shuffled patch statistics"),
    "shuffle_enabled": _Key("bool", True, "shuffle patch statistics within each channel"),
    "clamp_floor": _Key("float", 1e-4, "lower clamp for perturbed stds"),
    "mixstyle_alpha": _Key("float", 0.3, "Beta parameter for the statistic-mixing baseline"),
    "flip_prob": _Key("float", 0.5, "horizontal flip probability"),
    "brightness": _Key("float", 0.4, "brightness jitter strength"),
    "contrast": _Key("float", 0.4, "contrast jitter strength"),
    "saturation": _Key("float", 0.4, "saturation jitter strength"),
    "grayscale_prob": _Key("float", 0.1, "random grayscale probability"),
    "classes": _Key("int", 5, "number of shape classes"),
    "per_class": _Key("int", 100, "generated samples per class"),
    "size": _Key("int", 32, "image side length"),
    "domains": _Key("str_list", ("plain",), "domain names for dataset generation"),
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Validated, fully-resolved configuration for one CLI command."""

    def __init__(self, values: dict | None = None):
        self.values = {name: key.default for name, key in SCHEMA.items()}
        for name, value in (values or {}).items():
            self._set(name, value)

    def _set(self, name: str, value) -> None:
        if name not in SCHEMA:
            raise ConfigError(f"unknown configuration key {name!r}")
        self.values[name] = value

    def __getitem__(self, name: str):
        return self.values[name]

    def update_from_file(self, path) -> None:
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}")
            try:
                self.values[key] = _PARSERS[SCHEMA[key].kind](value.strip())
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None

    def update_from_flags(self, overrides: dict) -> None:
        """Apply explicitly-set CLI flags (values of None are ignored)."""
        for name, value in overrides.items():
            if value is None:
                continue
            if name not in SCHEMA:
                raise ConfigError(f"unknown configuration key {name!r}")
            if isinstance(value, str):
                value = _PARSERS[SCHEMA[name].kind](value)
            self.values[name] = value

    def echo_text(self) -> str:
        lines = [f"{name}={_format_value(self.values[name])}" for name in sorted(SCHEMA)]
        return "\n".join(lines) + "\n"

    # ---- typed views ----

    def perturb_config(self) -> PerturbConfig:
        return PerturbConfig(
            kind=self["perturb_kind"],
            scheme=self["perturb_scheme"],
            eps=self["perturb_eps"],
            apply_probability=self["perturb_prob"],
            noise_enabled=self["noise_enabled"],
            shuffle_enabled=self["shuffle_enabled"],
            clamp_floor=self["clamp_floor"],
            mixstyle_alpha=self["mixstyle_alpha"],
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            flip_probability=self["flip_prob"],
            brightness=self["brightness"],
            contrast=self["contrast"],
            saturation=self["saturation"],
            grayscale_probability=self["grayscale_prob"],
        )

    def model_config(self, classes: int | None = None, input_size: int | None = None) -> CnnConfig:
        return CnnConfig(
            widths=self["widths"],
            classes=classes if classes is not None else self["classes"],
            input_size=input_size if input_size is not None else self["size"],
            insertion_points=frozenset(self["insertion_points"]),
        )

    def train_config(self, classes: int | None = None, input_size: int | None = None) -> TrainConfig:
        return TrainConfig(
            lr0=self["lr0"],
            momentum=self["momentum"],
            weight_decay=self["weight_decay"],
            epochs=self["epochs"],
            batch_size=self["batch_size"],
            lam=self["lambda"],
            seed=self["seed"],
            routes=self["routes"],
            perturb=self.perturb_config(),
            augment=self.augment_config(),
            model=self.model_config(classes, input_size),
        )


def resolve_config(config_path, flag_overrides: dict) -> RunConfig:
    """Defaults <- config file <- explicit flags, validated."""
    cfg = RunConfig()
    if config_path is not None:
        cfg.update_from_file(config_path)
    cfg.update_from_flags(flag_overrides)
    return cfg
