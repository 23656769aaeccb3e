"""Run configuration: model dims, training settings and synthetic data.

Config files are flat ``key = value`` text, one pair per line, ``#`` starts
a comment. Every key belongs to exactly one of :class:`FusionConfig`,
:class:`TrainConfig` or :class:`SynthSpec`; missing keys keep the defaults.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

MODES = ("fundus_only", "oct_only", "concat_only", "lm_only", "gm_only", "full")


def _conv_out(n: int, k: int = 3, stride: int = 2, pad: int = 1) -> int:
    return (n + 2 * pad - k) // stride + 1


@dataclass(frozen=True)
class FusionConfig:
    fundus_input_hw: tuple[int, int] = (64, 64)
    oct_input_thw: tuple[int, int, int] = (8, 32, 32)
    c_x: int = 8
    h_x: int = 4
    w_x: int = 4
    t_y: int = 4
    c_y: int = 4
    h_y: int = 4
    w_y: int = 4
    fundus_mid_channels: int = 4
    oct_temporal_kernel: int = 3
    tau_L: float = 6.0
    tau_G: float = 4.0
    fused_width: int = 1024
    num_classes: int = 3
    dtype: str = "float64"

    @property
    def d_x(self) -> int:
        return self.c_x * self.h_x

    @property
    def s_y(self) -> int:
        return self.c_y * self.h_y

    @property
    def oct_temporal_stride(self) -> int:
        return self.oct_input_thw[0] // self.t_y

    def fundus_stage_hw(self) -> list[tuple[int, int]]:
        """Spatial size after each stride-2 stage of the toy fundus encoder."""
        h, w = self.fundus_input_hw
        h1, w1 = _conv_out(h), _conv_out(w)
        return [(h1, w1), (_conv_out(h1), _conv_out(w1))]

    def oct_stage_hw(self) -> tuple[int, int]:
        _, h, w = self.oct_input_thw
        return _conv_out(h), _conv_out(w)

    def validate(self) -> None:
        if not self.tau_L > 0 or not self.tau_G > 0:
            raise ConfigError(f"temperatures must be positive (tau_L={self.tau_L}, tau_G={self.tau_G})")
        if self.fused_width < 1:
            raise ConfigError(f"fused_width must be >= 1, got {self.fused_width}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("c_x", "h_x", "w_x", "t_y", "c_y", "h_y", "w_y", "fundus_mid_channels", "oct_temporal_kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        fh, fw = self.fundus_stage_hw()[-1]
        if fh < self.h_x or fw < self.w_x:
            raise ConfigError(
                f"fundus_input_hw {self.fundus_input_hw} reduces to {fh}x{fw}, smaller than h_x x w_x = {self.h_x}x{self.w_x}"
            )
        oh, ow = self.oct_stage_hw()
        if oh < self.h_y or ow < self.w_y:
            raise ConfigError(
                f"oct_input_thw {self.oct_input_thw} reduces to {oh}x{ow}, smaller than h_y x w_y = {self.h_y}x{self.w_y}"
            )
        t = self.oct_input_thw[0]
        if t % self.t_y:
            raise ConfigError(f"oct slice count {t} must be a multiple of t_y={self.t_y}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 0.001
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    fundus_crop: bool = True
    fundus_hflip: bool = True
    fundus_vflip: bool = True
    fundus_rotate: bool = True
    oct_crop: bool = True
    oct_hflip: bool = True
    fundus_crop_min_scale: float = 0.8
    oct_crop_fraction: float = 0.9

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if not 0 < self.fundus_crop_min_scale <= 1 or not 0 < self.oct_crop_fraction <= 1:
            raise ConfigError("crop fractions must lie in (0, 1]")


@dataclass(frozen=True)
class SynthSpec:
    samples_per_class: int = 8
    mu_f: float = 1.0
    mu_o: float = 1.0
    sigma: float = 1.0
    synth_seed: int = 0

    def validate(self) -> None:
        if self.samples_per_class < 1:
            raise ConfigError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if self.mu_f < 0 or self.mu_o < 0:
            raise ConfigError("signal strengths mu_f, mu_o must be >= 0")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class RunConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def validate(self) -> None:
        self.fusion.validate()
        self.train.validate()
        self.synth.validate()


PAPER_SCALE = FusionConfig(
    fundus_input_hw=(1024, 1024),
    oct_input_thw=(256, 384, 384),
    c_x=2048,
    h_x=14,
    w_x=14,
    t_y=32,
    c_y=512,
    h_y=12,
    w_y=12,
    fundus_mid_channels=64,
)

PRESETS = {"toy": RunConfig(), "paper": RunConfig(fusion=PAPER_SCALE)}

_SECTIONS = {"fusion": FusionConfig, "train": TrainConfig, "synth": SynthSpec}
KEYS: dict[str, tuple[str, dataclasses.Field]] = {
    f.name: (section, f) for section, cls in _SECTIONS.items() for f in fields(cls)
}
_HINTS = {section: typing.get_type_hints(cls) for section, cls in _SECTIONS.items()}


def _parse_value(raw: str, hint):
    origin = typing.get_origin(hint)
    if origin is tuple:
        parts = [p.strip() for p in raw.replace("x", ",").split(",") if p.strip()]
        args = typing.get_args(hint)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated integers")
        return tuple(int(p) for p in parts)
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    return hint(raw)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_config_text(text: str, source: str = "<string>", base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    updates: dict[str, dict] = {s: {} for s in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section, _ = KEYS[key]
        try:
            updates[section][key] = _parse_value(raw, _HINTS[section][key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {raw!r} ({exc})") from None
    run = RunConfig(
        fusion=dataclasses.replace(base.fusion, **updates["fusion"]),
        train=dataclasses.replace(base.train, **updates["train"]),
        synth=dataclasses.replace(base.synth, **updates["synth"]),
    )
    run.validate()
    return run


def load_config(path_or_preset: str | os.PathLike | None) -> RunConfig:
    """Load a config file, or a preset name (``toy``/``paper``); None gives the toy defaults."""
    if path_or_preset is None:
        run = PRESETS["toy"]
    elif str(path_or_preset) in PRESETS:
        run = PRESETS[str(path_or_preset)]
    else:
        path = Path(path_or_preset)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        run = parse_config_text(path.read_text(), source=str(path))
    return apply_env(run)


def apply_env(run: RunConfig) -> RunConfig:
    """Apply the ELF_SEED override to the training and synthesis seeds."""
    raw = os.environ.get("ELF_SEED")
    if raw is None:
        return run
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"ELF_SEED must be an integer, got {raw!r}") from None
    return dataclasses.replace(
        run,
        train=dataclasses.replace(run.train, seed=seed),
        synth=dataclasses.replace(run.synth, synth_seed=seed),
    )


def render_config(run: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(run, section)
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
