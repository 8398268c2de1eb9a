"""Line-oriented ``section.key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .blocks import BlockConfig
from .model import AblationFlags
from .scenes import SceneConfig
from .training import OptimConfig


@dataclass
class RunSettings:
    precision: str = "float32"
    deterministic: bool = True
    detach_warp: bool = False
    data_dir: str = ""
    eval_dir: str = ""
    out_dir: str = ""


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: BlockConfig = field(default_factory=BlockConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self) -> None:
        self.scene.validate()
        self.model.validate()
        self.optim.validate()
        self.ablation.validate()
        if self.run.precision not in ("float32", "float64"):
            raise ValueError("run.precision must be float32 or float64")
        if self.scene.image_h // self.model.stride != self.model.tokens_h or (
            self.scene.image_w // self.model.stride != self.model.tokens_w
        ):
            raise ValueError(
                f"model.tokens_h/w must equal image size / {self.model.stride} "
                f"({self.scene.image_h // self.model.stride}x{self.scene.image_w // self.model.stride})"
            )


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or "." not in key:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        section, name = key.split(".", 1)
        target = getattr(cfg, section, None) if section in {f.name for f in dataclasses.fields(cfg)} else None
        if target is None or name not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            setattr(target, name, _parse_value(raw, getattr(target, name)))
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in dataclasses.fields(cfg):
        obj = getattr(cfg, section.name)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{section.name}.{f.name} = {v}")
    return "\n".join(lines) + "\n"


def write_config_echo(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
