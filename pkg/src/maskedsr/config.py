"""Model configuration and the sectioned key = value config files used by the CLI."""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field


@dataclass
class ModelConfig:
    scale: int = 4
    hr_size: int = 128
    prior_size: int = 32
    num_landmarks: int = 81
    parsing_classes: int = 4
    attention: bool = True
    reduction: int = 16
    # denoiser
    est_channels: int = 32
    est_depth: int = 5
    den_channels: int = 64
    # super-resolution
    sr_channels: int = 64
    coarse_blocks: int = 3
    prior_blocks: int = 2
    # critic
    critic_base: int = 64
    critic_depth: int = 5
    # feature extractors
    feature_widths: tuple = (16, 32, 64, 64)
    feature_seed: int = 1234
    embed_channels: int = 16
    embed_dim: int = 512

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.scale


def _coerce(value: str, hint):
    origin = typing.get_origin(hint)
    if hint is bool or hint == "bool":
        return value.strip().lower() in ("1", "true", "yes", "on")
    if hint is int or hint == "int":
        return int(value)
    if hint is float or hint == "float":
        return float(value)
    if hint is tuple or origin is tuple or hint == "tuple":
        parts = [p.strip() for p in value.strip("()[] ").split(",") if p.strip()]
        return tuple(_number(p) for p in parts)
    if isinstance(hint, str) and "None" in hint and value.strip().lower() in ("", "none"):
        return None
    if isinstance(hint, str) and hint.startswith("int"):
        return int(value)
    if isinstance(hint, str) and hint.startswith("float"):
        return float(value)
    return value


def _number(s: str):
    try:
        return int(s)
    except ValueError:
        return float(s)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def dataclass_from_section(cls, section: dict, base=None):
    """Build ``cls`` from string values, keeping ``base`` values for missing keys."""
    obj = base if base is not None else cls()
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    updates = {}
    for key, raw in section.items():
        key = key.replace("-", "_")
        if key not in hints:
            raise KeyError(f"unknown key {key!r} for {cls.__name__}")
        updates[key] = _coerce(raw, hints[key])
    return dataclasses.replace(obj, **updates)


def dataclass_to_section(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            continue
        out[f.name] = _format(value)
    return out


def read_ini(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    return {s: dict(parser[s]) for s in parser.sections()}


def write_ini(sections: dict[str, dict[str, str]]) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, values in sections.items():
        parser[name] = values
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
