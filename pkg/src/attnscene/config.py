"""Run configuration: ``section.key = value`` files plus ``--set`` overrides.

Sections are ``model``, ``features``, ``train`` and ``synth``. Values are
parsed as Python literals when possible (``(16, 32)``, ``0.2``, ``true``);
anything else is kept as a string. Tuple-valued keys also accept a bare
comma-separated list.
"""

from __future__ import annotations

import ast
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, ParameterError
from .features import FeatureConfig
from .model import ModelConfig
from .synth import SynthConfig
from .training import TrainConfig

log = logging.getLogger(__name__)

SECTIONS = {"model": ModelConfig, "features": FeatureConfig, "train": TrainConfig, "synth": SynthConfig}


def _coerce(raw: str, default, where: str):
    text = raw.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(default, str):
        return text.strip("\"'")
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if isinstance(default, tuple):
            return tuple(p.strip() for p in text.split(",") if p.strip())
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    if isinstance(default, tuple):
        return tuple(value) if isinstance(value, (list, tuple)) else (value,)
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {raw!r}")
    return value


def parse_assignments(lines, origin: str = "<overrides>") -> dict[str, dict[str, str]]:
    """``section.key = value`` lines into ``{section: {key: raw value}}``.

    Blank lines and ``#`` comments are ignored; a ``[section]`` header makes
    bare ``key = value`` lines belong to that section.
    """
    out: dict[str, dict[str, str]] = {}
    current = None
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{no}: expected 'section.key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." in key:
            section, key = key.split(".", 1)
        elif current is not None:
            section = current
        else:
            raise ConfigError(f"{origin}:{no}: key {key!r} has no section")
        out.setdefault(section, {})[key] = value
    return out


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @classmethod
    def build(cls, raw: dict[str, dict[str, str]] | None = None) -> "RunConfig":
        raw = raw or {}
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}; expected {sorted(SECTIONS)}")
        parts = {}
        for name, klass in SECTIONS.items():
            given = raw.get(name, {})
            if name == "model" and given.get("profile", "").strip().strip("\"'") == "full":
                defaults = ModelConfig.full()
            else:
                defaults = klass()
            known = {f.name for f in fields(klass)}
            bad = sorted(set(given) - known)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {bad}")
            values = asdict(defaults)
            for key, text in given.items():
                values[key] = _coerce(text, getattr(defaults, key), f"{name}.{key}")
            try:
                parts[name] = klass(**values)
            except (ParameterError, TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}] {exc}") from exc
        return cls(**parts)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        raw: dict[str, dict[str, str]] = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            raw = parse_assignments(text.splitlines(), str(path))
        for section, kv in parse_assignments(overrides, "--set").items():
            raw.setdefault(section, {}).update(kv)
        return cls.build(raw)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "features": asdict(self.features),
                "train": asdict(self.train), "synth": asdict(self.synth)}

    def lines(self) -> list[str]:
        """The fully resolved configuration, one ``section.key = value`` per line."""
        return [f"{s}.{k} = {v!r}" if isinstance(v, str) else f"{s}.{k} = {v}"
                for s, d in self.to_dict().items() for k, v in d.items()]

    def log(self, logger: logging.Logger = log) -> None:
        for line in self.lines():
            logger.info("config %s", line)
