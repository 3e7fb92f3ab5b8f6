"""Flat ``key = value`` run configuration files."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        self.key, self.line = key, line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass
class RunConfig:
    embed_dim: int = 128
    window_t: int = 20
    memory_slots: int = 8
    layers: int = 2
    neg_samples: int = 5
    routing_iters: int = 3
    attention_scale: bool = True
    variant: str = "dman"
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 8
    seed: int = 0
    data_path: str = ""
    out_path: str = ""

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.__dict__)

    def estimator_params(self) -> dict:
        return self.model_config().to_dict()

    def dumps(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        values, seen = {}, {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown key {key!r}", key, lineno)
            if key in seen:
                raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", key, lineno)
            seen[key] = lineno
            values[key] = _convert(key, value, types[key], lineno)
        try:
            cfg = cls(**values)
            cfg.model_config()
        except ValueError as exc:
            key = next((k for k in values if k in str(exc)), None)
            raise ConfigError(str(exc), key, seen.get(key)) from exc
        return cfg

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _convert(key, value, kind, lineno):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"bad {kind} value {value!r} for {key!r}", key, lineno) from None
    return value
