"""Declarative run configuration (JSON) with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .asr import ASRConfig
from .chain import ChainConfig
from .dsp import DSPConfig
from .tts import TTSConfig

SECTIONS = {"dsp": DSPConfig, "asr": ASRConfig, "tts": TTSConfig, "chain": ChainConfig}
DATA_KEYS = ("paired", "speech", "text", "dev", "test")


class ConfigError(ValueError):
    """Carries every violation found, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class RunConfig:
    dsp: DSPConfig = field(default_factory=DSPConfig)
    asr: ASRConfig = field(default_factory=ASRConfig)
    tts: TTSConfig = field(default_factory=TTSConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    data: dict = field(default_factory=dict)
    out: str = ""
    seed: int = 0

    def validate(self) -> list:
        errors = []
        for name in SECTIONS:
            errors.extend(getattr(self, name).validate())
        if self.asr.input_dim != self.dsp.n_mels:
            errors.append(f"asr.input_dim ({self.asr.input_dim}) must equal dsp.n_mels "
                          f"({self.dsp.n_mels})")
        if self.tts.mel_dim != self.dsp.n_mels:
            errors.append(f"tts.mel_dim ({self.tts.mel_dim}) must equal dsp.n_mels")
        if self.tts.linear_dim != self.dsp.n_bins:
            errors.append(f"tts.linear_dim ({self.tts.linear_dim}) must equal the "
                          f"{self.dsp.n_bins} FFT bins")
        if self.chain.synth_max_frames % max(self.tts.reduction, 1):
            errors.append("chain.synth_max_frames must be a multiple of tts.reduction")
        return errors

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d.update(data=dict(self.data), out=self.out, seed=self.seed)
        return d

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def from_dict(d: dict, base_dir=None) -> RunConfig:
    """Build and validate a config; unknown keys and bad values are all
    reported together.  Relative data paths resolve against ``base_dir``."""
    errors = []
    if not isinstance(d, dict):
        raise ConfigError(["top level must be an object"])
    known = set(SECTIONS) | {"data", "out", "seed"}
    errors.extend(f"unknown key {k!r}" for k in sorted(set(d) - known))
    sections = {}
    for name, cls in SECTIONS.items():
        sub = d.get(name, {})
        if not isinstance(sub, dict):
            errors.append(f"{name} must be an object")
            sub = {}
        allowed = {f.name for f in fields(cls)}
        errors.extend(f"unknown key '{name}.{k}'" for k in sorted(set(sub) - allowed))
        try:
            sections[name] = cls(**{k: v for k, v in sub.items() if k in allowed})
        except (TypeError, ValueError) as exc:
            errors.append(f"{name}: {exc}")
            sections[name] = cls()
    data = d.get("data", {})
    if not isinstance(data, dict):
        errors.append("data must be an object")
        data = {}
    errors.extend(f"unknown key 'data.{k}'" for k in sorted(set(data) - set(DATA_KEYS)))
    data = {k: v for k, v in data.items() if k in DATA_KEYS and v}
    if base_dir is not None:
        data = {k: str(Path(base_dir) / v) if not Path(v).is_absolute() else v
                for k, v in data.items()}
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        errors.append("seed must be an integer")
        seed = 0
    cfg = RunConfig(data=data, out=str(d.get("out", "")), seed=seed, **sections)
    errors.extend(cfg.validate())
    if errors:
        raise ConfigError(errors)
    return cfg


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config file (or start from defaults) and apply overrides.

    ``overrides`` uses dotted keys, e.g. ``{"chain.beta": 1.0}``.
    """
    d: dict = {}
    base = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
        base = path.parent
    for key, value in (overrides or {}).items():
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(d, base)
