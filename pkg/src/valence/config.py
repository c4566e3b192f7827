"""Run configuration: flat ``key = value`` files, CLI overrides, fingerprints.

Keys are dotted paths into the config, e.g. ``lstm.hidden = 32`` or
``vrnn.fit.lr = 0.003``.  Lines starting with ``#`` are comments.  Values are
coerced to the type of the default they override.  Precedence is CLI flag >
file > built-in default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Mapping

from .data import COMBINATIONS
from .neural.lstm import LstmConfig
from .neural.vrnn import VrnnConfig
from .synth import SynthConfig

MODEL_KINDS = ("svr", "hmm", "lstm", "vrnn")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: str = "svr"
    modalities: str = "T"
    seed: int = 7
    out: str = "."
    data: str = "."
    gold: str = ""
    equal_frequency_bins: bool = False
    synth: SynthConfig = field(default_factory=SynthConfig)
    lstm: LstmConfig = field(default_factory=LstmConfig)
    vrnn: VrnnConfig = field(default_factory=VrnnConfig)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.modalities not in COMBINATIONS:
            raise ConfigError(f"modalities must be one of {COMBINATIONS}, got {self.modalities!r}")

    def model_config(self):
        """The neural model config with the run seed applied."""
        if self.model == "lstm":
            return replace(self.lstm, seed=self.seed)
        if self.model == "vrnn":
            return replace(self.vrnn, seed=self.seed)
        return None

    def fingerprint(self) -> str:
        """Hash of everything that can change a trained model (paths excluded)."""
        d = asdict(self)
        for k in ("out", "data", "gold"):
            d.pop(k)
        d["synth"] = {k: v for k, v in d["synth"].items() if k != "dims"}
        blob = json.dumps(d, sort_keys=True, default=str, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _coerce(text: str, default, key: str):
    t = text.strip()
    try:
        if isinstance(default, bool):
            low = t.lower()
            if low in {"1", "true", "yes", "on"}:
                return True
            if low in {"0", "false", "no", "off"}:
                return False
            raise ValueError(t)
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float) or default is None:
            return None if t.lower() == "none" else float(t)
        if isinstance(default, dict):
            raise ConfigError(f"{key}: not settable from a config file")
        if isinstance(default, tuple):
            parts = [p for p in t.replace("(", "").replace(")", "").split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return t
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _set(obj, parts: list[str], text: str, key: str):
    name = parts[0]
    if name not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    cur = getattr(obj, name)
    if len(parts) == 1:
        if is_dataclass(cur):
            raise ConfigError(f"{key!r} is a section, not a key")
        new = _coerce(text, cur, key)
    elif is_dataclass(cur):
        new = _set(cur, parts[1:], text, key)
    else:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return replace(obj, **{name: new})
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, str]) -> RunConfig:
    """Apply dotted-key string overrides, type-checked against current values."""
    for key, text in overrides.items():
        cfg = _set(cfg, key.split("."), text, key)
    return cfg


def load_config(path: str | Path | None, flags: Mapping[str, object] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then non-None ``flags``."""
    cfg = RunConfig()
    if path:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{p}: {exc.strerror or exc}") from exc
        cfg = apply_overrides(cfg, parse_config_text(text, str(p)))
    if flags:
        cfg = apply_overrides(cfg, {k: str(v) for k, v in flags.items() if v is not None})
    return cfg
