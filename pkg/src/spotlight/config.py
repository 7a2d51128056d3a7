"""Flat ``key=value`` experiment config files with dotted section prefixes.

Example::

    seed=3
    train.iterations=2000
    train.patch_shape=16,32,32
    train.spotlight.lambda=0.5
    sweep.thresholds=0.05,0.1,0.2

Blank lines and ``#`` comments are ignored; unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path
from typing import Any

from spotlight.errors import ConfigError
from spotlight.experiment import ExperimentConfig

# section prefix -> (ExperimentConfig attribute, {config key: dataclass field})
_SECTIONS = {
    "phantom": ("phantom", None),
    "net": ("net", None),
    "train": ("train", {"patch_shape": "patch_shape"}),
    "train.spotlight": ("loss", {"lambda": "lam", "k": "k", "epsilon": "epsilon"}),
    "seg": ("seg", None),
}
_TOP_LEVEL = {
    "seed": "seed",
    "data.n_train": "n_train",
    "data.n_test": "n_test",
    "eval.taus": "taus",
    "eval.frc_bin_delta": "frc_bin_delta",
    "sweep.thresholds": "sweep_thresholds",
}
# fields the experiment sets per arm; not user-configurable
_RESERVED = {("train", "loss"), ("train", "loss_cfg"), ("train", "rng_seed"), ("phantom", "seed")}


def _coerce(raw: str, default: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s for s in raw.split(",") if s.strip()]
            cast = int if default and all(isinstance(d, int) for d in default) else float
            return tuple(cast(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def _section_fields(obj, aliases):
    names = {f.name for f in fields(obj)}
    mapping = dict(aliases or {})
    for name in names:
        mapping.setdefault(name, name)
    return mapping


def parse_config(text: str, base: ExperimentConfig = ExperimentConfig()) -> ExperimentConfig:
    updates: dict[str, dict] = {attr: {} for attr, _ in _SECTIONS.values()}
    top: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key in _TOP_LEVEL:
            name = _TOP_LEVEL[key]
            top[name] = _coerce(value, getattr(base, name), key)
            continue
        section, _, leaf = key.rpartition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, aliases = _SECTIONS[section]
        obj = getattr(base, attr)
        mapping = _section_fields(obj, aliases)
        if leaf not in mapping or (attr, mapping[leaf]) in _RESERVED:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        field_name = mapping[leaf]
        updates[attr][field_name] = _coerce(value, getattr(obj, field_name), key)
    try:
        sections = {attr: replace(getattr(base, attr), **kw) for attr, kw in updates.items() if kw}
        return replace(base, **sections, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize every configurable key; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for key, name in _TOP_LEVEL.items():
        lines.append(f"{key}={_fmt(getattr(cfg, name))}")
    for section, (attr, aliases) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        for f in fields(obj):
            if (attr, f.name) in _RESERVED:
                continue
            leaf = next((k for k, v in (aliases or {}).items() if v == f.name), f.name)
            lines.append(f"{section}.{leaf}={_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)
