"""Run configuration: TOML files, dotted-key overrides, a canonical content
hash, and materializers for the typed configs the training modules consume.

A run is reconstructable from its persisted config alone: the resolved
mapping (file values + overrides) is written back into every run directory,
and its hash — stable under key reordering — names checkpoints' provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os

try:
    import tomllib
except ModuleNotFoundError:  # stdlib from 3.11 on
    import tomli as tomllib

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

from .adani import AdaniConfig
from .images import ParameterError
from .noise import NoiseSpec
from .pretrain import PretrainConfig

DATA_ROOT_ENV = "NOISELAB_DATA_ROOT"


class ConfigError(ValueError):
    pass


_SCALARS = (str, int, float, bool)


def _normalize(value: Any, where: str) -> Any:
    if isinstance(value, bool) or isinstance(value, _SCALARS):
        return value
    if isinstance(value, (list, tuple)):
        return [_normalize(v, f"{where}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, Mapping):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise ConfigError(f"non-string key {k!r} under {where or 'top level'}")
            out[k] = _normalize(v, f"{where}.{k}" if where else k)
        return out
    raise ConfigError(f"unsupported config value type {type(value).__name__} at {where}")


@dataclass(frozen=True)
class RunConfig:
    mapping: Dict[str, Any]

    @property
    def master_seed(self) -> int:
        seed = self.mapping.get("master_seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"master_seed must be an integer, got {seed!r}")
        return seed

    @property
    def output_dir(self) -> str:
        out = self.mapping.get("output_dir", "runs")
        if not isinstance(out, str):
            raise ConfigError(f"output_dir must be a string, got {out!r}")
        return out

    def section(self, name: str) -> Dict[str, Any]:
        sec = self.mapping.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table, got {type(sec).__name__}")
        return dict(sec)

    def config_hash(self) -> str:
        blob = json.dumps(self.mapping, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- materializers ------------------------------------------------------

    def noise_spec(self) -> NoiseSpec:
        sec = self.section("noise")
        family = sec.pop("family", None)
        if family is None:
            raise ConfigError("[noise] needs a family")
        rng = sec.pop("level_range", None)
        fixed = sec.pop("fixed_level", None)
        if sec:
            raise ConfigError(f"unknown [noise] keys: {sorted(sec)}")
        if rng is None and fixed is None:
            raise ConfigError("[noise] needs level_range and/or fixed_level")
        if rng is None:
            rng = [fixed, fixed] if fixed > 0 else [0.0, 1.0]
        if not (isinstance(rng, list) and len(rng) == 2):
            raise ConfigError(f"level_range must be [lo, hi], got {rng!r}")
        try:
            return NoiseSpec(family=family, level_range=(float(rng[0]), float(rng[1])), fixed_level=fixed)
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc

    def pretrain_config(self, **defaults) -> PretrainConfig:
        return self._build(PretrainConfig, "pretrain", defaults)

    def adani_config(self, **defaults) -> AdaniConfig:
        return self._build(AdaniConfig, "adani", defaults)

    def _build(self, cls, name: str, defaults: Dict[str, Any]):
        sec = {**defaults, **self.section(name)}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(sec) - known)
        if unknown:
            raise ConfigError(f"unknown [{name}] keys: {unknown}")
        if "seed" in known:
            sec.setdefault("seed", self.master_seed)
        try:
            return cls(**sec)
        except (TypeError, ParameterError) as exc:
            raise ConfigError(f"bad [{name}] section: {exc}") from exc


def from_mapping(mapping: Mapping[str, Any]) -> RunConfig:
    return RunConfig(mapping=_normalize(mapping, ""))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return from_mapping(tomllib.load(fh))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_override_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text  # bare string


def apply_overrides(cfg: RunConfig, assignments: Sequence[str]) -> RunConfig:
    """Each assignment is 'dotted.key=value', value in TOML literal syntax
    (bare text falls back to a string). Later assignments win."""
    mapping = json.loads(json.dumps(cfg.mapping))  # deep copy of plain data
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        node = mapping
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {part} is not a table")
        node[parts[-1]] = _parse_override_value(value.strip())
    return from_mapping(mapping)


def resolve_path(p, base=None) -> Path:
    """Absolute paths pass through; relative ones resolve against the data
    root env var when set, else against `base` (default: the working dir)."""
    p = Path(p)
    if p.is_absolute():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    if root:
        return Path(root) / p
    return Path(base or ".") / p


# ---------------------------------------------------------------------------
# TOML writer (tomllib only reads)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value).__name__} as a TOML value")


def _emit_table(lines: List[str], header: str, table: Mapping[str, Any]):
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict) and not _is_table_array(v)}
    if header:
        lines.append(f"[{header}]")
    for k in sorted(scalars):
        lines.append(f"{k} = {_format_value(scalars[k])}")
    if header or scalars:
        lines.append("")
    for k in sorted(table):
        v = table[k]
        sub = f"{header}.{k}" if header else k
        if isinstance(v, dict):
            _emit_table(lines, sub, v)
        elif _is_table_array(v):
            for row in v:
                lines.append(f"[[{sub}]]")
                for rk in sorted(row):
                    lines.append(f"{rk} = {_format_value(row[rk])}")
                lines.append("")


def _is_table_array(v: Any) -> bool:
    return isinstance(v, list) and bool(v) and all(isinstance(e, dict) for e in v)


def dumps_toml(mapping: Mapping[str, Any]) -> str:
    lines: List[str] = []
    _emit_table(lines, "", mapping)
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps_toml(cfg.mapping))
