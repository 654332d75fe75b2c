"""Pipeline configuration: a TOML document plus command-line overrides."""

from __future__ import annotations

import dataclasses
import os
import re
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from segale.align import AlignParams
from segale.penalty_search import SearchParams
from segale.score import METRICS

CONFIG_ENV = "SEGALE_CONFIG"


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = path or "<config>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class EmbeddingConfig:
    provider: str = "synthetic"
    seed: int = 0
    dim: int = 256
    noise: float = 0.05
    path: str = ""
    url: str = ""
    batch_size: int = 64
    max_in_flight: int = 4
    timeout: float = 60.0


@dataclass(frozen=True)
class MetricConfig:
    name: str = "cosine"
    backend: str = "cosine"
    url: str = ""
    batch_size: int = 64
    max_in_flight: int = 4
    timeout: float = 120.0


@dataclass(frozen=True)
class PerturbConfig:
    rate: float = 0.10
    scope: str = "corpus"
    accept_threshold: float = 0.85


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    lang: str = ""
    align: AlignParams = field(default_factory=AlignParams)
    search: SearchParams = field(default_factory=SearchParams)
    embeddings: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)


_TABLES = {
    "align": AlignParams,
    "search": SearchParams,
    "embeddings": EmbeddingConfig,
    "metric": MetricConfig,
    "perturb": PerturbConfig,
}
_TOP = {"seed": int, "lang": str}
# Per-document seeds are derived elsewhere; these fields are not user-facing.
_HIDDEN = {"align": {"beta_skip", "rng_seed"}}


def _key_line(text: str, table: str | None, key: str | None) -> int | None:
    """Line of ``key`` inside ``[table]`` (or of the table header when key is None)."""
    current = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[\s*([A-Za-z0-9_.-]+)\s*\]", line)
        if m:
            current = m.group(1)
            if key is None and current == table:
                return i
            continue
        if current == table and key is not None and re.match(rf"['\"]?{re.escape(key)}['\"]?\s*=", line):
            return i
    return None


def _coerce(value, typ, where: str):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is bool or isinstance(value, bool):
        if typ is not bool or not isinstance(value, bool):
            raise TypeError(f"{where} must be {typ.__name__}, got {type(value).__name__}")
        return value
    if not isinstance(value, typ):
        raise TypeError(f"{where} must be {typ.__name__}, got {type(value).__name__}")
    return value


def _field_types(cls) -> dict[str, type]:
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    names = {"int": int, "float": float, "str": str, "bool": bool}
    return {k: names.get(v if isinstance(v, str) else v.__name__, str) for k, v in hints.items()}


def parse_config(text: str, path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Parse and validate a TOML config; ``overrides`` maps ``"table.key"`` or ``"key"`` to values."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"invalid TOML: {e}", path, int(m.group(1)) if m else None) from e

    for dotted, value in (overrides or {}).items():
        table, _, key = dotted.rpartition(".")
        target = data.setdefault(table, {}) if table else data
        target[key] = value

    kwargs = {}
    for key, value in data.items():
        if key in _TABLES:
            continue
        if key not in _TOP:
            raise ConfigError(f"unknown key {key!r}", path, _key_line(text, None, key))
        try:
            kwargs[key] = _coerce(value, _TOP[key], key)
        except TypeError as e:
            raise ConfigError(str(e), path, _key_line(text, None, key)) from e

    for table, cls in _TABLES.items():
        section = data.get(table, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{table!r} must be a table", path, _key_line(text, None, table))
        types = _field_types(cls)
        hidden = _HIDDEN.get(table, set())
        values = {}
        for key, value in section.items():
            if key not in types or key in hidden:
                raise ConfigError(f"unknown key {table}.{key}", path, _key_line(text, table, key))
            try:
                values[key] = _coerce(value, types[key], f"{table}.{key}")
            except TypeError as e:
                raise ConfigError(str(e), path, _key_line(text, table, key)) from e
        try:
            kwargs[table] = cls(**values)
        except ValueError as e:
            raise ConfigError(f"[{table}] {e}", path, _key_line(text, table, None)) from e

    cfg = PipelineConfig(**kwargs)
    _validate(cfg, text, path)
    return cfg


def _validate(cfg: PipelineConfig, text: str, path: str | None) -> None:
    emb = cfg.embeddings
    if emb.provider not in ("synthetic", "file", "http"):
        raise ConfigError(f"unknown embedding provider {emb.provider!r}", path, _key_line(text, "embeddings", "provider"))
    if emb.provider == "http" and not emb.url:
        raise ConfigError("embeddings.url is required for the http provider", path, _key_line(text, "embeddings", None))
    if emb.provider == "file" and not emb.path:
        raise ConfigError("embeddings.path is required for the file provider", path, _key_line(text, "embeddings", None))
    if emb.provider == "synthetic" and not (emb.dim >= 8 and 0 <= emb.noise < 0.5):
        raise ConfigError("synthetic embeddings need dim >= 8 and 0 <= noise < 0.5", path, _key_line(text, "embeddings", None))
    if cfg.metric.backend not in ("cosine", "http"):
        raise ConfigError(f"unknown metric backend {cfg.metric.backend!r}", path, _key_line(text, "metric", "backend"))
    if cfg.metric.backend == "http" and not cfg.metric.url:
        raise ConfigError("metric.url is required for the http backend", path, _key_line(text, "metric", None))
    if cfg.metric.name.lower() not in METRICS:
        raise ConfigError(f"unknown metric {cfg.metric.name!r}", path, _key_line(text, "metric", "name"))
    if not 0 < cfg.perturb.rate < 1:
        raise ConfigError("perturb.rate must be in (0, 1)", path, _key_line(text, "perturb", "rate"))
    if cfg.perturb.scope not in ("corpus", "document"):
        raise ConfigError(f"unknown perturb.scope {cfg.perturb.scope!r}", path, _key_line(text, "perturb", "scope"))


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Load ``path``, else the file named by $SEGALE_CONFIG, else defaults."""
    path = path or os.environ.get(CONFIG_ENV) or None
    if path is None:
        return parse_config("", None, overrides)
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", path) from e
    return parse_config(text, path, overrides)
