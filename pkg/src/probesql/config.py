"""Run configuration: one TOML or JSON file, secrets from the environment."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .agent import EpisodeBudget
from .errors import ConfigError
from .linking import LinkConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

ENV_BASE_URL = "APEX_BASE_URL"
ENV_MODEL = "APEX_MODEL"
ENV_API_KEY = "APEX_API_KEY"


@dataclass
class BackendConfig:
    kind: str = "replay"  # replay | http
    base_url: str | None = None
    model: str | None = None
    api_key_env: str = ENV_API_KEY
    replay: str | None = None
    timeout: float = 120.0


@dataclass
class SamplingConfig:
    n: int = 8
    t_agent: float = 0.8


@dataclass
class RunConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    budget: EpisodeBudget = field(default_factory=EpisodeBudget)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    linking: LinkConfig = field(default_factory=LinkConfig)
    dataset: str | None = None
    dataset_kind: str | None = None
    mode: str | None = None
    dialect: str = "sqlite"
    out_dir: str = "runs"
    workers: int = 4
    exec_timeout: float = 30.0
    allow_writes: bool = False
    tips_path: str | None = None
    rules_path: str | None = None
    evidence_filter_min_tokens: int = 2000

    def validate(self, check_backend: bool = True) -> "RunConfig":
        b = self.backend
        if b.kind not in ("replay", "http"):
            raise ConfigError(f"unknown backend kind {b.kind!r}")
        if not check_backend:
            pass
        elif b.kind == "http" and b.replay:
            raise ConfigError("a replay script and a live backend are mutually exclusive")
        elif b.kind == "replay" and not b.replay:
            raise ConfigError("replay backend needs a replay script (--replay)")
        elif b.kind == "http" and not (b.base_url and b.model):
            raise ConfigError(f"live backend needs a base URL and model ({ENV_BASE_URL}, {ENV_MODEL})")
        if self.sampling.n < 1:
            raise ConfigError("sampling.n must be at least 1")
        if self.mode not in (None, "strict", "relaxed"):
            raise ConfigError(f"unknown comparison mode {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        return self

    def snapshot(self) -> dict:
        """Serializable view with no secrets (keys are referenced by env var name only)."""
        return json.loads(json.dumps(asdict(self), default=str))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.snapshot(), sort_keys=True).encode()).hexdigest()[:12]

    def api_key(self) -> str | None:
        return os.environ.get(self.backend.api_key_env)


def _build(cls, doc: Mapping[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{where}] section: {exc}") from exc


def _resolve(path: str | None, base: Path) -> str | None:
    if path is None:
        return None
    p = Path(path).expanduser()
    return str((base / p).resolve() if not p.is_absolute() else p)


def config_from_dict(doc: Mapping[str, Any], base: Path | None = None) -> RunConfig:
    base = base or Path.cwd()
    doc = dict(doc)
    sections = {
        "backend": BackendConfig,
        "budget": EpisodeBudget,
        "sampling": SamplingConfig,
        "linking": LinkConfig,
    }
    kwargs: dict[str, Any] = {}
    for name, cls in sections.items():
        if name in doc:
            kwargs[name] = _build(cls, doc.pop(name), name)
    cfg = _build(RunConfig, {**doc, **kwargs}, "run")
    cfg.backend.replay = _resolve(cfg.backend.replay, base)
    cfg.dataset = _resolve(cfg.dataset, base)
    cfg.tips_path = _resolve(cfg.tips_path, base)
    cfg.rules_path = _resolve(cfg.rules_path, base)
    cfg.out_dir = _resolve(cfg.out_dir, base)
    return cfg


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read a config file (``.toml`` or ``.json``); no file means defaults."""
    if path is None:
        return apply_env(config_from_dict({}))
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        doc = json.loads(raw) if p.suffix == ".json" else tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    return apply_env(config_from_dict(doc, p.parent.resolve()))


def apply_env(cfg: RunConfig) -> RunConfig:
    base = os.environ.get(ENV_BASE_URL)
    model = os.environ.get(ENV_MODEL)
    b = cfg.backend
    if cfg.backend.kind == "http":
        cfg.backend = replace(b, base_url=base or b.base_url, model=model or b.model)
    return cfg
