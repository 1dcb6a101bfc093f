"""Application config: a flat YAML mapping, overridden by ``PLANKIT_<KEY>`` env vars.

Recognized keys (all optional)::

    base_url: http://localhost:8000/v1
    model: meta-llama/Meta-Llama-3-8B-Instruct
    api_key_env: MODEL_API_KEY      # name of the env var holding the key
    timeout: 120
    max_retries: 3
    concurrency: 8
    backoff_base: 1.0
    backoff_ceiling: 60.0
    temperature: 0.7                # annotation sampling
    top_p: 0.9
    max_tokens: 1024
    seed: null
    eval_temperature: 0.0           # evaluation decoding (greedy)
    eval_top_p: 1.0
    eval_max_tokens: 512
    workspace: .
    log_level: INFO

Unknown keys are an error.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .client import SamplingParams, ServerConfig

ENV_PREFIX = "PLANKIT_"


def _optional_int(value: Any) -> int | None:
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
        return None
    return int(value)


_SERVER_KEYS: dict[str, Callable[[Any], Any]] = {
    "base_url": str,
    "model": str,
    "api_key_env": str,
    "timeout": float,
    "max_retries": int,
    "concurrency": int,
    "backoff_base": float,
    "backoff_ceiling": float,
}
_SAMPLING_KEYS: dict[str, Callable[[Any], Any]] = {
    "temperature": float,
    "top_p": float,
    "max_tokens": int,
    "seed": _optional_int,
}
_EVAL_KEYS: dict[str, Callable[[Any], Any]] = {
    "eval_temperature": float,
    "eval_top_p": float,
    "eval_max_tokens": int,
}
_OTHER_KEYS: dict[str, Callable[[Any], Any]] = {"workspace": str, "log_level": lambda v: str(v).upper()}
KEYS = {**_SERVER_KEYS, **_SAMPLING_KEYS, **_EVAL_KEYS, **_OTHER_KEYS}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AppConfig:
    server: ServerConfig = field(default_factory=ServerConfig)
    sampling: SamplingParams = field(default_factory=SamplingParams)
    eval_sampling: SamplingParams = field(default_factory=lambda: SamplingParams(0.0, 1.0, 512))
    workspace: Path = Path(".")
    log_level: str = "INFO"

    def to_json(self) -> dict[str, Any]:
        return {
            "server": asdict(self.server),
            "sampling": asdict(self.sampling),
            "eval_sampling": asdict(self.eval_sampling),
            "workspace": str(self.workspace),
            "log_level": self.log_level,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> AppConfig:
    env = os.environ if env is None else env
    raw: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text) if text.strip() else {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a key-value mapping")
        unknown = sorted(set(data) - set(KEYS))
        if unknown:
            raise ConfigError(f"{path}: unknown config key(s): {', '.join(unknown)}")
        raw.update(data)
    for key in KEYS:
        var = ENV_PREFIX + key.upper()
        if var in env:
            raw[key] = env[var]

    values: dict[str, Any] = {}
    for key, value in raw.items():
        try:
            values[key] = KEYS[key](value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r}: cannot interpret {value!r}") from None

    try:
        server = ServerConfig(**{k: values[k] for k in _SERVER_KEYS if k in values})
        sampling = SamplingParams(**{k: values[k] for k in _SAMPLING_KEYS if k in values})
        defaults = AppConfig().eval_sampling
        eval_sampling = SamplingParams(
            values.get("eval_temperature", defaults.temperature),
            values.get("eval_top_p", defaults.top_p),
            values.get("eval_max_tokens", defaults.max_tokens),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    workspace = Path(values.get("workspace", "."))
    try:
        workspace.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"workspace {workspace} is not usable: {exc}") from None
    return AppConfig(server, sampling, eval_sampling, workspace, values.get("log_level", "INFO"))
