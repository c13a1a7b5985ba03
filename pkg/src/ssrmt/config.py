"""Run configuration files (YAML or JSON) and backend/scorer construction."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError, InvalidInput
from .external import REFERENCE_BASED, FreeOracleScorer, HttpScorer, RefOracleScorer
from .grpo import GrpoConfig
from .policy import HttpChatBackend, ToyBackend, ToyInit, init_params
from .trainer import TOY_DEFAULTS, TrainConfig

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_HTTP_KEYS = {"url", "model", "api_key_env", "timeout", "retries", "backoff"}
_SCORER_KEYS = {"kind", "url", "http_kind", "timeout", "retries", "backoff", "max_concurrency", "api_key_env"}
_DATA_KEYS = {"train", "test", "cipher"}
_SECTIONS = {"backend", "toy", "http", "judge", "scorer", "data", "out"}


@dataclass
class RunConfig:
    train: TrainConfig
    backend: str = "toy"
    toy: ToyInit = field(default_factory=ToyInit)
    http: dict = field(default_factory=dict)
    judge: dict = field(default_factory=dict)  # frozen judge endpoint for llm_judge_external over http
    scorer: dict = field(default_factory=lambda: {"kind": "oracle_ref"})
    data: dict = field(default_factory=lambda: {"train": "train.jsonl", "test": "test.jsonl",
                                                  "cipher": "cipher.json"})
    out: str = "run"

    def to_json(self) -> dict:
        d = asdict(self)
        flat = d.pop("train")
        return {**flat, **d}

    def config_hash(self) -> str:
        blob = self.to_json()
        blob.pop("out")
        blob.pop("parallelism")
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]

    def path(self, key: str) -> Optional[Path]:
        value = self.data.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.out) / p


def _reject_unknown(section: str, given: dict, allowed: set) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def build_run_config(raw: Optional[dict] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Merge file values with CLI overrides (overrides win) and validate."""
    merged = dict(raw or {})
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    _reject_unknown("config", merged, _TRAIN_KEYS | _SECTIONS)

    backend = merged.get("backend", "toy")
    if backend not in ("toy", "http"):
        raise ConfigError(f"backend must be 'toy' or 'http', got {backend!r}")

    train_kw = {k: merged[k] for k in _TRAIN_KEYS if k in merged}
    if backend == "toy":
        for k, v in TOY_DEFAULTS.items():
            train_kw.setdefault(k, v)
    grpo_raw = train_kw.pop("grpo", {}) or {}
    _reject_unknown("grpo", grpo_raw, {f.name for f in fields(GrpoConfig)})
    toy_raw = merged.get("toy", {}) or {}
    _reject_unknown("toy", toy_raw, {f.name for f in fields(ToyInit)})
    http_raw = merged.get("http", {}) or {}
    _reject_unknown("http", http_raw, _HTTP_KEYS)
    judge_raw = merged.get("judge", {}) or {}
    _reject_unknown("judge", judge_raw, _HTTP_KEYS)
    scorer_raw = {"kind": "oracle_ref", **(merged.get("scorer", {}) or {})}
    _reject_unknown("scorer", scorer_raw, _SCORER_KEYS)
    if scorer_raw["kind"] not in ("oracle_ref", "oracle_free", "http"):
        raise ConfigError(f"scorer.kind must be oracle_ref, oracle_free or http, got {scorer_raw['kind']!r}")
    data_raw = {"train": "train.jsonl", "test": "test.jsonl", "cipher": "cipher.json",
                **(merged.get("data", {}) or {})}
    _reject_unknown("data", data_raw, _DATA_KEYS)

    try:
        train_cfg = TrainConfig(grpo=GrpoConfig(**grpo_raw), **train_kw)
        toy = ToyInit(**toy_raw)
    except (TypeError, InvalidInput) as e:
        raise ConfigError(str(e)) from e
    if backend == "http" and not http_raw.get("url"):
        raise ConfigError("backend=http needs http.url")
    return RunConfig(train_cfg, backend, toy, http_raw, judge_raw, scorer_raw, data_raw,
                     str(merged.get("out", "run")))


def load_run_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
    return build_run_config(raw, overrides)


def make_backend(cfg: RunConfig, cipher=None):
    if cfg.backend == "toy":
        if cipher is None:
            raise ConfigError("toy backend needs the cipher file")
        return ToyBackend(init_params(cipher, cfg.toy))
    return HttpChatBackend(**cfg.http)


def make_judge_backend(cfg: RunConfig, backend):
    """Frozen, never-updated judge for reward_mode=llm_judge_external."""
    if cfg.train.reward_mode != "llm_judge_external":
        return None
    if cfg.judge:
        return HttpChatBackend(**cfg.judge)
    if isinstance(backend, ToyBackend):
        return ToyBackend(backend.params.copy(), trainable=False)
    raise ConfigError("llm_judge_external over http needs a 'judge' endpoint section")


def make_scorer(cfg: RunConfig, cipher=None):
    if cfg.train.reward_mode not in ("ssr_x", "external_only"):
        return None
    s = dict(cfg.scorer)
    kind = s.pop("kind")
    if kind == "oracle_ref":
        return RefOracleScorer()
    if kind == "oracle_free":
        if cipher is None:
            raise ConfigError("oracle_free scorer needs the cipher file")
        return FreeOracleScorer(cipher)
    http_kind = s.pop("http_kind", REFERENCE_BASED)
    return HttpScorer(kind=http_kind, **s)
