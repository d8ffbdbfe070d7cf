"""Run configuration: sectioned key-value file, validation, CLI overrides.

The file format is INI-style sections mirroring the runtime's configuration
surface (api / parameters / index / strategies / evaluators / sampling /
metrics / paths / runtime). Unknown keys are rejected with a nearest-key
suggestion; secrets are only ever read from the environment.
"""

from __future__ import annotations

import configparser
import difflib
import hashlib
import os
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # [api]
    openai_key_env: str = "OPENAI_API_KEY"
    openai_base: str = ""
    model: str = ""
    judge_model: str = ""
    # [parameters]
    chunk_size: int = 128
    overlap: int = 20
    embed_dim: int = 768
    context_length: int = 4096
    sentence_window: int = 3
    # [index]
    index: str = "vector"  # vector | bm25 | both | sentence_window
    metric: str = "cosine"
    # [strategies]
    top_k: int = 3
    rerank: bool = True
    rerank_top_n: int = 3
    score_threshold: float | None = None
    tokens: int = 1024
    transform: str = "none"  # none | hyde | stepback | rewrite | decompose
    synthesis: str = "simple_summarize"
    two_step: bool = False
    few_shot: bool = False
    brief_answer: bool = False
    # [evaluators]
    conr: bool = True
    cong: bool = True
    cogl: bool = False
    cogl_metrics: list[str] = field(default_factory=list)
    # [sampling]
    e_sp: int = 20
    e_no: int = 3
    seed: int = 0
    # [metrics] - optional pass/fail gates applied to aggregates
    gate_hit_1: float | None = 0.7
    gate_f1: float | None = 0.66
    gate_rouge1: float | None = 0.56
    gate_mrr: float | None = 0.85
    gate_ppl: float | None = 50.0
    # [protocol] - failure-diagnosis parameters
    noise_levels: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    f1_threshold: float = 1.0
    curated_ids_path: str = ""
    subset_tag: str = "hard"
    # [paths]
    dataset: str = ""
    corpus: str = ""
    templates: str = ""
    output: str = "out"
    index_dir: str = ""
    # [runtime]
    provider: str = "stub"  # stub | http
    cache: bool = False
    cache_path: str = ""
    workers: int = 1
    retrieval_only: bool = False

    def validate(self) -> None:
        if self.chunk_size <= 0:
            raise ConfigError("chunk_size must be positive")
        if not 0 <= self.overlap < self.chunk_size:
            raise ConfigError(
                f"need 0 <= overlap < chunk_size, got overlap={self.overlap} "
                f"chunk_size={self.chunk_size}"
            )
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if self.context_length <= 0:
            raise ConfigError("context_length must be positive")
        if self.sentence_window < 0:
            raise ConfigError("sentence_window must be >= 0")
        if self.index not in ("vector", "bm25", "both", "sentence_window"):
            raise ConfigError(f"unknown index kind {self.index!r}")
        if self.metric != "cosine":
            raise ConfigError(f"unsupported similarity metric {self.metric!r}")
        if self.top_k <= 0:
            raise ConfigError("top_k must be positive")
        if self.rerank_top_n < 1:
            raise ConfigError("rerank_top_n must be >= 1")
        if not 0 < self.tokens < self.context_length:
            raise ConfigError("tokens must be in (0, context_length)")
        if self.transform not in ("none", "hyde", "stepback", "rewrite", "decompose"):
            raise ConfigError(f"unknown transform {self.transform!r}")
        if self.synthesis not in ("simple_summarize", "refine", "compact",
                                  "compact_accumulate"):
            raise ConfigError(f"unknown synthesis mode {self.synthesis!r}")
        if self.e_sp <= 0 or self.e_no <= 0:
            raise ConfigError("e_sp and e_no must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if any(n < 0 for n in self.noise_levels):
            raise ConfigError("noise_levels must be >= 0")
        if self.provider not in ("stub", "http"):
            raise ConfigError(f"unknown provider {self.provider!r}")
        if self.provider == "http" and not os.environ.get(self.openai_key_env):
            raise ConfigError(
                f"remote provider selected but ${self.openai_key_env} is not set"
            )

    # Execution/IO knobs that cannot change results stay out of the hash, so
    # reruns at different worker counts or output paths hash identically.
    _UNHASHED = frozenset({"workers", "output", "index_dir", "cache", "cache_path",
                           "dataset", "corpus", "templates"})

    def config_hash(self) -> str:
        parts = []
        for f in fields(self):
            if f.name in self._UNHASHED:
                continue
            parts.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()[:16]


_SECTION_KEYS = {
    "api": {
        "openai_key_env": str, "openai_base": str, "model": str, "judge_model": str,
    },
    "parameters": {
        "chunk_size": int, "overlap": int, "embed_dim": int,
        "context_length": int, "sentence_window": int,
    },
    "index": {"index": str, "metric": str},
    "strategies": {
        "top_k": int, "rerank": bool, "rerank_top_n": int,
        "score_threshold": float, "tokens": int, "transform": str,
        "synthesis": str, "two_step": bool, "few_shot": bool, "brief_answer": bool,
    },
    "evaluators": {"conr": bool, "cong": bool, "cogl": bool, "cogl_metrics": list},
    "sampling": {"e_sp": int, "e_no": int, "seed": int},
    "metrics": {
        "hit_1": float, "f1": float, "rouge1": float, "mrr": float, "ppl": float,
    },
    "protocol": {
        "noise_levels": "intlist", "f1_threshold": float,
        "curated_ids_path": str, "subset_tag": str,
    },
    "paths": {
        "dataset": str, "corpus": str, "templates": str, "output": str,
        "index_dir": str,
    },
    "runtime": {
        "provider": str, "cache": bool, "cache_path": str, "workers": int,
        "retrieval_only": bool,
    },
}

# [metrics] keys land on gate_-prefixed fields.
_FIELD_FOR = {("metrics", key): f"gate_{key}" for key in _SECTION_KEYS["metrics"]}


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def _assign(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    keys = _SECTION_KEYS.get(section)
    if keys is None:
        suggestion = difflib.get_close_matches(section, _SECTION_KEYS, n=1)
        hint = f"; did you mean [{suggestion[0]}]?" if suggestion else ""
        raise ConfigError(f"unknown section [{section}]{hint}")
    if key not in keys:
        suggestion = difflib.get_close_matches(key, keys, n=1)
        hint = f"; did you mean {suggestion[0]!r}?" if suggestion else ""
        raise ConfigError(f"unknown key {key!r} in [{section}]{hint}")
    attr = _FIELD_FOR.get((section, key), key)
    kind = keys[key]
    raw = raw.strip()
    try:
        if kind is bool:
            value = _parse_bool(raw)
        elif kind is int:
            value = int(raw)
        elif kind is float:
            value = None if raw == "" else float(raw)
        elif kind is list:
            value = [item.strip() for item in raw.split(",") if item.strip()]
        elif kind == "intlist":
            value = [int(item) for item in raw.split(",") if item.strip()]
        else:
            value = raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc
    setattr(cfg, attr, value)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> None:
    """Apply ``section.key=value`` strings, e.g. from repeated --set flags."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        _assign(cfg, section.strip(), key.strip(), raw)


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    """Parse, apply defaults and overrides, validate."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            _assign(cfg, section, key, raw)
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg
