"""Application configuration: one YAML file, validated fully at startup.

String values support environment interpolation: ``${VAR}`` fails loudly
when VAR is unset, ``${VAR:-default}`` falls back. Unknown keys are
rejected with their dotted location so typos never silently disable a
setting.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .chunking import ChunkingConfig
from .entities import ClusteringConfig
from .errors import ConfigError
from .gateway import EndpointConfig, GatewayConfig, ROLES
from .generation import GenerationConfig
from .retrieval import RetrievalConfig
from .search import SearchConfig

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")

PROMPT_NAMES = ("describe_general", "describe_wildlife", "summarize",
                "extract_entities", "rq_keywords", "cot_answer", "ca_vision")


def _interpolate(value, location: str):
    if isinstance(value, str):
        def sub(match: re.Match) -> str:
            var, default = match.group(1), match.group(2)
            if var in os.environ:
                return os.environ[var]
            if default is not None:
                return default
            raise ConfigError(f"{location}: environment variable {var} is unset")
        return _ENV_PATTERN.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v, f"{location}.{k}") for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v, f"{location}[{i}]") for i, v in enumerate(value)]
    return value


def _take(data: dict, allowed: dict[str, object], location: str) -> dict:
    unknown = set(data) - set(allowed)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key {location}.{key}" if location
                          else f"unknown config key {key}")
    merged = dict(allowed)
    merged.update(data)
    return merged


@dataclass
class AppConfig:
    store_path: str = "./store"
    audit_dir: str = "./audit"
    prompt_dir: str | None = None
    scenario: str = "general"
    log_level: str = "INFO"
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)


def parse_config(data: dict, base_dir: Path | None = None) -> AppConfig:
    data = _interpolate(data or {}, "")
    top = _take(data, {
        "store_path": "./store", "audit_dir": "./audit", "prompt_dir": None,
        "scenario": "general", "log_level": "INFO", "chunking": {},
        "clustering": {}, "search": {}, "generation": {}, "retrieval": {},
        "gateway": {},
    }, "")

    def resolve(path_value):
        if path_value is None or base_dir is None:
            return path_value
        p = Path(str(path_value))
        return str(p if p.is_absolute() else base_dir / p)

    try:
        chunking = ChunkingConfig(**_take(top["chunking"] or {}, {
            "chunk_seconds": 3.0, "tau_in": 0.65, "tau_bound": 0.50,
            "max_merge_span": 64}, "chunking"))
        clustering = ClusteringConfig(**_take(top["clustering"] or {}, {
            "k_policy": "ratio", "k_ratio": 0.2, "k_fixed": None,
            "max_iters": 50, "seed": 0, "tol": 1e-6,
            "checkpoint_mentions": 200}, "clustering"))
        search = SearchConfig(**_take(top["search"] or {}, {
            "max_depth": 3, "cap": 16, "hops_per_step": 1,
            "requery_keywords_max": 5}, "search"))
        gen_raw = _take(top["generation"] or {}, {
            "n_samples": 8, "temperature": 0.6, "lambda": 0.3,
            "ca_top_m": 2}, "generation")
        generation = GenerationConfig(
            n_samples=gen_raw["n_samples"], temperature=gen_raw["temperature"],
            lambda_weight=gen_raw["lambda"], ca_top_m=gen_raw["ca_top_m"])
        retr_raw = _take(top["retrieval"] or {}, {
            "k_per_view": 8, "view_weights": {}}, "retrieval")
        weights = _take(retr_raw["view_weights"] or {}, {
            "event": 1.0, "entity": 1.0, "vision": 1.0}, "retrieval.view_weights")
        retrieval = RetrievalConfig(k_per_view=retr_raw["k_per_view"],
                                    view_weights={k: float(v) for k, v in weights.items()})
        gw_raw = _take(top["gateway"] or {}, {
            "backend": "mock", "mock_script": None, "mock_dim": 16,
            "roles": {}}, "gateway")
        bindings = {}
        for role, raw in (gw_raw["roles"] or {}).items():
            if role not in ROLES:
                raise ConfigError(f"unknown config key gateway.roles.{role}")
            ep = _take(raw or {}, {
                "base_url": "", "model": "", "api_key_env": "", "timeout": 30.0,
                "retry_max": 3, "backoff_base": 0.5, "backoff_cap": 8.0,
                "frame_cap": 0, "max_concurrency": 8, "score_url": ""},
                f"gateway.roles.{role}")
            bindings[role] = EndpointConfig(**ep)
        gateway = GatewayConfig(backend=gw_raw["backend"],
                                role_bindings=bindings,
                                mock_script_path=resolve(gw_raw["mock_script"]),
                                mock_dim=gw_raw["mock_dim"])
        gateway.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    return AppConfig(
        store_path=resolve(top["store_path"]),
        audit_dir=resolve(top["audit_dir"]),
        prompt_dir=resolve(top["prompt_dir"]),
        scenario=str(top["scenario"]),
        log_level=str(top["log_level"]),
        chunking=chunking, clustering=clustering, search=search,
        generation=generation, retrieval=retrieval, gateway=gateway)


def load_config(path: str | Path) -> AppConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return parse_config(data, base_dir=path.parent.resolve())


def dump_config(config: AppConfig) -> dict:
    """Semantic snapshot of an AppConfig, re-parseable by parse_config."""
    return {
        "store_path": config.store_path,
        "audit_dir": config.audit_dir,
        "prompt_dir": config.prompt_dir,
        "scenario": config.scenario,
        "log_level": config.log_level,
        "chunking": {
            "chunk_seconds": config.chunking.chunk_seconds,
            "tau_in": config.chunking.tau_in,
            "tau_bound": config.chunking.tau_bound,
            "max_merge_span": config.chunking.max_merge_span,
        },
        "clustering": {
            "k_policy": config.clustering.k_policy,
            "k_ratio": config.clustering.k_ratio,
            "k_fixed": config.clustering.k_fixed,
            "max_iters": config.clustering.max_iters,
            "seed": config.clustering.seed,
            "tol": config.clustering.tol,
            "checkpoint_mentions": config.clustering.checkpoint_mentions,
        },
        "search": {
            "max_depth": config.search.max_depth,
            "cap": config.search.cap,
            "hops_per_step": config.search.hops_per_step,
            "requery_keywords_max": config.search.requery_keywords_max,
        },
        "generation": {
            "n_samples": config.generation.n_samples,
            "temperature": config.generation.temperature,
            "lambda": config.generation.lambda_weight,
            "ca_top_m": config.generation.ca_top_m,
        },
        "retrieval": {
            "k_per_view": config.retrieval.k_per_view,
            "view_weights": dict(config.retrieval.view_weights),
        },
        "gateway": {
            "backend": config.gateway.backend,
            "mock_script": config.gateway.mock_script_path,
            "mock_dim": config.gateway.mock_dim,
            "roles": {
                role: {
                    "base_url": ep.base_url, "model": ep.model,
                    "api_key_env": ep.api_key_env, "timeout": ep.timeout,
                    "retry_max": ep.retry_max, "backoff_base": ep.backoff_base,
                    "backoff_cap": ep.backoff_cap, "frame_cap": ep.frame_cap,
                    "max_concurrency": ep.max_concurrency, "score_url": ep.score_url,
                } for role, ep in config.gateway.role_bindings.items()
            },
        },
    }


class PromptLibrary:
    """Prompt templates: packaged defaults, overridable per file from a dir."""

    def __init__(self, prompt_dir: str | Path | None = None):
        self._dir = Path(prompt_dir) if prompt_dir else None
        self._packaged = Path(__file__).parent / "prompts"
        self._cache: dict[str, str] = {}

    def text(self, name: str) -> str:
        """Raw template text for ``name`` (without the .txt suffix)."""
        if name in self._cache:
            return self._cache[name]
        candidates = []
        if self._dir is not None:
            candidates.append(self._dir / f"{name}.txt")
        candidates.append(self._packaged / f"{name}.txt")
        for candidate in candidates:
            if candidate.is_file():
                text = candidate.read_text()
                self._cache[name] = text
                return text
        raise ConfigError(f"no prompt template named {name!r} "
                          f"(searched {[str(c) for c in candidates]})")

    def render(self, name: str, **params) -> str:
        template = self.text(name)
        try:
            return template.format(**params)
        except KeyError as exc:
            raise ConfigError(f"prompt {name!r} references unknown "
                              f"placeholder {exc}") from None
