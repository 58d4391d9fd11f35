"""Single access point for every model call the pipeline makes.

Five request kinds are supported: ``chat``, ``vision_chat``, ``embed_text``,
``embed_image`` and ``pair_score``. Calls are addressed to a *role*
(describer, extractor, sa_reasoner, ca_reasoner, embedder, scorer) so that
each stage of the pipeline can be bound to a different endpoint. Two
backends ship with the package:

* :class:`HttpGateway` speaks the OpenAI-compatible ``/chat/completions``
  and ``/embeddings`` routes with bounded retries and exponential backoff.
* :class:`MockGateway` replays a deterministic script and is the backend
  every offline test runs against. Identical request digests always map to
  identical responses, across process restarts.

Mock script format (JSON, documented bit-exactly in the README):

    {
      "dim": 16,
      "responses": {"<sha256 request digest>": "reply text"},
      "rules": [
        {"kind": "chat", "role": "extractor", "contains": "raccoon",
         "tag_contains": "#s0", "response": "reply text"}
      ],
      "pair_scores": [["text a", "text b", 0.9]],
      "embeddings": {"exact text": [0.1, 0.2, ...]},
      "defaults": {"chat": {"extractor": "{}"}},
      "frame_cap": 0
    }

Lookup order: exact digest, then first matching rule (every present field
must match), then the per-kind/per-role default, then a deterministic
fallback derived from the digest. Embeddings fall back to a hash-seeded
unit vector so unscripted texts still embed deterministically.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, GatewayError, MissingFrames

logger = logging.getLogger(__name__)

ROLES = ("describer", "extractor", "sa_reasoner", "ca_reasoner", "embedder", "scorer")
KINDS = ("chat", "vision_chat", "embed_text", "embed_image", "pair_score")

RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


@dataclass
class EndpointConfig:
    """One remote endpoint binding for a role."""

    base_url: str
    model: str
    api_key_env: str = ""
    timeout: float = 30.0
    retry_max: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    frame_cap: int = 0
    max_concurrency: int = 8
    score_url: str = ""


@dataclass
class GatewayConfig:
    """Backend selection plus per-role endpoint bindings."""

    backend: str = "mock"
    role_bindings: dict[str, EndpointConfig] = field(default_factory=dict)
    mock_script_path: str | None = None
    mock_dim: int = 16

    def validate(self) -> None:
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"unknown gateway backend {self.backend!r}")
        if self.backend == "http":
            missing = [r for r in ROLES if r not in self.role_bindings]
            if missing:
                raise ConfigError(f"unbound gateway roles: {', '.join(missing)}")
        extra = [r for r in self.role_bindings if r not in ROLES]
        if extra:
            raise ConfigError(f"unknown gateway roles: {', '.join(extra)}")


def request_digest(kind: str, role: str, payload, temperature: float | None = None,
                   tag: str | None = None) -> str:
    """Stable sha256 digest of a request; the mock's lookup key."""
    body = json.dumps(
        {"kind": kind, "role": role, "payload": payload,
         "temperature": temperature, "tag": tag},
        sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def subsample_indices(n: int, cap: int) -> list[int]:
    """Uniform-by-index subsample: round(linspace) over the frame list."""
    if cap <= 0 or n <= cap:
        return list(range(n))
    return [int(i) for i in np.rint(np.linspace(0, n - 1, cap))]


def hash_unit_vector(text: str, dim: int) -> np.ndarray:
    """Deterministic unit vector for a text, stable across processes.

    Values are rounded to float32 precision so in-memory vectors match what
    the store writes back, keeping split-and-resume runs bit-identical.
    """
    seed = int.from_bytes(hashlib.sha256(("emb:" + text).encode("utf-8")).digest()[:8], "big")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    return v.astype(np.float32).astype(np.float64)


def _normalize32(vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise GatewayError("embedding backend returned a zero vector", kind="protocol")
    return (v / n).astype(np.float32).astype(np.float64)


class ModelGateway:
    """Base class: thread-safe per-(kind, role) call counters."""

    def __init__(self) -> None:
        self._calls: Counter = Counter()
        self._count_lock = threading.Lock()

    @staticmethod
    def _check_temperature(temperature: float) -> None:
        if not 0.0 <= temperature <= 2.0:
            raise GatewayError(f"temperature {temperature} outside [0, 2]",
                               kind="protocol")

    def _record(self, kind: str, role: str) -> None:
        with self._count_lock:
            self._calls[(kind, role)] += 1

    def call_count(self, kind: str | None = None, role: str | None = None) -> int:
        with self._count_lock:
            return sum(v for (k, r), v in self._calls.items()
                       if (kind is None or k == kind) and (role is None or r == role))

    def call_counts(self) -> dict[str, int]:
        with self._count_lock:
            out: Counter = Counter()
            for (k, _r), v in self._calls.items():
                out[k] += v
            return dict(sorted(out.items()))

    def reset_counts(self) -> None:
        with self._count_lock:
            self._calls.clear()

    # Subclasses implement the five request kinds.
    def chat(self, role: str, messages: list[dict], temperature: float = 0.0,
             max_tokens: int = 1024, tag: str | None = None) -> str:
        raise NotImplementedError

    def vision_chat(self, role: str, frame_locators: list[str], prompt: str,
                    temperature: float = 0.0, max_tokens: int = 1024,
                    tag: str | None = None) -> str:
        raise NotImplementedError

    def embed_text(self, role: str, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError

    def embed_image(self, role: str, locators: list[str]) -> list[np.ndarray]:
        raise NotImplementedError

    def pair_score(self, role: str, text_a: str, text_b: str) -> float:
        raise NotImplementedError


class MockGateway(ModelGateway):
    """Deterministic scripted backend for offline runs and tests.

    ``call_hook``, when set, is invoked as ``hook(kind, role)`` before each
    call; tests use it to gate concurrency-sensitive scenarios.
    """

    def __init__(self, script: dict | None = None, script_path: str | Path | None = None,
                 dim: int = 16, call_hook: Callable[[str, str], None] | None = None) -> None:
        super().__init__()
        if script_path is not None:
            script = json.loads(Path(script_path).read_text())
        self.script = script or {}
        self.dim = int(self.script.get("dim", dim))
        self.frame_cap = int(self.script.get("frame_cap", 0))
        self.call_hook = call_hook
        self._pair_table: dict[tuple[str, str], float] = {}
        for a, b, s in self.script.get("pair_scores", []):
            key = (a, b) if a <= b else (b, a)
            self._pair_table[key] = float(s)

    # -- scripted lookup -------------------------------------------------

    def _lookup(self, kind: str, role: str, flat_payload: str, digest: str,
                tag: str | None) -> str:
        responses = self.script.get("responses", {})
        if digest in responses:
            return responses[digest]
        for rule in self.script.get("rules", []):
            if "kind" in rule and rule["kind"] != kind:
                continue
            if "role" in rule and rule["role"] != role:
                continue
            if "contains" in rule and rule["contains"] not in flat_payload:
                continue
            if "tag_contains" in rule and (tag is None or rule["tag_contains"] not in tag):
                continue
            return rule["response"]
        defaults = self.script.get("defaults", {}).get(kind, {})
        if isinstance(defaults, str):
            return defaults
        if role in defaults:
            return defaults[role]
        if "*" in defaults:
            return defaults["*"]
        if kind == "chat" and role == "extractor":
            # Benign empty extraction keeps unscripted ingests parseable.
            return '{"entities": [], "relations": [], "participations": []}'
        return f"mock:{kind}:{digest[:12]}"

    # -- request kinds ---------------------------------------------------

    def chat(self, role: str, messages: list[dict], temperature: float = 0.0,
             max_tokens: int = 1024, tag: str | None = None) -> str:
        self._check_temperature(temperature)
        if self.call_hook:
            self.call_hook("chat", role)
        self._record("chat", role)
        flat = "\n".join(str(m.get("content", "")) for m in messages)
        digest = request_digest("chat", role, flat, temperature, tag)
        return self._lookup("chat", role, flat, digest, tag)

    def vision_chat(self, role: str, frame_locators: list[str], prompt: str,
                    temperature: float = 0.0, max_tokens: int = 1024,
                    tag: str | None = None) -> str:
        self._check_temperature(temperature)
        if self.call_hook:
            self.call_hook("vision_chat", role)
        self._record("vision_chat", role)
        if not frame_locators:
            raise GatewayError("vision_chat needs at least one frame locator", kind="protocol")
        for loc in frame_locators:
            if loc.startswith("missing://"):
                raise MissingFrames(f"unresolvable frame locator {loc}")
        idx = subsample_indices(len(frame_locators), self.frame_cap)
        if len(idx) < len(frame_locators):
            logger.info("subsampled %d frames to %d", len(frame_locators), len(idx))
        locs = [frame_locators[i] for i in idx]
        flat = prompt + "\n" + "\n".join(locs)
        digest = request_digest("vision_chat", role, [prompt, locs], temperature, tag)
        return self._lookup("vision_chat", role, flat, digest, tag)

    def _text_vector(self, text: str) -> np.ndarray:
        scripted = self.script.get("embeddings", {})
        if text in scripted:
            return _normalize32(np.asarray(scripted[text], dtype=np.float64))
        return hash_unit_vector(text, self.dim)

    def embed_text(self, role: str, texts: list[str]) -> list[np.ndarray]:
        if self.call_hook:
            self.call_hook("embed_text", role)
        self._record("embed_text", role)
        if not texts:
            return []
        for t in texts:
            if not t.strip():
                raise GatewayError("cannot embed empty text", kind="protocol")
        vectors = [self._text_vector(t) for t in texts]
        for v in vectors:
            if v.shape[0] != self.dim:
                raise DimensionError(f"scripted embedding has dimension "
                                     f"{v.shape[0]}, gateway uses {self.dim}")
        return vectors

    def embed_image(self, role: str, locators: list[str]) -> list[np.ndarray]:
        if self.call_hook:
            self.call_hook("embed_image", role)
        self._record("embed_image", role)
        if not locators:
            return []
        for loc in locators:
            if loc.startswith("missing://"):
                raise MissingFrames(f"unresolvable frame locator {loc}")
        return [self._text_vector("image:" + loc) for loc in locators]

    def pair_score(self, role: str, text_a: str, text_b: str) -> float:
        if self.call_hook:
            self.call_hook("pair_score", role)
        self._record("pair_score", role)
        if not text_a.strip() or not text_b.strip():
            raise GatewayError("pair_score needs two non-empty texts", kind="protocol")
        if text_a == text_b:
            return 1.0
        key = (text_a, text_b) if text_a <= text_b else (text_b, text_a)
        if key in self._pair_table:
            return self._pair_table[key]
        va, vb = self._text_vector(key[0]), self._text_vector(key[1])
        return float(np.dot(va, vb))


class HttpGateway(ModelGateway):
    """OpenAI-compatible remote backend with bounded retries per role.

    Each role gets its own HTTP client, concurrency semaphore and retry
    budget, so a failing endpoint for one role never starves another.
    ``transport`` is injectable for tests (httpx.MockTransport).
    """

    def __init__(self, config: GatewayConfig, transport=None) -> None:
        super().__init__()
        import httpx

        config.validate()
        self.config = config
        self._clients: dict[str, "httpx.Client"] = {}
        self._limits: dict[str, threading.Semaphore] = {}
        self._endpoints: dict[str, EndpointConfig] = {}
        for role, ep in config.role_bindings.items():
            headers = {}
            if ep.api_key_env:
                key = os.environ.get(ep.api_key_env, "")
                if not key:
                    raise ConfigError(f"env var {ep.api_key_env} for role {role} is unset")
                headers["Authorization"] = f"Bearer {key}"
            self._clients[role] = httpx.Client(
                base_url=ep.base_url.rstrip("/"), timeout=ep.timeout,
                headers=headers, transport=transport)
            self._limits[role] = threading.Semaphore(ep.max_concurrency)
            self._endpoints[role] = ep

    def close(self) -> None:
        for client in self._clients.values():
            client.close()

    def _endpoint(self, role: str) -> EndpointConfig:
        try:
            return self._endpoints[role]
        except KeyError:
            raise ConfigError(f"role {role!r} has no endpoint binding") from None

    def _post(self, role: str, path: str, payload: dict) -> dict:
        import httpx

        ep = self._endpoint(role)
        client = self._clients[role]
        last: Exception | None = None
        for attempt in range(ep.retry_max + 1):
            if attempt:
                time.sleep(min(ep.backoff_cap, ep.backoff_base * 2 ** (attempt - 1)))
            try:
                with self._limits[role]:
                    resp = client.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last = GatewayError(f"{role} timeout: {exc}", kind="timeout")
                continue
            except httpx.HTTPError as exc:
                last = GatewayError(f"{role} transport error: {exc}", kind="http")
                continue
            if resp.status_code in (401, 403):
                raise GatewayError(f"{role} auth rejected ({resp.status_code})", kind="auth")
            if resp.status_code in RETRYABLE_STATUS:
                last = GatewayError(f"{role} http {resp.status_code}", kind="http")
                continue
            if resp.status_code >= 400:
                raise GatewayError(f"{role} http {resp.status_code}: {resp.text[:200]}",
                                   kind="http")
            return resp.json()
        assert last is not None
        raise last

    def chat(self, role: str, messages: list[dict], temperature: float = 0.0,
             max_tokens: int = 1024, tag: str | None = None) -> str:
        self._check_temperature(temperature)
        self._record("chat", role)
        ep = self._endpoint(role)
        body = self._post(role, "/chat/completions", {
            "model": ep.model, "messages": messages,
            "temperature": temperature, "max_tokens": max_tokens})
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"{role} malformed chat response: {exc}", kind="protocol")

    def _image_url(self, locator: str) -> str:
        if locator.startswith(("http://", "https://", "data:")):
            return locator
        path = Path(locator)
        if not path.is_file():
            raise MissingFrames(f"unresolvable frame locator {locator}")
        b64 = base64.b64encode(path.read_bytes()).decode("ascii")
        suffix = path.suffix.lstrip(".") or "jpeg"
        return f"data:image/{suffix};base64,{b64}"

    def vision_chat(self, role: str, frame_locators: list[str], prompt: str,
                    temperature: float = 0.0, max_tokens: int = 1024,
                    tag: str | None = None) -> str:
        self._check_temperature(temperature)
        self._record("vision_chat", role)
        if not frame_locators:
            raise GatewayError("vision_chat needs at least one frame locator", kind="protocol")
        ep = self._endpoint(role)
        idx = subsample_indices(len(frame_locators), ep.frame_cap)
        if len(idx) < len(frame_locators):
            logger.info("subsampled %d frames to %d for role %s",
                        len(frame_locators), len(idx), role)
        content: list[dict] = [{"type": "text", "text": prompt}]
        for i in idx:
            content.append({"type": "image_url",
                            "image_url": {"url": self._image_url(frame_locators[i])}})
        body = self._post(role, "/chat/completions", {
            "model": ep.model, "messages": [{"role": "user", "content": content}],
            "temperature": temperature, "max_tokens": max_tokens})
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"{role} malformed chat response: {exc}", kind="protocol")

    def _embed(self, role: str, inputs: list) -> list[np.ndarray]:
        ep = self._endpoint(role)
        body = self._post(role, "/embeddings", {"model": ep.model, "input": inputs})
        try:
            rows = [np.asarray(d["embedding"], dtype=np.float64) for d in body["data"]]
        except (KeyError, TypeError) as exc:
            raise GatewayError(f"{role} malformed embeddings response: {exc}", kind="protocol")
        if len(rows) != len(inputs):
            raise GatewayError(f"{role} returned {len(rows)} embeddings for "
                               f"{len(inputs)} inputs", kind="protocol")
        dims = {r.shape[0] for r in rows}
        if len(dims) > 1:
            raise DimensionError(f"{role} returned mixed embedding dimensions {dims}")
        return [_normalize32(r) for r in rows]

    def embed_text(self, role: str, texts: list[str]) -> list[np.ndarray]:
        self._record("embed_text", role)
        if not texts:
            return []
        for t in texts:
            if not t.strip():
                raise GatewayError("cannot embed empty text", kind="protocol")
        return self._embed(role, texts)

    def embed_image(self, role: str, locators: list[str]) -> list[np.ndarray]:
        self._record("embed_image", role)
        if not locators:
            return []
        return self._embed(role, [{"image": self._image_url(loc)} for loc in locators])

    def pair_score(self, role: str, text_a: str, text_b: str) -> float:
        self._record("pair_score", role)
        if not text_a.strip() or not text_b.strip():
            raise GatewayError("pair_score needs two non-empty texts", kind="protocol")
        ep = self._endpoint(role)
        a, b = (text_a, text_b) if text_a <= text_b else (text_b, text_a)
        if ep.score_url:
            body = self._post(role, ep.score_url, {"model": ep.model, "pairs": [[a, b]]})
            try:
                return float(body["scores"][0])
            except (KeyError, IndexError, TypeError) as exc:
                raise GatewayError(f"{role} malformed score response: {exc}", kind="protocol")
        # Cosine-of-embeddings fallback when no dedicated scorer route exists.
        va, vb = self._embed(role, [a, b])
        return float(np.dot(va, vb))


def build_gateway(config: GatewayConfig, call_hook=None, transport=None) -> ModelGateway:
    """Construct the backend selected by ``config``; validates role bindings."""
    config.validate()
    if config.backend == "mock":
        return MockGateway(script_path=config.mock_script_path, dim=config.mock_dim,
                           call_hook=call_hook)
    return HttpGateway(config, transport=transport)
