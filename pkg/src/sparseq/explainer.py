"""Augmentation oracles.

Three backends produce the replacement feature row for a node: a synthetic
test double, a precomputed ``aug_features.bin`` store, and an
OpenAI-compatible chat-completions endpoint whose answer is turned into a
vector by an encoder hook. :class:`Explainer` fronts a backend with the
persistent ``aug_cache.jsonl`` cache, bounded parallelism and a cost ledger.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import httpx
import numpy as np

from .tagcore import read_feature_bin

PROMPT_TEMPLATE = (
    "Question: {question} If multiple {options} apply, provide a comma-separated list ordered "
    "from most to least related, then for each choice you gave, explain how it is present in the "
    "text. Please limit the number of output {outputs} to 3 and limit the answer length to "
    "{budget} words.\nAnswer:"
)
_CONSTRAINTS = {
    "categories": ("options", "categories"),
    "numerical": ("values", "numerical values"),
}


class OracleError(RuntimeError):
    pass


class TransportError(OracleError):
    pass


class EmptyCompletionError(OracleError):
    pass


class EncoderError(OracleError):
    pass


class NotCachedError(OracleError, KeyError):
    def __str__(self):
        return "augmentation not cached: " + ", ".join(map(str, self.args))


@dataclass(frozen=True)
class OracleRequest:
    node_id: int
    text: str = ""
    task_question: str = ""
    word_budget: int = 50
    constraint_kind: str = "categories"

    def __post_init__(self):
        if self.word_budget < 1:
            raise ValueError("word_budget must be >= 1")


@dataclass
class OracleResponse:
    node_id: int
    aug_embedding: np.ndarray
    raw_text: str | None = None
    latency: float = 0.0
    from_cache: bool = False


@dataclass
class CostLedger:
    new_calls: int = 0
    cache_hits: int = 0
    total_latency: float = 0.0
    log: list = field(default_factory=list)

    @property
    def total_requests(self) -> int:
        return self.new_calls + self.cache_hits

    def record(self, resp: OracleResponse) -> None:
        if resp.from_cache:
            self.cache_hits += 1
        else:
            self.new_calls += 1
            self.total_latency += resp.latency
        self.log.append({"node_id": resp.node_id, "from_cache": resp.from_cache, "latency": resp.latency})


def build_prompt(question: str, constraint_kind: str = "categories", word_budget: int = 50) -> str:
    if not question:
        raise ValueError("question must be non-empty")
    try:
        options, outputs = _CONSTRAINTS[constraint_kind]
    except KeyError:
        raise ValueError(f"unknown constraint kind {constraint_kind!r}") from None
    return PROMPT_TEMPLATE.format(question=question.strip(), options=options, outputs=outputs, budget=word_budget)


def compose_message(text: str, prompt: str) -> str:
    return f"Text: {text}\n{prompt}"


def prompt_hash(*parts: str) -> str:
    return hashlib.sha256("\x1f".join(parts).encode()).hexdigest()[:16]


# --- encoders -------------------------------------------------------------------


class HashingEncoder:
    """Signed feature-hashing bag of words, L2-normalized."""

    _token = re.compile(r"[a-z0-9]+")

    def __init__(self, dim: int):
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in self._token.findall(text.lower()):
            digest = hashlib.blake2b(tok.encode(), digest_size=8).digest()
            h = int.from_bytes(digest, "little")
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise EncoderError("text produced an empty embedding")
        return (vec / norm).astype(np.float32)


# --- backends -------------------------------------------------------------------


def synthetic_augment(req: OracleRequest, ground_truth_aug: np.ndarray, noise_sigma: float, seed: int) -> OracleResponse:
    if not 0 <= req.node_id < ground_truth_aug.shape[0]:
        raise OracleError(f"node id {req.node_id} out of range")
    row = np.asarray(ground_truth_aug[req.node_id], dtype=np.float32).copy()
    if noise_sigma > 0:
        rng = np.random.default_rng([seed, req.node_id])
        row = (row + noise_sigma * rng.standard_normal(row.shape[0])).astype(np.float32)
    return OracleResponse(req.node_id, row)


def cached_augment(req: OracleRequest, aug_store: np.ndarray, covered: np.ndarray | None = None) -> OracleResponse:
    if not 0 <= req.node_id < aug_store.shape[0] or (covered is not None and not covered[req.node_id]):
        raise NotCachedError(req.node_id)
    return OracleResponse(req.node_id, np.array(aug_store[req.node_id], dtype=np.float32), from_cache=True)


@dataclass
class EndpointConfig:
    url: str
    model: str
    api_key: str | None = None
    max_tokens: int = 128
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    encoder: Callable[[str], np.ndarray] | None = None

    @classmethod
    def from_env(cls, model: str, **kw) -> "EndpointConfig":
        url = kw.pop("url", None) or os.environ.get("SPARSEQ_ENDPOINT")
        if not url:
            raise OracleError("no endpoint configured (set SPARSEQ_ENDPOINT)")
        kw.setdefault("api_key", os.environ.get("SPARSEQ_API_KEY"))
        return cls(url=url, model=model, **kw)


_RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


def _post_completion(cfg: EndpointConfig, message: str, client: httpx.Client) -> str:
    url = cfg.url.rstrip("/") + "/v1/chat/completions"
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"
    body = {"model": cfg.model, "messages": [{"role": "user", "content": message}], "max_tokens": cfg.max_tokens}
    last_exc: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            time.sleep(min(cfg.backoff_cap, cfg.backoff_base * 2 ** (attempt - 1)))
        try:
            resp = client.post(url, json=body, headers=headers, timeout=cfg.timeout)
        except httpx.HTTPError as exc:
            last_exc = exc
            continue
        if resp.status_code in _RETRY_STATUS:
            last_exc = TransportError(f"HTTP {resp.status_code} from {url}")
            continue
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion body from {url}") from exc
        if not isinstance(content, str) or not content.strip():
            raise EmptyCompletionError(f"empty completion for request to {url}")
        return content
    raise TransportError(f"request to {url} failed after {cfg.max_retries + 1} attempts: {last_exc}")


def remote_augment(req: OracleRequest, endpoint_cfg: EndpointConfig, client: httpx.Client | None = None) -> OracleResponse:
    if not req.text:
        raise OracleError(f"node {req.node_id} has no text to explain")
    if endpoint_cfg.encoder is None:
        raise EncoderError("remote backend needs an encoder")
    message = compose_message(req.text, build_prompt(req.task_question, req.constraint_kind, req.word_budget))
    t0 = time.perf_counter()
    if client is None:
        with httpx.Client() as own:
            raw = _post_completion(endpoint_cfg, message, own)
    else:
        raw = _post_completion(endpoint_cfg, message, client)
    latency = time.perf_counter() - t0
    try:
        emb = np.asarray(endpoint_cfg.encoder(raw), dtype=np.float32)
    except EncoderError:
        raise
    except Exception as exc:
        raise EncoderError(f"encoder failed on node {req.node_id}: {exc}") from exc
    if not np.all(np.isfinite(emb)):
        raise EncoderError(f"encoder returned non-finite values for node {req.node_id}")
    return OracleResponse(req.node_id, emb, raw_text=raw, latency=latency)


class SyntheticBackend:
    persistent = True

    def __init__(self, ground_truth_aug: np.ndarray, noise_sigma: float = 0.0, seed: int = 0, delay: float = 0.0):
        self.ground_truth_aug = ground_truth_aug
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.delay = delay
        self.dim = ground_truth_aug.shape[1]
        self.tag = f"synthetic:{noise_sigma!r}:{seed}"

    def augment(self, req: OracleRequest) -> OracleResponse:
        t0 = time.perf_counter()
        if self.delay:
            time.sleep(self.delay)
        resp = synthetic_augment(req, self.ground_truth_aug, self.noise_sigma, self.seed)
        resp.latency = time.perf_counter() - t0
        return resp


class FileBackend:
    """Serves rows of a (memory-mapped) ``aug_features.bin``."""

    persistent = False

    def __init__(self, aug_store: np.ndarray | str | os.PathLike, covered: np.ndarray | None = None):
        if not isinstance(aug_store, np.ndarray):
            aug_store = read_feature_bin(aug_store, mmap=True)
        self.aug_store = aug_store
        self.covered = covered
        self.dim = aug_store.shape[1]
        self.tag = "file"

    def augment(self, req: OracleRequest) -> OracleResponse:
        return cached_augment(req, self.aug_store, self.covered)


class RemoteBackend:
    persistent = True

    def __init__(self, endpoint_cfg: EndpointConfig, dim: int):
        if endpoint_cfg.encoder is None:
            endpoint_cfg.encoder = HashingEncoder(dim)
        self.cfg = endpoint_cfg
        self.dim = dim
        self.tag = f"remote:{endpoint_cfg.model}"
        self._local = threading.local()

    def augment(self, req: OracleRequest) -> OracleResponse:
        client = getattr(self._local, "client", None)
        if client is None:
            client = self._local.client = httpx.Client()
        return remote_augment(req, self.cfg, client)


# --- persistent cache + front end -----------------------------------------------


class PersistentCache:
    """Append-only ``aug_cache.jsonl`` keyed by (dataset id, node id, prompt hash)."""

    def __init__(self, path: str | os.PathLike, dataset_id: str = ""):
        self.path = Path(path)
        self.dataset_id = dataset_id
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, int, str], dict] = {}
        self.appended = 0
        if self.path.exists():
            with open(self.path) as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        key = (rec.get("dataset_id", ""), int(rec["node_id"]), rec["prompt_hash"])
                        self._entries[key] = rec

    def get(self, node_id: int, phash: str) -> dict | None:
        return self._entries.get((self.dataset_id, node_id, phash))

    def put(self, resp: OracleResponse, phash: str) -> None:
        rec = {
            "dataset_id": self.dataset_id,
            "node_id": int(resp.node_id),
            "prompt_hash": phash,
            "raw_text": resp.raw_text,
            "embedding": [float(v) for v in resp.aug_embedding],
        }
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            self._entries[(self.dataset_id, rec["node_id"], phash)] = rec
            self.appended += 1

    def __len__(self):
        return len(self._entries)


class Explainer:
    """Front end the driver talks to: ``query(node_ids) -> {id: response}``."""

    def __init__(self, backend, texts: list[str] | None = None, question: str = "Which category does this node belong to?",
                 constraint_kind: str = "categories", word_budget: int = 50, cache: PersistentCache | None = None,
                 parallelism: int = 4):
        self.backend = backend
        self.texts = texts
        self.question = question
        self.constraint_kind = constraint_kind
        self.word_budget = word_budget
        self.cache = cache
        self.parallelism = max(1, int(parallelism))
        self.ledger = CostLedger()
        self.prompt_hash = prompt_hash(build_prompt(question, constraint_kind, word_budget), backend.tag)

    @property
    def dim(self) -> int:
        return self.backend.dim

    def request(self, node_id: int) -> OracleRequest:
        text = self.texts[node_id] if self.texts is not None else ""
        return OracleRequest(int(node_id), text, self.question, self.word_budget, self.constraint_kind)

    def _from_cache(self, node_id: int) -> OracleResponse | None:
        if self.cache is None or not self.backend.persistent:
            return None
        rec = self.cache.get(node_id, self.prompt_hash)
        if rec is None:
            return None
        return OracleResponse(node_id, np.asarray(rec["embedding"], dtype=np.float32), rec.get("raw_text"), 0.0, True)

    def covers(self, node_ids) -> bool:
        """True when every node can be answered without a new oracle call."""
        if not self.backend.persistent:
            return True
        return all(self._from_cache(int(i)) is not None for i in node_ids)

    def query(self, node_ids) -> dict[int, OracleResponse]:
        ids = sorted({int(i) for i in node_ids})
        out: dict[int, OracleResponse] = {}
        pending = []
        for nid in ids:
            hit = self._from_cache(nid)
            if hit is not None:
                out[nid] = hit
            else:
                pending.append(nid)
        if pending:
            reqs = [self.request(nid) for nid in pending]
            if self.parallelism == 1 or len(reqs) == 1:
                fresh = [self.backend.augment(r) for r in reqs]
            else:
                with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                    fresh = list(pool.map(self.backend.augment, reqs))
            for resp in fresh:
                out[resp.node_id] = resp
                if self.cache is not None and self.backend.persistent and not resp.from_cache:
                    self.cache.put(resp, self.prompt_hash)
        for nid in ids:
            self.ledger.record(out[nid])
        return out
