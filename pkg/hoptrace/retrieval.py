"""
Passage retrieval: the corpus loader, an in-memory Okapi BM25 index used by mock mode and the
fixtures, and a client for a remote retrieval service.
"""

from collections import Counter
from dataclasses import dataclass
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import requests

from . import operation
from .backends import BackendConfig, RequestLimiter, call_with_retries
from .errors import BackendError, DatasetFormatError, TransientBackendError
from .model import Document, answer_tokens

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class Passage:
    id: str
    title: str
    text: str


@dataclass(frozen=True, slots=True)
class ScoredPassage:
    passage: Passage
    score: float


class Retriever(Protocol):
    def search(self, query: str, top_k: int) -> list[ScoredPassage]:
        """Up to `top_k` passages, best first."""
        ...


def load_corpus(path: Path) -> list[Passage]:
    passages: list[Passage] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"invalid JSON: {e.msg}", line=line_number, path=str(path)) from e
            if not isinstance(obj, dict):
                raise DatasetFormatError("expected a JSON object", line=line_number, path=str(path))
            for key in ("id", "text"):
                if key not in obj:
                    raise DatasetFormatError(f"missing field {key!r}", line=line_number, path=str(path))
            passage = Passage(id=str(obj["id"]), title=str(obj.get("title", "")), text=str(obj["text"]))
            if passage.id in seen:
                raise DatasetFormatError(f"duplicate passage id {passage.id!r}", line=line_number, path=str(path))
            seen.add(passage.id)
            passages.append(passage)
    logger.debug("loaded %d passages from %s", len(passages), path)
    return passages


class InMemoryRetriever:
    """
    Okapi BM25 over normalized title and body tokens.

    Passages sharing no token with the query are never returned; equal scores keep corpus order.
    """

    def __init__(self, passages: Iterable[Passage], k1: float = 1.5, b: float = 0.75):
        self.passages: list[Passage] = list(passages)
        self.k1: float = k1
        self.b: float = b
        self.term_freqs: list[Counter[str]] = []
        self.lengths: list[int] = []
        df: Counter[str] = Counter()
        for passage in self.passages:
            tokens = answer_tokens(f"{passage.title} {passage.text}")
            tf = Counter(tokens)
            self.term_freqs.append(tf)
            self.lengths.append(len(tokens))
            df.update(tf.keys())
        n = len(self.passages)
        self.avg_length: float = (sum(self.lengths) / n) if n else 0.0
        self.idf: dict[str, float] = {
            term: math.log(1 + (n - count + 0.5) / (count + 0.5)) for term, count in df.items()
        }

    @classmethod
    def from_file(cls, path: Path) -> "InMemoryRetriever":
        return cls(load_corpus(path))

    def score(self, query: str) -> list[float]:
        terms = [t for t in dict.fromkeys(answer_tokens(query)) if t in self.idf]
        scores = []
        for tf, length in zip(self.term_freqs, self.lengths):
            norm = self.k1 * (1 - self.b + self.b * length / self.avg_length) if self.avg_length else self.k1
            s = 0.0
            for term in terms:
                f = tf.get(term, 0)
                if f:
                    s += self.idf[term] * f * (self.k1 + 1) / (f + norm)
            scores.append(s)
        return scores

    def search(self, query: str, top_k: int) -> list[ScoredPassage]:
        if not self.passages:
            return []
        scores = self.score(query)
        ranked = sorted(
            (i for i, s in enumerate(scores) if s > 0),
            key=lambda i: (-scores[i], i),
        )
        return [ScoredPassage(self.passages[i], scores[i]) for i in ranked[:top_k]]


class RemoteRetriever:
    """A retrieval service answering POST {query, top_k} with {documents: [{id, title, text, score}]}."""

    def __init__(self, config: BackendConfig, limiter: RequestLimiter | None = None):
        if not config.endpoint_url:
            raise ValueError("a remote retriever needs an endpoint_url")
        self.config: BackendConfig = config
        self.limiter: RequestLimiter = limiter or RequestLimiter(config.max_concurrent_requests)
        self.session = requests.Session()

    def _post(self, query: str, top_k: int) -> dict[str, Any]:
        headers = {}
        key = self.config.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            response = self.session.post(
                self.config.endpoint_url,
                json={"query": query, "top_k": top_k},
                headers=headers,
                timeout=self.config.timeout_ms / 1000,
            )
        except (requests.Timeout, requests.ConnectionError) as e:
            raise TransientBackendError(f"{type(e).__name__}: {e}") from e
        except requests.RequestException as e:
            raise BackendError(f"retriever request failed: {type(e).__name__}: {e}") from e
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"retriever returned HTTP {response.status_code}")
        if response.status_code != 200:
            raise BackendError(f"retriever returned HTTP {response.status_code}: {response.text[:200]}")
        try:
            return response.json()
        except ValueError as e:
            # requests.JSONDecodeError subclasses ValueError
            raise BackendError(f"retriever returned a non-JSON body: {response.text[:200]!r}") from e

    def search(self, query: str, top_k: int) -> list[ScoredPassage]:
        body, _ = call_with_retries(
            lambda: self._post(query, top_k),
            max_retries=self.config.max_retries,
            backoff_ms=self.config.retry_backoff_ms,
            context=f"retriever [{query[:60]}]",
            limiter=self.limiter,
        )
        try:
            return [
                ScoredPassage(Passage(id=str(d["id"]), title=str(d.get("title", "")), text=str(d["text"])),
                              float(d.get("score", 0.0)))
                for d in body["documents"]
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise BackendError(f"malformed retriever response: {e!r}") from e


def _ranked(hits: Sequence[ScoredPassage], top_k: int) -> list[Document]:
    # stable: equal scores keep the retriever's order
    ordered = sorted(hits, key=lambda h: -h.score)[:top_k]
    return [
        Document(doc_id=h.passage.id, title=h.passage.title, text=h.passage.text, score=h.score, rank=rank)
        for rank, h in enumerate(ordered, start=1)
    ]


@operation(module="policy-backends")
def retrieve(query: str, top_k: int, retriever: Retriever) -> list[Document]:
    """At most `top_k` documents ranked 1..m by non-increasing score."""
    if not query.strip():
        raise ValueError("query must not be empty")
    if top_k < 1:
        raise ValueError(f"top_k must be at least 1, got {top_k}")
    return _ranked(retriever.search(query, top_k), top_k)
