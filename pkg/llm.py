from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

from corpus import Passage
from errors import CorruptFile, InvalidConfig, ProtocolError, TranscriptMiss, TransportError
from hashing import fnv1a_64
from sparse_index import tokenize

logger = logging.getLogger(__name__)

PROMPTS_DIR = Path(__file__).resolve().parent / "prompts"

CHAT_BACKENDS = ("http", "scripted", "heuristic", "gemini")
COMPRESSION_MODES = ("concatenated", "document_wise")
API_KEY_ENV = "DECOR_API_KEY"
GEMINI_API_KEY_ENV = "GEMINI_API_KEY"

RETRY_ATTEMPTS = 3
RETRY_INITIAL_BACKOFF_SEC = 0.5

DOCUMENT_SEPARATOR = "\n---\n"
FALLBACK_WORDS = 50
HEURISTIC_MAX_SENTENCES = 6


def load_prompt(name: str) -> str:
    return (PROMPTS_DIR / f"{name}.txt").read_text(encoding="utf-8").rstrip("\n")


DECOMPOSITION_PROMPT = load_prompt("decomposition")
COMPRESSION_PROMPT = load_prompt("compression")
GENERATION_SYSTEM_PROMPT = load_prompt("generation_system")
HYDE_TEMPLATE = load_prompt("hyde")
QUERY2DOC_TEMPLATE = load_prompt("query2doc")
STOPWORDS = frozenset(load_prompt("stopwords").split())


@dataclass(frozen=True)
class ChatClientConfig:
    backend: str = "heuristic"
    endpoint_url: str = ""
    model_name: str = ""
    transcript_path: str = ""
    temperature: float = 0.0
    max_tokens: int = 512
    max_concurrent: int = 4
    record: bool = False
    timeout_sec: float = 120.0

    def __post_init__(self) -> None:
        if self.backend not in CHAT_BACKENDS:
            known = ", ".join(CHAT_BACKENDS)
            raise InvalidConfig(f"Unknown llm backend '{self.backend}'. Known backends: [{known}]")
        if self.backend == "http" and not (self.endpoint_url and self.model_name):
            raise InvalidConfig("llm backend 'http' requires endpoint_url and model_name")
        if self.backend == "gemini" and not self.model_name:
            raise InvalidConfig("llm backend 'gemini' requires model_name")
        if self.backend == "scripted" and not self.transcript_path:
            raise InvalidConfig("llm backend 'scripted' requires transcript_path")
        if self.record and (self.backend == "scripted" or not self.transcript_path):
            raise InvalidConfig("llm record mode needs a non-scripted backend and a transcript_path")
        if self.temperature < 0:
            raise InvalidConfig(f"llm temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1 or self.max_concurrent < 1:
            raise InvalidConfig("llm max_tokens and max_concurrent must be >= 1")


@dataclass(frozen=True)
class SubQuery:
    text: str
    ordinal: int


@dataclass(frozen=True)
class CompressedDoc:
    text: str
    sub_query_ordinal: int
    source_passage_ids: tuple[str, ...]
    fallback: bool = False


def request_hash(system_prompt: str, user_prompt: str) -> str:
    data = system_prompt.encode("utf-8") + b"\x00" + user_prompt.encode("utf-8")
    return f"{fnv1a_64(data):016x}"


# ----------------------------------------------------------------------
# Transcript (record / replay)
# ----------------------------------------------------------------------
class Transcript:
    """JSON-lines ``{request_hash, response}``; first entry for a hash wins."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line_no, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                        key, response = record["request_hash"], record["response"]
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        reason = type(exc).__name__
                        raise CorruptFile(f"{self.path}:{line_no}: bad transcript record ({reason})") from exc
                    if not isinstance(key, str) or not isinstance(response, str):
                        raise CorruptFile(f"{self.path}:{line_no}: request_hash and response must be strings")
                    self._entries.setdefault(key, response)

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, key: str) -> str | None:
        return self._entries.get(key)

    def append(self, key: str, response: str) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"request_hash": key, "response": response}, ensure_ascii=False) + "\n")


# ----------------------------------------------------------------------
# Backends
# ----------------------------------------------------------------------
class ChatBackend(Protocol):
    def complete(self, system_prompt: str, user_prompt: str) -> str: ...


class OpenAIChatBackend:
    """OpenAI-compatible ``POST {endpoint_url}/v1/chat/completions``."""

    def __init__(self, config: ChatClientConfig, client: Any | None = None) -> None:
        self._config = config
        if client is None:
            from openai import OpenAI

            client = OpenAI(
                base_url=config.endpoint_url.rstrip("/") + "/v1",
                api_key=os.getenv(API_KEY_ENV) or "EMPTY",
                timeout=config.timeout_sec,
                max_retries=0,
            )
        self._client = client

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        import openai

        try:
            response = self._client.chat.completions.create(
                model=self._config.model_name,
                messages=[
                    {"role": "system", "content": system_prompt},
                    {"role": "user", "content": user_prompt},
                ],
                temperature=self._config.temperature,
                max_tokens=self._config.max_tokens,
            )
        except openai.APIError as exc:
            raise TransportError(f"chat completion request failed: {exc}") from exc

        choices = getattr(response, "choices", None) or []
        if not choices:
            raise ProtocolError("chat completion response has no choices")
        content = getattr(getattr(choices[0], "message", None), "content", None)
        if not isinstance(content, str):
            raise ProtocolError("chat completion first choice has no text content")
        return content


class GeminiChatBackend:
    def __init__(self, config: ChatClientConfig, client: Any | None = None) -> None:
        self._config = config
        if client is None:
            from google import genai

            client = genai.Client(api_key=os.getenv(GEMINI_API_KEY_ENV))
        self._client = client

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        from google.genai import errors as genai_errors
        from google.genai import types

        try:
            response = self._client.models.generate_content(
                model=self._config.model_name,
                contents=user_prompt,
                config=types.GenerateContentConfig(
                    system_instruction=system_prompt,
                    temperature=self._config.temperature,
                    max_output_tokens=self._config.max_tokens,
                    candidate_count=1,
                ),
            )
        except genai_errors.APIError as exc:
            raise TransportError(f"gemini generate_content failed: {exc}") from exc

        text = getattr(response, "text", None)
        if not isinstance(text, str):
            raise ProtocolError("gemini response has no text")
        return text


class ScriptedChatBackend:
    def __init__(self, transcript: Transcript) -> None:
        self._transcript = transcript

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        key = request_hash(system_prompt, user_prompt)
        response = self._transcript.lookup(key)
        if response is None:
            raise TranscriptMiss(key)
        return response


class RecordingChatBackend:
    """Passes requests to ``inner`` and appends every answer to the transcript."""

    def __init__(self, inner: ChatBackend, transcript: Transcript) -> None:
        self._inner = inner
        self._transcript = transcript

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        response = self._inner.complete(system_prompt, user_prompt)
        self._transcript.append(request_hash(system_prompt, user_prompt), response)
        return response


_SPLIT_RE = re.compile(r";\s+|\s+and\s+", re.IGNORECASE)
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")
_OPENERS = {"(": ")", "[": "]", "{": "}"}


def split_top_level(question: str) -> list[str]:
    """Split on ``and`` / ``; `` outside brackets and double quotes; ``[question]`` if nothing splits."""
    depth_at: list[int] = []
    depth = 0
    in_quote = False
    for ch in question:
        depth_at.append(depth + (1 if in_quote else 0))
        if ch == '"':
            in_quote = not in_quote
        elif not in_quote and ch in _OPENERS:
            depth += 1
        elif not in_quote and ch in _OPENERS.values():
            depth = max(0, depth - 1)

    pieces: list[str] = []
    start = 0
    for match in _SPLIT_RE.finditer(question):
        if depth_at[match.start()] != 0:
            continue
        pieces.append(question[start : match.start()])
        start = match.end()
    pieces.append(question[start:])

    parts = [piece.strip() for piece in pieces if piece.strip()]
    return parts if len(parts) >= 2 else [question]


def select_salient_sentences(question: str, documents: Sequence[str], limit: int = HEURISTIC_MAX_SENTENCES) -> list[str]:
    terms = set(tokenize(question)) - STOPWORDS
    if not terms:
        return []
    selected: list[str] = []
    for document in documents:
        for sentence in _SENTENCE_RE.split(document.strip()):
            if sentence and terms.intersection(tokenize(sentence)):
                selected.append(sentence.strip())
                if len(selected) >= limit:
                    return selected
    return selected


class HeuristicChatBackend:
    """Rule-based stand-in for an LLM, dispatching on the system prompt."""

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        if system_prompt == DECOMPOSITION_PROMPT:
            return json.dumps(split_top_level(user_prompt), ensure_ascii=False)
        if system_prompt == COMPRESSION_PROMPT:
            question, documents = parse_compression_message(user_prompt)
            return " ".join(select_salient_sentences(question, documents))
        for template in (HYDE_TEMPLATE, QUERY2DOC_TEMPLATE):
            prefix = template.split("{query}")[0]
            if user_prompt.startswith(prefix):
                return user_prompt[len(prefix) :]
        return user_prompt


# ----------------------------------------------------------------------
# Client
# ----------------------------------------------------------------------
class ChatClient:
    """Thread-safe chat client; at most ``max_concurrent`` requests in flight."""

    def __init__(
        self,
        config: ChatClientConfig,
        *,
        backend: ChatBackend | None = None,
        client: Any | None = None,
        sleep_fn: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self._sleep = sleep_fn
        self._slots = threading.BoundedSemaphore(config.max_concurrent)
        self._count_lock = threading.Lock()
        self._calls = 0
        self.transcript: Transcript | None = None

        if backend is None:
            backend = self._build_backend(config, client)
        self._backend = backend

    @property
    def calls(self) -> int:
        return self._calls

    def _build_backend(self, config: ChatClientConfig, client: Any | None) -> ChatBackend:
        if config.transcript_path:
            self.transcript = Transcript(config.transcript_path)

        if config.backend == "scripted":
            assert self.transcript is not None
            return ScriptedChatBackend(self.transcript)

        backend: ChatBackend
        if config.backend == "http":
            backend = OpenAIChatBackend(config, client)
        elif config.backend == "gemini":
            backend = GeminiChatBackend(config, client)
        else:
            backend = HeuristicChatBackend()

        if config.record:
            assert self.transcript is not None
            backend = RecordingChatBackend(backend, self.transcript)
        return backend

    def chat(self, system_prompt: str, user_prompt: str) -> str:
        if not system_prompt.strip() or not user_prompt.strip():
            raise InvalidConfig("chat requires non-empty system and user prompts")

        with self._count_lock:
            self._calls += 1

        backoff_sec = RETRY_INITIAL_BACKOFF_SEC
        with self._slots:
            for attempt in range(1, RETRY_ATTEMPTS + 1):
                try:
                    return self._backend.complete(system_prompt, user_prompt)
                except TransportError as exc:
                    if attempt == RETRY_ATTEMPTS:
                        raise TransportError(f"{exc} (gave up after {RETRY_ATTEMPTS} attempts)") from exc
                    logger.warning("Chat attempt %d/%d failed: %s", attempt, RETRY_ATTEMPTS, exc)
                    self._sleep(backoff_sec)
                    backoff_sec *= 2.0
        raise AssertionError("unreachable")


# ----------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------
_ESCAPES = {"n": "\n", "t": "\t", "r": "\r"}


def parse_subquery_list(reply: str) -> list[str]:
    """Extract the quoted strings of the first ``[...]`` list in ``reply``; ``[]`` on any failure."""
    start = reply.find("[")
    if start < 0:
        return []

    items: list[str] = []
    i = start + 1
    expecting_item = True
    length = len(reply)
    while i < length:
        ch = reply[i]
        if ch.isspace():
            i += 1
        elif ch == "]":
            return [item.strip() for item in items if item.strip()]
        elif ch == ",":
            if expecting_item:
                return []
            expecting_item = True
            i += 1
        elif ch in ("'", '"') and expecting_item:
            quote = ch
            chars: list[str] = []
            i += 1
            closed = False
            while i < length:
                ch = reply[i]
                if ch == "\\" and i + 1 < length:
                    nxt = reply[i + 1]
                    chars.append(_ESCAPES.get(nxt, nxt))
                    i += 2
                    continue
                if ch == quote:
                    closed = True
                    i += 1
                    break
                chars.append(ch)
                i += 1
            if not closed:
                return []
            items.append("".join(chars))
            expecting_item = False
        else:
            return []
    return []


def build_compression_message(sub_query: str, documents: Sequence[str]) -> str:
    return f"Question: {sub_query}\n\nDocuments:\n" + DOCUMENT_SEPARATOR.join(documents)


def parse_compression_message(message: str) -> tuple[str, list[str]]:
    head, _, body = message.partition("\n\nDocuments:\n")
    question = head[len("Question: ") :] if head.startswith("Question: ") else head
    return question, body.split(DOCUMENT_SEPARATOR) if body else []


# ----------------------------------------------------------------------
# Procedures
# ----------------------------------------------------------------------
def decompose_query(client: ChatClient, query: str) -> list[SubQuery]:
    """Query Decomposition; a reply without a usable list falls back to ``[query]``."""
    if not query.strip():
        raise InvalidConfig("decompose_query requires a non-empty query")
    reply = client.chat(DECOMPOSITION_PROMPT, query)
    texts = parse_subquery_list(reply)
    if not texts:
        logger.warning("Decomposition reply had no parseable list; using the original query")
        texts = [query]
    return [SubQuery(text=text, ordinal=ordinal) for ordinal, text in enumerate(texts, start=1)]


def _fallback_text(passage: Passage) -> str:
    return " ".join(passage.text.split()[:FALLBACK_WORDS])


def compress_documents(
    client: ChatClient,
    sub_query: SubQuery,
    docs: Sequence[Passage],
    mode: str = "concatenated",
) -> CompressedDoc:
    """Query-aware Document Compression over the candidate passages of one sub-query."""
    if not docs:
        raise InvalidConfig("compress_documents requires at least one document")
    if mode not in COMPRESSION_MODES:
        known = ", ".join(COMPRESSION_MODES)
        raise InvalidConfig(f"Unknown compression mode '{mode}'. Known modes: [{known}]")

    if mode == "concatenated":
        message = build_compression_message(sub_query.text, [doc.text for doc in docs])
        text = client.chat(COMPRESSION_PROMPT, message).strip()
    else:
        outputs = [
            client.chat(COMPRESSION_PROMPT, build_compression_message(sub_query.text, [doc.text])).strip()
            for doc in docs
        ]
        text = " ".join(output for output in outputs if output)

    source_ids = tuple(doc.passage_id for doc in docs)
    if not text:
        logger.warning(
            "Empty compression for sub-query %d %r; falling back to the first %d words of %s",
            sub_query.ordinal,
            sub_query.text,
            FALLBACK_WORDS,
            docs[0].passage_id,
        )
        return CompressedDoc(
            text=_fallback_text(docs[0]),
            sub_query_ordinal=sub_query.ordinal,
            source_passage_ids=source_ids,
            fallback=True,
        )
    return CompressedDoc(text=text, sub_query_ordinal=sub_query.ordinal, source_passage_ids=source_ids)


def generate_passage(client: ChatClient, template: str, query: str) -> str:
    """One generation call for the HyDE / Query2Doc baselines."""
    return client.chat(GENERATION_SYSTEM_PROMPT, template.format(query=query)).strip()
