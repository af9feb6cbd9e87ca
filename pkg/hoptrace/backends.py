"""
Language-model backends: the request type every action sends, the OpenAI-compatible
chat-completions transport, and the `Backend` wrapper that bounds every remote call with
the shared request limiter and a retry policy.
"""

from dataclasses import dataclass, field
import logging
import os
import threading
from typing import Any, Callable, Mapping, Protocol, TypeVar

from tenacity import (
    RetryCallState, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential, wait_none
)

from .errors import BackendError, HoptraceError, TransientBackendError

logger = logging.getLogger(__name__)

R = TypeVar("R")

TRANSIENT_ERRORS: tuple[type[BaseException], ...] = (TransientBackendError, TimeoutError, ConnectionError)


@dataclass(frozen=True, slots=True)
class BackendConfig:
    endpoint_url: str = ""
    model_name: str = ""
    api_key_env_var: str = ""
    timeout_ms: int = 60_000
    max_retries: int = 3
    max_concurrent_requests: int = 8
    retry_backoff_ms: int = 500

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError(f"timeout_ms must be positive, got {self.timeout_ms}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be non-negative, got {self.max_retries}")
        if self.max_concurrent_requests < 1:
            raise ValueError(f"max_concurrent_requests must be at least 1, got {self.max_concurrent_requests}")
        if self.retry_backoff_ms < 0:
            raise ValueError(f"retry_backoff_ms must be non-negative, got {self.retry_backoff_ms}")

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env_var) if self.api_key_env_var else None

    def to_json(self) -> dict[str, Any]:
        # only the variable name is ever serialized, never the key itself
        return {
            "endpoint_url": self.endpoint_url,
            "model_name": self.model_name,
            "api_key_env_var": self.api_key_env_var,
            "timeout_ms": self.timeout_ms,
            "max_retries": self.max_retries,
            "max_concurrent_requests": self.max_concurrent_requests,
            "retry_backoff_ms": self.retry_backoff_ms,
        }

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any] | None) -> "BackendConfig":
        obj = dict(obj or {})
        known = {k: obj[k] for k in cls.__dataclass_fields__ if k in obj}
        unknown = set(obj) - set(known)
        if unknown:
            raise ValueError(f"unknown backend settings: {', '.join(sorted(unknown))}")
        return cls(**known)


@dataclass(frozen=True, slots=True)
class GenerationRequest:
    prompt_template_id: str
    chain_context: str
    temperature: float
    n_samples: int = 1
    max_output_tokens: int = 256
    stop_sequences: tuple[str, ...] = ()
    prompt: str = ""
    variables: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be at least 1, got {self.n_samples}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be non-negative, got {self.temperature}")
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))


class LanguageModel(Protocol):
    def complete(self, request: GenerationRequest) -> list[str]:
        """Return `request.n_samples` completions for the request."""
        ...


class RequestLimiter:
    """Bounds the number of in-flight remote calls across every backend that shares it."""

    def __init__(self, max_in_flight: int):
        if max_in_flight < 1:
            raise ValueError(f"max_in_flight must be at least 1, got {max_in_flight}")
        self.max_in_flight: int = max_in_flight
        self._semaphore = threading.BoundedSemaphore(max_in_flight)

    def __enter__(self) -> "RequestLimiter":
        self._semaphore.acquire()
        return self

    def __exit__(self, *exc_info) -> None:
        self._semaphore.release()


def _log_retry(context: str) -> Callable[[RetryCallState], None]:
    def before_sleep(state: RetryCallState) -> None:
        error = state.outcome.exception() if state.outcome is not None else None
        logger.warning("%s: attempt %d failed (%s); retrying", context, state.attempt_number, error)

    return before_sleep


def call_with_retries(
        fn: Callable[[], R],
        *,
        max_retries: int,
        backoff_ms: int,
        context: str,
        limiter: RequestLimiter | None = None,
) -> tuple[R, int]:
    """
    Call `fn` at most `max_retries + 1` times, retrying only transient failures.

    Returns the result and the number of attempts it took; raises `BackendError` once the
    attempts are exhausted.
    """
    backoff_s = backoff_ms / 1000
    retrying = Retrying(
        stop=stop_after_attempt(max_retries + 1),
        wait=wait_exponential(multiplier=backoff_s, max=max(backoff_s * 16, backoff_s)) if backoff_s > 0 else wait_none(),
        retry=retry_if_exception_type(TRANSIENT_ERRORS),
        before_sleep=_log_retry(context),
        reraise=True,
    )
    attempts = 0
    try:
        for attempt in retrying:
            with attempt:
                attempts = attempt.retry_state.attempt_number
                if limiter is None:
                    result = fn()
                else:
                    with limiter:
                        result = fn()
    except TRANSIENT_ERRORS as e:
        raise BackendError(f"giving up after {attempts} attempt(s): {e}", context=context, attempts=attempts) from e
    if attempts > 1:
        logger.info("%s: succeeded after %d attempts", context, attempts)
    return result, attempts


class Backend:
    """A language model behind the shared limiter and retry policy."""

    def __init__(self, model: LanguageModel, config: BackendConfig | None = None,
                 limiter: RequestLimiter | None = None, name: str = "generator"):
        self.model: LanguageModel = model
        self.config: BackendConfig = config or BackendConfig()
        self.limiter: RequestLimiter = limiter or RequestLimiter(self.config.max_concurrent_requests)
        self.name: str = name
        self._local = threading.local()

    @property
    def last_attempts(self) -> int:
        """Attempts taken by the most recent call made from the current thread."""
        return getattr(self._local, "attempts", 0)

    def complete(self, request: GenerationRequest, context: str | None = None) -> list[str]:
        label = f"{self.name}/{request.prompt_template_id}" + (f" [{context}]" if context else "")
        try:
            completions, attempts = call_with_retries(
                lambda: self.model.complete(request),
                max_retries=self.config.max_retries,
                backoff_ms=self.config.retry_backoff_ms,
                context=label,
                limiter=self.limiter,
            )
        except HoptraceError:
            raise
        except Exception as e:
            raise BackendError(f"{type(e).__name__}: {e}", context=label, attempts=1) from e
        self._local.attempts = attempts
        return completions


class OpenAIChatModel:
    """
    Any OpenAI-compatible chat-completions endpoint (hosted APIs, vLLM, llama.cpp, ...).

    Multiple samples are requested with the `n` parameter; servers that return fewer choices
    than asked for are topped up with further calls.
    """

    def __init__(self, config: BackendConfig):
        if not config.endpoint_url or not config.model_name:
            raise ValueError("an OpenAI-compatible backend needs endpoint_url and model_name")
        self.config: BackendConfig = config
        self._client = None
        self._lock = threading.Lock()

    @property
    def client(self):
        with self._lock:
            if self._client is None:
                from openai import OpenAI

                self._client = OpenAI(
                    base_url=self.config.endpoint_url,
                    api_key=self.config.api_key() or "EMPTY",
                    timeout=self.config.timeout_ms / 1000,
                    max_retries=0,
                )
            return self._client

    def _create(self, request: GenerationRequest, n: int) -> list[str]:
        import openai

        try:
            response = self.client.chat.completions.create(
                model=self.config.model_name,
                messages=[{"role": "user", "content": request.prompt}],
                temperature=request.temperature,
                n=n,
                max_tokens=request.max_output_tokens,
                stop=list(request.stop_sequences) or None,
            )
        except (openai.APITimeoutError, openai.APIConnectionError, openai.RateLimitError,
                openai.InternalServerError) as e:
            raise TransientBackendError(f"{type(e).__name__}: {e}") from e
        except openai.OpenAIError as e:
            raise BackendError(f"{type(e).__name__}: {e}") from e
        return [(choice.message.content or "") for choice in response.choices]

    def complete(self, request: GenerationRequest) -> list[str]:
        completions = self._create(request, request.n_samples)
        while len(completions) < request.n_samples:
            more = self._create(request, 1)
            if not more:
                raise BackendError("endpoint returned no choices")
            completions.extend(more)
        return completions[:request.n_samples]
