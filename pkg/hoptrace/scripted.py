"""
Deterministic stand-ins for remote language models.

Every responder here is a pure function of the request's template id, its variables and the
sample index, so mock runs are reproducible bit for bit.
"""

from dataclasses import dataclass
import json
from pathlib import Path
import threading
from typing import Any, Callable, Iterable, Mapping, Sequence

from .backends import GenerationRequest
from .errors import BackendError, DatasetFormatError, TransientBackendError
from .model import (
    FINAL_ANSWER_MARKER, NOT_FOUND, Step, SubQA, contains_gold, normalize_answer, step_from_json
)
from .utils.hashing import canonical_json

type Responder = Callable[[GenerationRequest, int], str]


class ScriptedModel:
    """Answers each request with `responder(request, sample_index)` and keeps a request log."""

    def __init__(self, responder: Responder | None = None):
        self._responder: Responder | None = responder
        self._lock = threading.Lock()
        self.requests: list[GenerationRequest] = []

    @property
    def calls(self) -> int:
        with self._lock:
            return len(self.requests)

    def respond(self, request: GenerationRequest, index: int) -> str:
        if self._responder is None:
            raise NotImplementedError(f"{type(self).__name__} has no responder")
        return self._responder(request, index)

    def complete(self, request: GenerationRequest) -> list[str]:
        with self._lock:
            self.requests.append(request)
        return [self.respond(request, i) for i in range(request.n_samples)]


def constant(*completions: str) -> ScriptedModel:
    """Sample i gets completions[i], cycling when more samples are requested than given."""
    if not completions:
        raise ValueError("at least one completion is required")
    return ScriptedModel(lambda _, i: completions[i % len(completions)])


class FlakyModel:
    """Raises a transient error on the first `failures` calls, then defers to `model`."""

    def __init__(self, model: Any, failures: int, error: type[Exception] = TransientBackendError):
        self.model = model
        self.failures: int = failures
        self.error: type[Exception] = error
        self.attempts: int = 0
        self._lock = threading.Lock()

    def complete(self, request: GenerationRequest) -> list[str]:
        with self._lock:
            self.attempts += 1
            failing = self.attempts <= self.failures
        if failing:
            raise self.error(f"scripted failure {self.attempts} of {self.failures}")
        return self.model.complete(request)


def request_steps(request: GenerationRequest) -> list[Step]:
    return [step_from_json(s) for s in json.loads(request.variables.get("steps", "[]"))]


@dataclass(frozen=True, slots=True)
class Hop:
    sub_question: str
    answer: str
    reformulation: str | None = None
    ambiguous: str | None = None

    def asks(self, sub_question: str) -> bool:
        """True for the phrasings that retrieve this hop's evidence."""
        phrasings = [self.sub_question] + ([self.reformulation] if self.reformulation else [])
        return normalize_answer(sub_question) in {normalize_answer(p) for p in phrasings}

    def owns(self, sub_question: str) -> bool:
        return self.asks(sub_question) or (
            self.ambiguous is not None and normalize_answer(sub_question) == normalize_answer(self.ambiguous)
        )


@dataclass(frozen=True, slots=True)
class QuestionScript:
    text: str
    final_answer: str
    hops: tuple[Hop, ...]
    guess: str | None = None

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "QuestionScript":
        return cls(
            text=obj["text"],
            final_answer=obj.get("final_answer") or obj["gold_answers"][0],
            hops=tuple(Hop(**hop) for hop in obj["hops"]),
            guess=obj.get("guess"),
        )

    def progress(self, steps: Sequence[Step]) -> int:
        """Number of leading hops whose answer has been found in the chain."""
        found = [s.sub_answer for s in steps if isinstance(s, SubQA) and s.answer_found]
        done = 0
        for hop in self.hops:
            if not any(contains_gold(answer, [hop.answer]) for answer in found):
                break
            done += 1
        return done


class ToyScriptModel(ScriptedModel):
    """
    A generator that follows per-question hop scripts.

    Thoughts name the next missing hop and finish with the final-answer marker once every hop is
    answered; the second thought sample on an empty chain may guess from memory. Sub-question
    samples are the scripted query (or its ambiguous first attempt, or the reformulation after a
    failed retrieval), the reformulation, and an off-topic query. Sub-answers are extracted only
    when a hop's phrasing was asked and the passages contain its answer.
    """

    def __init__(self, scripts: Iterable[QuestionScript]):
        super().__init__()
        self.scripts: dict[str, QuestionScript] = {normalize_answer(s.text): s for s in scripts}

    @classmethod
    def from_file(cls, path: Path) -> "ToyScriptModel":
        scripts = []
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    scripts.append(QuestionScript.from_json(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise DatasetFormatError(f"invalid question script: {e!r}", line=line_number,
                                             path=str(path)) from e
        return cls(scripts)

    def script_for(self, request: GenerationRequest) -> QuestionScript:
        key = normalize_answer(request.variables.get("question", ""))
        if key not in self.scripts:
            raise BackendError(f"no script for question {request.variables.get('question')!r}")
        return self.scripts[key]

    def respond(self, request: GenerationRequest, index: int) -> str:
        script = self.script_for(request)
        steps = request_steps(request)
        match request.prompt_template_id:
            case "thought":
                return self._thought(script, steps, index)
            case "subquestion":
                return self._subquestion(script, steps, index)
            case "answer_extraction":
                return self._answer(script, request)
        raise BackendError(f"unexpected template {request.prompt_template_id!r}")

    @staticmethod
    def _thought(script: QuestionScript, steps: Sequence[Step], index: int) -> str:
        done = script.progress(steps)
        if done == len(script.hops):
            if index % 2 == 0:
                return f"Every fact needed has been found. {FINAL_ANSWER_MARKER} {script.final_answer}"
            return f"Combining the sub-answers gives the result. {FINAL_ANSWER_MARKER} {script.final_answer}"
        if not steps and index % 2 == 1 and script.guess is not None:
            return f"I believe I already know this. {FINAL_ANSWER_MARKER} {script.guess}"
        hop = script.hops[done]
        last = steps[-1] if steps else None
        if isinstance(last, SubQA) and not last.answer_found:
            return f"The passages did not answer that, so I should ask again: {hop.sub_question}"
        if index % 2 == 0:
            return f"Next I need to find out: {hop.sub_question}"
        return f"The missing piece is the answer to: {hop.sub_question}"

    @staticmethod
    def _subquestion(script: QuestionScript, steps: Sequence[Step], index: int) -> str:
        done = script.progress(steps)
        hop = script.hops[min(done, len(script.hops) - 1)]
        previous = [s for s in steps if isinstance(s, SubQA)]
        failed = bool(previous) and not previous[-1].answer_found and hop.owns(previous[-1].sub_question)
        match index % 3:
            case 0:
                if failed:
                    return hop.reformulation or hop.sub_question
                return hop.ambiguous or hop.sub_question
            case 1:
                return hop.reformulation or hop.sub_question
            case _:
                return f"What other information is there about {script.text.rstrip('?')}?"

    @staticmethod
    def _answer(script: QuestionScript, request: GenerationRequest) -> str:
        sub_question = request.variables.get("sub_question", "")
        documents = request.variables.get("documents", "")
        for hop in script.hops:
            if hop.asks(sub_question) and contains_gold(documents, [hop.answer]):
                return hop.answer
        return NOT_FOUND


def verdict_json(incorrect: Sequence[int] = (), redundant: Sequence[int] = (), irrelevant: Sequence[int] = (),
                 unfaithful: Sequence[int] = ()) -> str:
    """A well-formed judge verdict flagging the given 1-based step numbers."""
    justifications = []
    for criterion, flagged in (("incorrectness", incorrect), ("redundancy", redundant),
                               ("irrelevance", irrelevant), ("faithfulness", unfaithful)):
        justifications.extend(
            {"step_index": step, "criterion": criterion, "text": f"step {step} violates {criterion}"}
            for step in flagged
        )
    return canonical_json({
        "incorrectness": len(incorrect),
        "redundancy": len(redundant),
        "irrelevance": len(irrelevant),
        "faithfulness": len(unfaithful),
        "justifications": justifications,
    })


class ScriptedJudge(ScriptedModel):
    """
    Rule-based verdicts: a found sub-answer absent from its own passages is unfaithful, and a
    found sub-answer repeating an earlier one is redundant. `verdicts` and `repairs` override the
    reply for specific trace ids, for the first call and the repair call respectively.
    """

    def __init__(self, verdicts: Mapping[str, str] | None = None, repairs: Mapping[str, str] | None = None):
        super().__init__()
        self.verdicts: dict[str, str] = dict(verdicts or {})
        self.repairs: dict[str, str] = dict(repairs or {})

    def respond(self, request: GenerationRequest, index: int) -> str:
        trace_id = request.variables.get("trace_id", "")
        overrides = self.repairs if request.prompt_template_id == "judge_repair" else self.verdicts
        if trace_id in overrides:
            return overrides[trace_id]
        return self.rule_verdict(request_steps(request))

    @staticmethod
    def rule_verdict(steps: Sequence[Step]) -> str:
        redundant: list[int] = []
        unfaithful: list[int] = []
        seen: set[str] = set()
        for position, step in enumerate(steps, start=1):
            if not isinstance(step, SubQA) or not step.answer_found:
                continue
            context = " ".join(f"{d.title} {d.text}" for d in step.documents)
            if not contains_gold(context, [step.sub_answer]):
                unfaithful.append(position)
            answer = normalize_answer(step.sub_answer)
            if answer in seen:
                redundant.append(position)
            seen.add(answer)
        return verdict_json(redundant=redundant, unfaithful=unfaithful)
