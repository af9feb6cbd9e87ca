"""
Shared domain types for questions, retrieved documents and reasoning traces, plus the
answer normalization and gold-containment predicate that rewards, recall and metrics
are all built on.
"""

from dataclasses import dataclass, field
from enum import StrEnum
import re
import string
from typing import Any, Iterable, Mapping, Sequence

from . import example, operation
from .errors import TraceStructureError

FINAL_ANSWER_MARKER = "The final answer is:"
NOT_FOUND = "not found"

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCTUATION = frozenset(string.punctuation)


class Dataset(StrEnum):
    TWO_WIKI = "2wiki"
    MUSIQUE = "musique"
    HOTPOTQA = "hotpotqa"
    WEBQUESTIONS = "webquestions"
    CUSTOM = "custom"


class TraceSource(StrEnum):
    MCTS = "mcts"
    INFERENCE = "inference"


@example("louvre museum", text="The Louvre Museum.")
@example("", text="")
@example("london", text="london")
@example("eiffel tower", text="  The   Eiffel Tower!! ")
@operation(module="core-model")
def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and English articles, and collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCTUATION)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def answer_tokens(text: str) -> list[str]:
    return normalize_answer(text).split()


def _contains_tokens(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    if not needle:
        return not haystack
    width = len(needle)
    return any(
        haystack[i:i + width] == needle
        for i in range(len(haystack) - width + 1)
    )


@example(True, prediction="The final answer is: London, England", gold_answers=["London"])
@example(False, prediction="Paris", gold_answers=["London"])
@example(True, prediction="the louvre museum", gold_answers=["Louvre Museum"])
@example(False, prediction="Lond", gold_answers=["London"])
@example(False, prediction="Londoner", gold_answers=["London"])
@example(raises=ValueError, prediction="London", gold_answers=[])
@operation(module="core-model")
def contains_gold(prediction: str, gold_answers: Sequence[str]) -> bool:
    """
    True iff some normalized gold alias occurs as a contiguous run of tokens inside the
    normalized prediction.
    """
    if not gold_answers:
        raise ValueError("gold_answers must not be empty")
    tokens = answer_tokens(prediction)
    return any(_contains_tokens(tokens, answer_tokens(gold)) for gold in gold_answers)


def is_not_found(answer: str) -> bool:
    return normalize_answer(answer) == NOT_FOUND


def parse_final_answer(text: str) -> str | None:
    """The answer following the final-answer marker, or None when the marker is absent."""
    position = text.find(FINAL_ANSWER_MARKER)
    if position < 0:
        return None
    rest = text[position + len(FINAL_ANSWER_MARKER):].strip()
    return rest.splitlines()[0].strip() if rest else ""


@dataclass(frozen=True, slots=True)
class Question:
    id: str
    text: str
    gold_answers: tuple[str, ...]
    gold_sub_answers: tuple[str, ...] = ()
    dataset: Dataset = Dataset.CUSTOM
    question_type: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        object.__setattr__(self, "gold_sub_answers", tuple(self.gold_sub_answers))
        object.__setattr__(self, "dataset", Dataset(self.dataset))
        if not self.id:
            raise ValueError("question id must not be empty")
        if not self.gold_answers:
            raise ValueError(f"question {self.id!r} has no gold answers")

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "gold_answers": list(self.gold_answers),
            "gold_sub_answers": list(self.gold_sub_answers),
            "dataset": self.dataset.value,
            "question_type": self.question_type,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Question":
        return cls(
            id=str(obj["id"]),
            text=obj["text"],
            gold_answers=tuple(obj["gold_answers"]),
            gold_sub_answers=tuple(obj.get("gold_sub_answers") or ()),
            dataset=Dataset(obj.get("dataset", Dataset.CUSTOM.value)),
            question_type=obj.get("question_type"),
        )


@dataclass(frozen=True, slots=True)
class Document:
    doc_id: str
    title: str
    text: str
    score: float
    rank: int

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"document {self.doc_id!r} has rank {self.rank} < 1")

    def to_json(self) -> dict[str, Any]:
        return {"doc_id": self.doc_id, "title": self.title, "text": self.text,
                "score": self.score, "rank": self.rank}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Document":
        return cls(doc_id=str(obj["doc_id"]), title=obj.get("title", ""), text=obj["text"],
                   score=float(obj["score"]), rank=int(obj["rank"]))


@dataclass(frozen=True, slots=True)
class Thought:
    """A free-form reasoning step, terminal when it carries the final-answer marker."""

    text: str
    is_terminal: bool = False
    final_answer: str | None = None

    def __post_init__(self) -> None:
        has_marker = FINAL_ANSWER_MARKER in self.text
        if self.is_terminal != has_marker or (self.final_answer is not None) != has_marker:
            raise TraceStructureError(
                f"thought terminality disagrees with the final-answer marker: {self.text!r}"
            )

    @classmethod
    def parse(cls, text: str) -> "Thought":
        answer = parse_final_answer(text)
        return cls(text=text, is_terminal=answer is not None, final_answer=answer)

    def to_json(self) -> dict[str, Any]:
        return {"kind": "thought", "text": self.text, "is_terminal": self.is_terminal,
                "final_answer": self.final_answer}


@dataclass(frozen=True, slots=True)
class SubQA:
    """A retrieval step: sub-question, the passages retrieved for it, and the extracted sub-answer."""

    sub_question: str
    documents: tuple[Document, ...]
    sub_answer: str
    answer_found: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "documents", tuple(self.documents))
        if self.answer_found == is_not_found(self.sub_answer):
            raise TraceStructureError(
                f"answer_found={self.answer_found} disagrees with sub-answer {self.sub_answer!r}"
            )

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": "subqa",
            "sub_question": self.sub_question,
            "documents": [d.to_json() for d in self.documents],
            "sub_answer": self.sub_answer,
            "answer_found": self.answer_found,
        }


type Step = Thought | SubQA


def step_from_json(obj: Mapping[str, Any]) -> Step:
    kind = obj.get("kind")
    if kind == "thought":
        return Thought(text=obj["text"], is_terminal=bool(obj["is_terminal"]),
                       final_answer=obj.get("final_answer"))
    elif kind == "subqa":
        return SubQA(
            sub_question=obj["sub_question"],
            documents=tuple(Document.from_json(d) for d in obj.get("documents", ())),
            sub_answer=obj["sub_answer"],
            answer_found=bool(obj["answer_found"]),
        )
    raise TraceStructureError(f"unknown step kind {kind!r}")


def validate_alternation(steps: Iterable[Step]) -> None:
    """Thought, SubQA, Thought, ... starting with a Thought; a terminal Thought ends the chain."""
    steps = list(steps)
    for i, step in enumerate(steps):
        expected = Thought if i % 2 == 0 else SubQA
        if not isinstance(step, expected):
            raise TraceStructureError(
                f"expected a {expected.__name__} but found a {type(step).__name__}", step_index=i
            )
        if isinstance(step, Thought) and step.is_terminal and i != len(steps) - 1:
            raise TraceStructureError("terminal thought is followed by further steps", step_index=i)


@dataclass(frozen=True, slots=True)
class Trace:
    question_id: str
    steps: tuple[Step, ...]
    predicted_answer: str | None = None
    source: TraceSource = TraceSource.MCTS
    trace_id: str = field(default="")

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "source", TraceSource(self.source))
        if not self.trace_id:
            object.__setattr__(self, "trace_id", f"{self.question_id}:{self.source.value}")
        validate_alternation(self.steps)
        if self.predicted_answer is not None:
            last = self.steps[-1] if self.steps else None
            if not isinstance(last, Thought) or not last.is_terminal:
                raise TraceStructureError(
                    "a trace with a predicted answer must end in a terminal thought",
                    step_index=len(self.steps) - 1,
                )

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def sub_steps(self) -> list[SubQA]:
        return [s for s in self.steps if isinstance(s, SubQA)]

    @property
    def is_complete(self) -> bool:
        return bool(self.steps) and isinstance(self.steps[-1], Thought) and self.steps[-1].is_terminal

    def to_json(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "question_id": self.question_id,
            "source": self.source.value,
            "length": self.length,
            "predicted_answer": self.predicted_answer,
            "steps": [s.to_json() for s in self.steps],
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Trace":
        steps = tuple(step_from_json(s) for s in obj["steps"])
        if "length" in obj and obj["length"] != len(steps):
            raise TraceStructureError(f"declared length {obj['length']} but found {len(steps)} steps")
        return cls(
            question_id=str(obj["question_id"]),
            steps=steps,
            predicted_answer=obj.get("predicted_answer"),
            source=TraceSource(obj.get("source", TraceSource.MCTS.value)),
            trace_id=obj.get("trace_id", ""),
        )
