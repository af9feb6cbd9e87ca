import json
from pathlib import Path
from typing import Sequence

import pytest

from hoptrace.config import RunConfig
from hoptrace.model import Document, Question, SubQA, Thought, Trace

INPUTS = Path(__file__).resolve().parent.parent / "inputs"


class FakeResponse:
    """Stands in for `requests.Response`; a `str` body is served raw and fails to decode."""

    def __init__(self, status_code: int, body: dict | str | None = None):
        self.status_code = status_code
        self._body = body if body is not None else {}
        self.text = body if isinstance(body, str) else json.dumps(self._body)

    def json(self):
        if isinstance(self._body, str):
            raise json.JSONDecodeError("Expecting value", self._body, 0)
        return self._body


def thought(text: str) -> Thought:
    return Thought.parse(text)


def subqa(sub_question: str, answer: str, *passages: str) -> SubQA:
    documents = tuple(
        Document(doc_id=f"d{i}", title=f"Doc {i}", text=text, score=float(len(passages) - i), rank=i + 1)
        for i, text in enumerate(passages)
    )
    return SubQA(sub_question=sub_question, documents=documents, sub_answer=answer,
                 answer_found=answer.strip().lower() != "not found")


def make_trace(question_id: str, sub_answers: Sequence[str], final: str, trace_id: str | None = None) -> Trace:
    """A complete trace with one hop per sub-answer, each supported by its own passage."""
    steps: list[Thought | SubQA] = []
    for i, answer in enumerate(sub_answers):
        steps.append(thought(f"I still need fact number {i + 1}."))
        steps.append(subqa(f"What is fact number {i + 1}?", answer, f"The fact is {answer}."))
    steps.append(thought(f"That settles it. The final answer is: {final}"))
    return Trace(question_id=question_id, steps=tuple(steps), predicted_answer=final,
                 trace_id=trace_id or f"{question_id}:{len(sub_answers)}")


@pytest.fixture
def toy_question() -> Question:
    return Question(id="q", text="Who directed the film in which Ellen Ripley first appeared?",
                    gold_answers=("Ridley Scott",), gold_sub_answers=("Alien",))


@pytest.fixture
def toy_config(tmp_path: Path) -> RunConfig:
    return RunConfig.from_yaml(INPUTS / "toy_config.yaml").with_overrides(output_dir=tmp_path / "run", mock=True)
