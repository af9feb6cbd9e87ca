"""
The generator actions every reasoning chain is built from: thoughts, sub-questions and
sub-answer extraction, plus the raw judge call. Each action renders its prompt template over the
chain so far and parses the completions into steps.
"""

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
import re
from typing import Sequence

from . import example, operation
from .backends import Backend, GenerationRequest
from .errors import BackendError, EmptyGenerationError
from .model import NOT_FOUND, Document, Question, Step, Thought, is_not_found
from .prompts import PromptTemplate, TemplateSet, default_templates, render_chain, render_documents
from .retrieval import Retriever
from .scripted import constant
from .utils.hashing import canonical_json

logger = logging.getLogger(__name__)

THOUGHT_STOPS = ("\nSub-question",)
SUBQUESTION_STOPS = ("\nRetrieved passages", "\nThought:")
ANSWER_STOPS = ("\nThought:", "\nSub-question")

_LABEL = re.compile(r"^\s*(?:thought|sub-?question(?:\s*\d+)?|sub-?answer(?:\s*\d+)?|answer)\s*:\s*", re.IGNORECASE)
_LIST_ITEM = re.compile(r"^\s*(?:\d+\s*[.)]|[-*•])\s+")
_CHAIN_LABELS = re.compile(r"^\s*(?:sub-?question|retrieved passages|sub-?answer|thought)\b", re.IGNORECASE)
_QUOTES = "\"'“”‘’`"

_DEMO_QUESTION = Question(id="demo", text="When was the Eiffel Tower completed?", gold_answers=("1889",))
_DEMO_DOCUMENTS = (
    Document(doc_id="eiffel", title="Eiffel Tower",
             text="The Eiffel Tower was completed in 1889 for the World's Fair.", score=2.0, rank=1),
)


@dataclass(frozen=True)
class Policy:
    """What a search or an agent needs to take actions: a generator, a retriever and the prompts."""

    generator: Backend
    retriever: Retriever
    templates: TemplateSet = field(default_factory=default_templates)
    max_output_tokens: int = 256


def _request(template: PromptTemplate, question: Question, steps: Sequence[Step], temperature: float,
             n: int, max_output_tokens: int, stops: Sequence[str], **extra: str) -> GenerationRequest:
    chain = render_chain(question, steps)
    variables = {
        "question": question.text,
        "chain": chain,
        "steps": canonical_json([s.to_json() for s in steps]),
        **extra,
    }
    return GenerationRequest(
        prompt_template_id=template.id,
        chain_context=chain,
        temperature=temperature,
        n_samples=n,
        max_output_tokens=max_output_tokens,
        stop_sequences=tuple(stops),
        prompt=template.render(**variables),
        variables=variables,
    )


def _strip_label(text: str) -> str:
    return _LABEL.sub("", text, count=1).strip()


def _clip_at_next_step(text: str) -> str:
    """Drop anything a model wrote past its own step (a following sub-question, passages, ...)."""
    lines = text.strip().splitlines()
    kept = lines[:1]
    for line in lines[1:]:
        if _CHAIN_LABELS.match(line):
            break
        kept.append(line)
    return " ".join(line.strip() for line in kept if line.strip())


def parse_thought(completion: str) -> Thought | None:
    text = _clip_at_next_step(_strip_label(completion))
    return Thought.parse(text) if text else None


def parse_subquestions(completion: str) -> list[str]:
    """One completion may hold a single question or a numbered/bulleted list of them."""
    lines = [line for line in completion.strip().splitlines() if line.strip()]
    if not lines:
        return []
    if len(lines) > 1 and any(_LIST_ITEM.match(line) for line in lines):
        candidates = [_LIST_ITEM.sub("", line, count=1) for line in lines if _LIST_ITEM.match(line)]
    else:
        candidates = [lines[0]]
    questions = []
    for candidate in candidates:
        question = _strip_label(_LIST_ITEM.sub("", candidate.strip(), count=1)).strip().strip(_QUOTES).strip()
        if question:
            questions.append(question)
    return questions


def parse_subanswer(completion: str) -> str:
    lines = [line for line in completion.strip().splitlines() if line.strip()]
    if not lines:
        return NOT_FOUND
    answer = _strip_label(lines[0]).strip().strip(_QUOTES).strip()
    return answer or NOT_FOUND



@example([Thought("I need to find X next.")],
         question=_DEMO_QUESTION, steps=(), n=1, temperature=0.6,
         backend=Backend(constant("I need to find X next.")))
@example([Thought("The final answer is: 1889", is_terminal=True, final_answer="1889")],
         question=_DEMO_QUESTION, steps=(), n=1, temperature=0.6,
         backend=Backend(constant("The final answer is: 1889")))
@example([Thought("First I need the construction dates."), Thought("I should look up the tower.")],
         question=_DEMO_QUESTION, steps=(), n=2, temperature=0.6,
         backend=Backend(constant("First I need the construction dates.", "I should look up the tower.")))
@operation(module="policy-backends")
def generate_thoughts(
        question: Question,
        steps: Sequence[Step],
        n: int,
        temperature: float,
        backend: Backend,
        templates: TemplateSet | None = None,
        max_output_tokens: int = 256,
) -> list[Thought]:
    """
    Sample `n` next thoughts for the chain. A thought carrying the final-answer marker is terminal;
    anything else is kept verbatim as a non-terminal thought.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    templates = templates or default_templates()
    request = _request(templates["thought"], question, steps, temperature, n, max_output_tokens, THOUGHT_STOPS)
    thoughts = [t for t in (parse_thought(c) for c in backend.complete(request, context=question.id)) if t]
    if not thoughts:
        raise EmptyGenerationError("empty generation", context=f"{question.id} thought")
    return thoughts


@example(["Who designed the Eiffel Tower?", "When did construction start?", "Where is the tower?"],
         question=_DEMO_QUESTION, steps=(Thought("I need facts about the tower."),), n=3, temperature=1.0,
         backend=Backend(constant("Who designed the Eiffel Tower?", "When did construction start?",
                                  "\"Where is the tower?\"")))
@example(["Who designed the Eiffel Tower?", "When was it completed?"],
         question=_DEMO_QUESTION, steps=(Thought("I need facts about the tower."),), n=2, temperature=1.0,
         backend=Backend(constant("1. Who designed the Eiffel Tower?\n2. When was it completed?", "")))
@example(raises=EmptyGenerationError,
         question=_DEMO_QUESTION, steps=(Thought("I need facts about the tower."),), n=3, temperature=1.0,
         backend=Backend(constant("")))
@operation(module="policy-backends")
def generate_subquestions(
        question: Question,
        steps: Sequence[Step],
        n: int,
        temperature: float,
        backend: Backend,
        templates: TemplateSet | None = None,
        max_output_tokens: int = 256,
) -> list[str]:
    """
    Sample sub-questions for the chain, which must end in a thought. A completion holding a
    numbered list contributes every item; at most `n` questions are returned, in sample order.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if not steps or not isinstance(steps[-1], Thought):
        raise ValueError("a sub-question must follow a thought")
    templates = templates or default_templates()
    request = _request(templates["subquestion"], question, steps, temperature, n, max_output_tokens,
                       SUBQUESTION_STOPS)
    questions = [q for c in backend.complete(request, context=question.id) for q in parse_subquestions(c)]
    if not questions:
        raise EmptyGenerationError("empty generation", context=f"{question.id} sub-question")
    return questions[:n]


@example(("1889", True),
         question=_DEMO_QUESTION, steps=(Thought("I need the completion year."),),
         sub_question="When was the Eiffel Tower completed?", documents=_DEMO_DOCUMENTS, temperature=0.2,
         backend=Backend(constant("1889")))
@example(("not found", False),
         question=_DEMO_QUESTION, steps=(Thought("I need the completion year."),),
         sub_question="When was the Eiffel Tower completed?", documents=(), temperature=0.2,
         backend=Backend(constant("not found")))
@example(("1889", True),
         question=_DEMO_QUESTION, steps=(Thought("I need the completion year."),),
         sub_question="When was the Eiffel Tower completed?", documents=_DEMO_DOCUMENTS, temperature=0.2,
         backend=Backend(constant("Sub-answer 1: \"1889\"\nThought: now I know")))
@operation(module="policy-backends")
def extract_subanswer(
        question: Question,
        steps: Sequence[Step],
        sub_question: str,
        documents: Sequence[Document],
        temperature: float,
        backend: Backend,
        templates: TemplateSet | None = None,
        max_output_tokens: int = 256,
) -> tuple[str, bool]:
    """The sub-answer read from the passages and whether one was found at all."""
    templates = templates or default_templates()
    request = _request(templates["answer_extraction"], question, steps, temperature, 1, max_output_tokens,
                       ANSWER_STOPS, sub_question=sub_question, documents=render_documents(documents))
    completions = backend.complete(request, context=question.id)
    answer = parse_subanswer(completions[0] if completions else "")
    found = not is_not_found(answer)
    return (answer if found else NOT_FOUND), found


def _append_exchange(path: Path, exchange: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    transcript = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {"exchanges": []}
    transcript["exchanges"].append(exchange)
    path.write_text(canonical_json(transcript, indent=2) + "\n", encoding="utf-8")


@example('{"incorrectness": 0, "redundancy": 0, "irrelevance": 0, "faithfulness": 0, "justifications": []}',
         trace_rendering="Step 1 (thought): The final answer is: 1889",
         backend=Backend(constant('{"incorrectness": 0, "redundancy": 0, "irrelevance": 0, '
                                  '"faithfulness": 0, "justifications": []}')))
@example("Looks fine to me.", trace_rendering="Step 1 (thought): The final answer is: 1889",
         backend=Backend(constant("Looks fine to me.")))
@operation(module="policy-backends")
def judge_call(
        trace_rendering: str,
        backend: Backend,
        trace_id: str = "",
        question: str = "",
        steps: Sequence[Step] = (),
        template: PromptTemplate | None = None,
        previous_reply: str | None = None,
        transcript_path: Path | None = None,
        max_output_tokens: int = 1024,
) -> str:
    """
    One greedy judge completion over a rendered trace, returned verbatim. `previous_reply` is
    passed to repair templates. When `transcript_path` is given the exchange is appended to it.
    """
    template = template or default_templates()["judge"]
    variables = {
        "trace": trace_rendering,
        "question": question,
        "trace_id": trace_id,
        "steps": canonical_json([s.to_json() for s in steps]),
        "raw": previous_reply or "",
    }
    request = GenerationRequest(
        prompt_template_id=template.id,
        chain_context=trace_rendering,
        temperature=0.0,
        n_samples=1,
        max_output_tokens=max_output_tokens,
        prompt=template.render(**variables),
        variables=variables,
    )
    try:
        completions = backend.complete(request, context=f"trace {trace_id}" if trace_id else None)
    except BackendError as e:
        raise BackendError(f"judge call failed: {e}", context=f"trace {trace_id}", attempts=e.attempts) from e
    raw = completions[0] if completions else ""
    logger.debug("judge %s replied after %d attempt(s)", trace_id or "<anonymous>", backend.last_attempts)
    if transcript_path is not None:
        _append_exchange(transcript_path, {
            "template_id": template.id,
            "template_hash": template.content_hash,
            "prompt": request.prompt,
            "response": raw,
            "attempts": backend.last_attempts,
        })
    return raw
