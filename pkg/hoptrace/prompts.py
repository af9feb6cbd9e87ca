"""
Few-shot prompt templates and the text renderings of reasoning chains that every action sees.

Templates ship as editable YAML assets in `hoptrace/templates/`; their content hashes are
recorded in run manifests so a run can be tied to the exact prompts it used.
"""

from dataclasses import dataclass
from enum import StrEnum
from functools import cache
from importlib import resources
from pathlib import Path
from string import Template
from typing import Any, Iterable, Mapping, Sequence

import yaml

from .model import Document, Question, Step, SubQA, Thought, Trace
from .utils.hashing import canonical_json, sha256_text


class Action(StrEnum):
    THOUGHT = "thought"
    SUBQUESTION = "subquestion"
    ANSWER_EXTRACTION = "answer_extraction"
    JUDGE = "judge"


REQUIRED_PLACEHOLDERS: dict[Action, frozenset[str]] = {
    # the rendered chain opens with the question itself
    Action.THOUGHT: frozenset({"chain"}),
    Action.SUBQUESTION: frozenset({"chain"}),
    Action.ANSWER_EXTRACTION: frozenset({"question", "chain", "sub_question", "documents"}),
    Action.JUDGE: frozenset({"trace"}),
}

DEFAULT_TEMPLATE_IDS = ("thought", "subquestion", "answer_extraction", "judge", "judge_repair")


@dataclass(frozen=True, slots=True)
class PromptTemplate:
    id: str
    action: Action
    few_shot_examples: tuple[str, ...]
    body: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "action", Action(self.action))
        object.__setattr__(self, "few_shot_examples", tuple(self.few_shot_examples))
        placeholders = set(Template(self.body).get_identifiers())
        missing = REQUIRED_PLACEHOLDERS[self.action] - placeholders
        if missing:
            raise ValueError(f"template {self.id!r} is missing placeholders: {', '.join(sorted(missing))}")

    @property
    def content_hash(self) -> str:
        return sha256_text(canonical_json({
            "id": self.id,
            "action": self.action.value,
            "few_shot_examples": list(self.few_shot_examples),
            "body": self.body,
        }))

    def render(self, **variables: str) -> str:
        return Template(self.body).substitute(
            examples="\n\n".join(self.few_shot_examples), **variables
        )

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any]) -> "PromptTemplate":
        return cls(
            id=obj["id"],
            action=Action(obj["action"]),
            few_shot_examples=tuple(obj.get("few_shot_examples") or ()),
            body=obj["body"],
        )

    @classmethod
    def load(cls, path: Path) -> "PromptTemplate":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_mapping(yaml.safe_load(f))


class TemplateSet(Mapping[str, PromptTemplate]):
    def __init__(self, templates: Iterable[PromptTemplate]):
        self._templates: dict[str, PromptTemplate] = {t.id: t for t in templates}

    def __getitem__(self, template_id: str) -> PromptTemplate:
        return self._templates[template_id]

    def __iter__(self):
        return iter(self._templates)

    def __len__(self) -> int:
        return len(self._templates)

    def hashes(self) -> dict[str, str]:
        return {template_id: t.content_hash for template_id, t in sorted(self._templates.items())}

    @classmethod
    def from_directory(cls, directory: Path) -> "TemplateSet":
        overrides = {t.id: t for t in (PromptTemplate.load(p) for p in sorted(directory.glob("*.yaml")))}
        return cls({**default_templates()._templates, **overrides}.values())


@cache
def default_templates() -> TemplateSet:
    package = resources.files("hoptrace") / "templates"
    templates = []
    for template_id in DEFAULT_TEMPLATE_IDS:
        with (package / f"{template_id}.yaml").open("r", encoding="utf-8") as f:
            templates.append(PromptTemplate.from_mapping(yaml.safe_load(f)))
    return TemplateSet(templates)


def render_documents(documents: Sequence[Document]) -> str:
    if not documents:
        return "(no passages retrieved)"
    return "\n".join(f"[{d.rank}] {d.title}: {d.text}" for d in documents)


def render_chain(question: Question | str, steps: Sequence[Step]) -> str:
    text = question.text if isinstance(question, Question) else question
    lines = [f"Question: {text}"]
    hop = 0
    for step in steps:
        if isinstance(step, Thought):
            lines.append(f"Thought: {step.text}")
        elif isinstance(step, SubQA):
            hop += 1
            lines.append(f"Sub-question {hop}: {step.sub_question}")
            lines.append(f"Retrieved passages {hop}:")
            lines.append(render_documents(step.documents))
            lines.append(f"Sub-answer {hop}: {step.sub_answer}")
    return "\n".join(lines)


def render_trace_for_judge(trace: Trace) -> str:
    """Numbered steps, 1-based, so verdicts can point at a step by position."""
    lines = []
    for position, step in enumerate(trace.steps, start=1):
        if isinstance(step, Thought):
            lines.append(f"Step {position} (thought): {step.text}")
        else:
            lines.append(f"Step {position} (sub-question): {step.sub_question}")
            lines.append("  Retrieved context:")
            lines.extend(f"    {line}" for line in render_documents(step.documents).splitlines())
            lines.append(f"  Sub-answer: {step.sub_answer}")
    return "\n".join(lines)
