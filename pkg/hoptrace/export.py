"""
Training samples: a selected trace rendered as text and split into segments that are either
learned or masked.

The question and every block of retrieved passages are masked; thoughts, sub-questions and
sub-answers are learned. Masks are character offsets over the rendered text so any tokenizer can
project them onto its own tokens (see `project_mask`).
"""

from dataclasses import dataclass
from enum import StrEnum
import json
import logging
from pathlib import Path
from typing import Any, Mapping, Sequence

from intervaltree import IntervalTree

from . import example, operation
from .errors import DatasetFormatError, IntegrityError, TraceStructureError
from .model import Document, Question, SubQA, Thought, Trace, validate_alternation
from .utils.hashing import canonical_json, sha256_file

logger = logging.getLogger(__name__)


class SegmentKind(StrEnum):
    QUESTION = "question"
    THOUGHT = "thought"
    SUBQUESTION = "subquestion"
    DOCUMENTS = "documents"
    SUBANSWER = "subanswer"
    FINAL_THOUGHT = "final_thought"


MASKED_KINDS = frozenset({SegmentKind.QUESTION, SegmentKind.DOCUMENTS})

QUESTION_STEP_INDEX = -1


@dataclass(frozen=True, slots=True)
class RenderingScheme:
    question: str = "Question: "
    thought: str = "Thought: "
    subquestion: str = "Sub-question: "
    documents: str = "Documents:\n"
    subanswer: str = "Sub-answer: "

    def render_documents(self, documents: Sequence[Document]) -> str:
        return self.documents + "".join(f"[{d.rank}] {d.title}: {d.text}\n" for d in documents)


DEFAULT_SCHEME = RenderingScheme()


@dataclass(frozen=True, slots=True)
class Segment:
    kind: SegmentKind
    text: str
    learn: bool
    step_index: int
    start: int
    end: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SegmentKind(self.kind))
        if self.learn == (self.kind in MASKED_KINDS):
            raise ValueError(f"a {self.kind} segment must have learn={self.kind not in MASKED_KINDS}")
        if self.end - self.start != len(self.text):
            raise ValueError(f"segment [{self.start}, {self.end}) does not span its {len(self.text)} characters")

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "text": self.text, "learn": self.learn, "step_index": self.step_index,
                "start": self.start, "end": self.end}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Segment":
        return cls(kind=SegmentKind(obj["kind"]), text=obj["text"], learn=bool(obj["learn"]),
                   step_index=int(obj["step_index"]), start=int(obj["start"]), end=int(obj["end"]))


@dataclass(frozen=True, slots=True)
class TrainingSample:
    question_id: str
    segments: tuple[Segment, ...]
    trace_length: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        offset = 0
        for i, segment in enumerate(self.segments):
            if segment.start != offset:
                raise ValueError(f"{self.question_id}: segment {i} starts at {segment.start}, expected {offset}")
            offset = segment.end
        if not self.segments or self.segments[0].kind is not SegmentKind.QUESTION:
            raise ValueError(f"{self.question_id}: a sample starts with its question segment")

    @property
    def rendered_text(self) -> str:
        return "".join(s.text for s in self.segments)

    def segment_tree(self) -> IntervalTree:
        tree = IntervalTree()
        for segment in self.segments:
            if segment.end > segment.start:
                tree.addi(segment.start, segment.end, segment)
        return tree

    def to_json(self) -> dict[str, Any]:
        return {"question_id": self.question_id, "trace_length": self.trace_length,
                "segments": [s.to_json() for s in self.segments]}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "TrainingSample":
        return cls(question_id=str(obj["question_id"]), trace_length=int(obj["trace_length"]),
                   segments=tuple(Segment.from_json(s) for s in obj["segments"]))


def segment_at(sample: TrainingSample, offset: int) -> Segment | None:
    hits = sample.segment_tree().at(offset)
    return next(iter(hits)).data if hits else None


def project_mask(sample: TrainingSample, token_spans: Sequence[tuple[int, int]]) -> list[bool]:
    """
    Learn flags for tokens given as character spans `[start, end)` over the rendered text. A token
    is learned only if every segment it touches is learned.
    """
    tree = sample.segment_tree()
    flags = []
    for start, end in token_spans:
        hits = tree.overlap(start, end) if end > start else tree.at(start)
        flags.append(bool(hits) and all(h.data.learn for h in hits))
    return flags


class _Builder:
    def __init__(self) -> None:
        self.segments: list[Segment] = []
        self.offset = 0

    def add(self, kind: SegmentKind, text: str, step_index: int) -> None:
        self.segments.append(Segment(kind, text, kind not in MASKED_KINDS, step_index,
                                     self.offset, self.offset + len(text)))
        self.offset += len(text)


def _one_line(text: str) -> str:
    return " ".join(text.splitlines())


@operation(module="dataset-export")
def render_trace(trace: Trace, question: Question, scheme: RenderingScheme = DEFAULT_SCHEME) -> TrainingSample:
    """Render a complete trace; the question and every passage block are masked."""
    if trace.question_id != question.id:
        raise ValueError(f"trace {trace.trace_id} belongs to {trace.question_id}, not {question.id}")
    validate_alternation(trace.steps)
    if not trace.is_complete:
        raise TraceStructureError("trace does not end in a terminal thought", step_index=max(trace.length - 1, 0))
    builder = _Builder()
    builder.add(SegmentKind.QUESTION, f"{scheme.question}{_one_line(question.text)}\n", QUESTION_STEP_INDEX)
    last = trace.length - 1
    for i, step in enumerate(trace.steps):
        if isinstance(step, Thought):
            kind = SegmentKind.FINAL_THOUGHT if i == last else SegmentKind.THOUGHT
            builder.add(kind, f"{scheme.thought}{_one_line(step.text)}\n", i)
        elif isinstance(step, SubQA):
            builder.add(SegmentKind.SUBQUESTION, f"{scheme.subquestion}{_one_line(step.sub_question)}\n", i)
            builder.add(SegmentKind.DOCUMENTS, scheme.render_documents(
                [Document(d.doc_id, _one_line(d.title), _one_line(d.text), d.score, d.rank) for d in step.documents]
            ), i)
            builder.add(SegmentKind.SUBANSWER, f"{scheme.subanswer}{_one_line(step.sub_answer)}\n", i)
    return TrainingSample(question_id=question.id, segments=tuple(builder.segments), trace_length=trace.length)


def manifest_path(path: Path) -> Path:
    return path.with_suffix(".manifest.json")


@operation(module="dataset-export")
def export_samples(
        samples: Sequence[TrainingSample],
        path: Path,
        template_hashes: Mapping[str, str] | None = None,
        config_snapshot: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """Write one sample per line plus `<name>.manifest.json`; returns the manifest."""
    seen: set[str] = set()
    for sample in samples:
        if sample.question_id in seen:
            raise DatasetFormatError(f"duplicate question_id {sample.question_id!r}; one sample per question",
                                     path=str(path))
        seen.add(sample.question_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sample in samples:
            f.write(canonical_json(sample.to_json()) + "\n")
    manifest = {
        "file": path.name,
        "count": len(samples),
        "sha256": sha256_file(path),
        "template_hashes": dict(sorted((template_hashes or {}).items())),
        "config": dict(config_snapshot or {}),
    }
    manifest_path(path).write_text(canonical_json(manifest, indent=2) + "\n", encoding="utf-8")
    logger.info("wrote %d training samples to %s", len(samples), path)
    return manifest


@example([], input_str="")
@example(raises=DatasetFormatError, input_str='{"question_id": "q1", "trace_length": 1, "segm')
@example(raises=DatasetFormatError, input_str='{"question_id": "q1"}\n')
@operation(module="dataset-export")
def load_samples(path: Path, verify: bool = True) -> list[TrainingSample]:
    """
    Load an exported training file. When its manifest sits alongside and `verify` is set, the
    file's content hash and sample count must match it.
    """
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                samples.append(TrainingSample.from_json(json.loads(line)))
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"invalid JSON: {e.msg}", line=line_number, path=str(path)) from e
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError(f"invalid training sample: {e!r}", line=line_number,
                                         path=str(path)) from e
    manifest_file = manifest_path(path)
    if verify and manifest_file.exists():
        manifest = json.loads(manifest_file.read_text(encoding="utf-8"))
        actual = sha256_file(path)
        if manifest.get("sha256") != actual:
            raise IntegrityError(f"{path}: content hash {actual} does not match its manifest")
        if manifest.get("count") != len(samples):
            raise IntegrityError(f"{path}: {len(samples)} samples but the manifest records {manifest.get('count')}")
    return samples
