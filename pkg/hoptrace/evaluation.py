"""
Question-answering evaluation: dataset loaders, the iterative retrieval agent that drives a
model through thought / sub-question / sub-answer steps, and EM / Accuracy / F1 aggregation.
"""

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
import re
from typing import Any, Callable, Iterator, Literal, Mapping, Sequence

from rich.console import Console
from rich.progress import track
from rich.table import Table

from . import example, operation
from .backends import Backend
from .errors import BackendError, DatasetFormatError
from .metrics import accuracy_contains, exact_match, token_f1
from .model import Dataset, Question, Step, SubQA, Trace, TraceSource
from .policy import extract_subanswer, generate_subquestions, generate_thoughts
from .prompts import TemplateSet
from .retrieval import Retriever, retrieve
from .utils.hashing import canonical_json

logger = logging.getLogger(__name__)

_DESCRIPTION = re.compile(r'\(description\s+(?:"((?:[^"\\]|\\.)*)"|([^()\s]+))\)')


@dataclass(frozen=True, slots=True)
class EvalConfig:
    limit: int | None = 1000
    max_steps: int = 12
    top_k: int = 3

    def __post_init__(self) -> None:
        if self.limit is not None and self.limit < 1:
            raise ValueError(f"limit must be at least 1, got {self.limit}")
        if self.max_steps < 1 or self.top_k < 1:
            raise ValueError("max_steps and top_k must be at least 1")

    def to_json(self) -> dict[str, Any]:
        return {"limit": self.limit, "max_steps": self.max_steps, "top_k": self.top_k}


@dataclass(frozen=True, slots=True)
class EvalRecord:
    question_id: str
    prediction: str
    trace: Trace
    em: bool
    accuracy: bool
    f1: float
    steps_used: int
    retrievals: int
    status: Literal["answered", "unanswered", "failed"] = "answered"
    question_type: str | None = None
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "question_type": self.question_type,
            "prediction": self.prediction,
            "em": self.em,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "steps_used": self.steps_used,
            "retrievals": self.retrievals,
            "status": self.status,
            "error": self.error,
            "trace": self.trace.to_json(),
        }


@dataclass(frozen=True, slots=True)
class TypeMetrics:
    n: int
    em: float | None
    accuracy: float | None
    f1: float | None

    def to_json(self) -> dict[str, Any]:
        return {"n": self.n, "em": self.em, "accuracy": self.accuracy, "f1": self.f1}


@dataclass(frozen=True, slots=True)
class MetricsSummary:
    dataset: str
    n: int
    em: float | None
    accuracy: float | None
    f1: float | None
    by_question_type: Mapping[str, TypeMetrics] = field(default_factory=dict)
    failed: int = 0
    unanswered: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "n": self.n,
            "em": self.em,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "failed": self.failed,
            "unanswered": self.unanswered,
            "by_question_type": {k: v.to_json() for k, v in sorted(self.by_question_type.items())},
        }


def _require(obj: Mapping[str, Any], key: str, line: int, path: Path) -> Any:
    if not isinstance(obj, Mapping):
        raise DatasetFormatError("expected a JSON object", line=line, path=str(path))
    if key not in obj:
        raise DatasetFormatError(f"missing field {key!r}", line=line, path=str(path))
    return obj[key]


def _unique(values: Sequence[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(v for v in values if v))


def _from_2wiki(obj: Mapping[str, Any], line: int, path: Path, position: int) -> Question:
    evidences = obj.get("evidences") or []
    sub_answers = [str(e[2]) for e in evidences if isinstance(e, (list, tuple)) and len(e) >= 3]
    return Question(
        id=str(_require(obj, "_id", line, path)),
        text=_require(obj, "question", line, path),
        gold_answers=(str(_require(obj, "answer", line, path)),),
        gold_sub_answers=_unique(sub_answers),
        dataset=Dataset.TWO_WIKI,
        question_type=obj.get("type"),
    )


def _from_musique(obj: Mapping[str, Any], line: int, path: Path, position: int) -> Question:
    question_id = str(_require(obj, "id", line, path))
    decomposition = obj.get("question_decomposition") or []
    return Question(
        id=question_id,
        text=_require(obj, "question", line, path),
        gold_answers=_unique([str(_require(obj, "answer", line, path))] + list(obj.get("answer_aliases") or [])),
        gold_sub_answers=_unique([str(d["answer"]) for d in decomposition if isinstance(d, Mapping) and "answer" in d]),
        dataset=Dataset.MUSIQUE,
        # ids look like "2hop__1234_5678"
        question_type=question_id.split("__", 1)[0] if "__" in question_id else None,
    )


def _from_hotpotqa(obj: Mapping[str, Any], line: int, path: Path, position: int) -> Question:
    return Question(
        id=str(_require(obj, "_id", line, path)),
        text=_require(obj, "question", line, path),
        gold_answers=(str(_require(obj, "answer", line, path)),),
        dataset=Dataset.HOTPOTQA,
        question_type=obj.get("type"),
    )


def _from_webquestions(obj: Mapping[str, Any], line: int, path: Path, position: int) -> Question:
    text = obj.get("utterance") or obj.get("question")
    if text is None:
        raise DatasetFormatError("missing field 'utterance'", line=line, path=str(path))
    if "answers" in obj:
        answers = [str(a) for a in obj["answers"]]
    elif "targetValue" in obj:
        answers = [quoted.replace('\\"', '"') if quoted else bare
                   for quoted, bare in _DESCRIPTION.findall(obj["targetValue"])]
    else:
        raise DatasetFormatError("missing field 'answers' or 'targetValue'", line=line, path=str(path))
    return Question(
        id=str(obj.get("id") or f"webquestions-{position}"),
        text=text,
        gold_answers=_unique(answers),
        dataset=Dataset.WEBQUESTIONS,
    )


def _from_custom(obj: Mapping[str, Any], line: int, path: Path, position: int) -> Question:
    for key in ("id", "text", "gold_answers"):
        _require(obj, key, line, path)
    return Question.from_json(obj)


_MAPPERS: dict[Dataset, Callable[[Mapping[str, Any], int, Path, int], Question]] = {
    Dataset.TWO_WIKI: _from_2wiki,
    Dataset.MUSIQUE: _from_musique,
    Dataset.HOTPOTQA: _from_hotpotqa,
    Dataset.WEBQUESTIONS: _from_webquestions,
    Dataset.CUSTOM: _from_custom,
}


def _records(path: Path) -> Iterator[tuple[int, Any]]:
    """(line or record number, record) pairs from a JSON array or a JSONL file."""
    with open(path, "r", encoding="utf-8") as f:
        head = f.read(1)
        while head and head.isspace():
            head = f.read(1)
        f.seek(0)
        if head == "[":
            try:
                items = json.load(f)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"invalid JSON: {e.msg}", line=e.lineno, path=str(path)) from e
            yield from enumerate(items, start=1)
            return
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield line_number, json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"invalid JSON: {e.msg}", line=line_number, path=str(path)) from e


@example([Question("q1", "A?", ("a",)), Question("q2", "B?", ("b",))],
         input_str='{"id": "q1", "text": "A?", "gold_answers": ["a"]}\n'
                   '{"id": "q2", "text": "B?", "gold_answers": ["b"]}\n',
         dataset=Dataset.CUSTOM, limit=1000)
@example([Question("q1", "A?", ("a",), dataset=Dataset.TWO_WIKI, question_type="comparison")],
         input_str='[{"_id": "q1", "question": "A?", "answer": "a", "type": "comparison"},'
                   ' {"_id": "q2", "question": "B?", "answer": "b", "type": "inference"}]',
         dataset=Dataset.TWO_WIKI, limit=1)
@example(raises=DatasetFormatError, input_str='{"id": "q1", "question": "A?", "answer": "a"}\n'
                                              '{"id": "q2", "question": "B?"}\n',
         dataset=Dataset.MUSIQUE, limit=10)
@operation(module="eval-harness")
def load_dataset(path: Path, dataset: Dataset | str, limit: int | None = None) -> list[Question]:
    """The first `limit` questions of a dev split, in file order."""
    dataset = Dataset(dataset)
    if limit is not None and limit < 1:
        raise ValueError(f"limit must be at least 1, got {limit}")
    mapper = _MAPPERS[dataset]
    questions: list[Question] = []
    seen: set[str] = set()
    for position, (line, obj) in enumerate(_records(path), start=1):
        if limit is not None and len(questions) >= limit:
            break
        try:
            question = mapper(obj, line, path, position)
        except DatasetFormatError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"invalid {dataset.value} record: {e}", line=line, path=str(path)) from e
        if question.id in seen:
            raise DatasetFormatError(f"duplicate question id {question.id!r}", line=line, path=str(path))
        seen.add(question.id)
        questions.append(question)
    logger.info("loaded %d %s questions from %s", len(questions), dataset.value, path)
    return questions


def _score(question: Question, steps: Sequence[Step], retrievals: int, error: str | None = None) -> EvalRecord:
    last = steps[-1] if steps else None
    answered = error is None and last is not None and getattr(last, "is_terminal", False)
    prediction = (last.final_answer or "") if answered else ""
    trace = Trace(question_id=question.id, steps=tuple(steps), predicted_answer=prediction if answered else None,
                  source=TraceSource.INFERENCE, trace_id=f"{question.id}:inference")
    return EvalRecord(
        question_id=question.id,
        prediction=prediction,
        trace=trace,
        em=exact_match(prediction, question.gold_answers),
        accuracy=accuracy_contains(prediction, question.gold_answers),
        f1=token_f1(prediction, question.gold_answers),
        steps_used=len(steps),
        retrievals=retrievals,
        status="failed" if error is not None else ("answered" if answered else "unanswered"),
        question_type=question.question_type,
        error=error,
    )


@operation(module="eval-harness")
def run_inference_agent(
        question: Question,
        model: Backend,
        retriever: Retriever,
        max_steps: int = 12,
        top_k: int = 3,
        templates: TemplateSet | None = None,
) -> EvalRecord:
    """
    Greedy thought, sub-question, retrieval and sub-answer loop until a thought carries the final
    answer or `max_steps` steps are used. Repeated sub-questions are allowed, so the model can
    rephrase after a "not found".
    """
    if max_steps < 1:
        raise ValueError(f"max_steps must be at least 1, got {max_steps}")
    steps: list[Step] = []
    retrievals = 0
    try:
        while len(steps) < max_steps:
            thought = generate_thoughts(question, steps, 1, 0.0, model, templates=templates)[0]
            steps.append(thought)
            if thought.is_terminal or len(steps) >= max_steps:
                break
            sub_question = generate_subquestions(question, steps, 1, 0.0, model, templates=templates)[0]
            documents = retrieve(sub_question, top_k, retriever)
            retrievals += 1
            answer, found = extract_subanswer(question, steps, sub_question, documents, 0.0, model,
                                              templates=templates)
            steps.append(SubQA(sub_question=sub_question, documents=tuple(documents), sub_answer=answer,
                               answer_found=found))
    except BackendError as e:
        logger.error("%s: agent failed after %d steps: %s", question.id, len(steps), e)
        return _score(question, steps, retrievals, error=str(e))
    record = _score(question, steps, retrievals)
    if record.status == "unanswered":
        logger.info("%s: no final answer within %d steps", question.id, max_steps)
    return record


def _percent(values: Sequence[float]) -> float | None:
    return 100.0 * sum(values) / len(values) if values else None


def _metrics(records: Sequence[EvalRecord]) -> TypeMetrics:
    return TypeMetrics(
        n=len(records),
        em=_percent([float(r.em) for r in records]),
        accuracy=_percent([float(r.accuracy) for r in records]),
        f1=_percent([r.f1 for r in records]),
    )


def summarize_records(records: Sequence[EvalRecord], dataset: str) -> MetricsSummary:
    """Means over every record that did not fail; unanswered records count as wrong."""
    scored = [r for r in records if r.status != "failed"]
    overall = _metrics(scored)
    by_type: dict[str, list[EvalRecord]] = {}
    for record in scored:
        if record.question_type is not None:
            by_type.setdefault(record.question_type, []).append(record)
    return MetricsSummary(
        dataset=dataset,
        n=overall.n,
        em=overall.em,
        accuracy=overall.accuracy,
        f1=overall.f1,
        by_question_type={t: _metrics(rs) for t, rs in sorted(by_type.items())},
        failed=len(records) - len(scored),
        unanswered=sum(r.status == "unanswered" for r in scored),
    )


@operation(module="eval-harness")
def evaluate_dataset(
        questions: Sequence[Question],
        model: Backend,
        retriever: Retriever,
        config: EvalConfig = EvalConfig(),
        templates: TemplateSet | None = None,
        workers: int = 1,
        show_progress: bool = False,
) -> tuple[MetricsSummary, list[EvalRecord]]:
    """Run the agent on every question (concurrently) and aggregate; records keep question order."""
    dataset = questions[0].dataset.value if questions else Dataset.CUSTOM.value

    def run(question: Question) -> EvalRecord:
        return run_inference_agent(question, model, retriever, max_steps=config.max_steps, top_k=config.top_k,
                                   templates=templates)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(run, questions)
        if show_progress:
            results = track(results, total=len(questions), description="Evaluating...")
        records = list(results)
    return summarize_records(records, dataset), records


def write_results(summary: MetricsSummary, records: Sequence[EvalRecord], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "records.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(canonical_json(record.to_json()) + "\n")
    (out_dir / "summary.json").write_text(canonical_json(summary.to_json(), indent=2) + "\n", encoding="utf-8")
    with open(out_dir / "by_type.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["question_type", "n", "em", "accuracy", "f1"])
        rows = [("all", summary.n, summary.em, summary.accuracy, summary.f1)]
        rows.extend((t, m.n, m.em, m.accuracy, m.f1) for t, m in sorted(summary.by_question_type.items()))
        for name, n, em, accuracy, f1 in rows:
            writer.writerow([name, n] + ["" if v is None else f"{v:.2f}" for v in (em, accuracy, f1)])


def summary_table(summary: MetricsSummary) -> Table:
    table = Table(title=f"{summary.dataset}: {summary.n} scored, {summary.unanswered} unanswered, "
                        f"{summary.failed} failed")
    for column in ("Question type", "N", "EM", "Accuracy", "F1"):
        table.add_column(column, justify="left" if column == "Question type" else "right")

    def fmt(value: float | None) -> str:
        return "n/a" if value is None else f"{value:.2f}"

    table.add_row("all", str(summary.n), fmt(summary.em), fmt(summary.accuracy), fmt(summary.f1))
    for name, m in sorted(summary.by_question_type.items()):
        table.add_row(name, str(m.n), fmt(m.em), fmt(m.accuracy), fmt(m.f1))
    return table


def print_summary(summary: MetricsSummary, console: Console | None = None) -> None:
    (console or Console()).print(summary_table(summary))
