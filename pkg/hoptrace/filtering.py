"""
Two-stage filtering of candidate traces and selection of the one trace kept per question.

Stage one keeps traces whose sub-answers recall every gold sub-answer. Stage two asks a judge
model for per-criterion error counts, discards traces with incorrect or unfaithful steps, and
scores the rest by their redundant and irrelevant steps.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum
import json
import logging
import math
from pathlib import Path
import re
from typing import Any, Callable, Literal, Mapping, Sequence

from pydantic import BaseModel, Field, ValidationError, field_validator

from . import example, operation
from .backends import Backend
from .errors import BackendError, JudgeParseError
from .model import Question, SubQA, Thought, Trace, contains_gold
from .policy import judge_call
from .prompts import TemplateSet, default_templates, render_trace_for_judge
from .utils.hashing import canonical_json, safe_filename

logger = logging.getLogger(__name__)

_JSON_OBJECT = re.compile(r"\{.*\}", re.DOTALL)


class Criterion(StrEnum):
    INCORRECTNESS = "incorrectness"
    REDUNDANCY = "redundancy"
    IRRELEVANCE = "irrelevance"
    FAITHFULNESS = "faithfulness"


class SelectionMode(StrEnum):
    SP = "SP"
    SP_AV = "SP_AV"
    SP_AV_LJ = "SP_AV_LJ"

    @classmethod
    def parse(cls, text: str) -> "SelectionMode":
        """Accepts `SP_AV_LJ`, `sp+av+lj`, `sp-av-lj` and the like."""
        return cls(re.sub(r"[+\-\s]", "_", text.strip()).upper())


class JustificationModel(BaseModel):
    step_index: int | None = None
    criterion: Literal["incorrectness", "redundancy", "irrelevance", "faithfulness"]
    text: str = ""

    @field_validator("criterion", mode="before")
    @classmethod
    def _lowercase(cls, value: Any) -> Any:
        return value.strip().lower() if isinstance(value, str) else value


class JudgeVerdict(BaseModel):
    incorrectness: int = Field(ge=0)
    redundancy: int = Field(ge=0)
    irrelevance: int = Field(ge=0)
    faithfulness: int = Field(ge=0)
    justifications: list[JustificationModel] = Field(default_factory=list)


@dataclass(frozen=True, slots=True)
class Justification:
    step_index: int | None
    criterion: Criterion
    text: str

    def to_json(self) -> dict[str, Any]:
        return {"step_index": self.step_index, "criterion": self.criterion.value, "text": self.text}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Justification":
        return cls(step_index=obj.get("step_index"), criterion=Criterion(obj["criterion"]), text=obj.get("text", ""))


@dataclass(frozen=True, slots=True)
class JudgeReport:
    trace_ref: str
    incorrect_steps: int = 0
    redundant_steps: int = 0
    irrelevant_steps: int = 0
    unfaithful_steps: int = 0
    justifications: tuple[Justification, ...] = ()
    parse_ok: bool = True

    def to_json(self) -> dict[str, Any]:
        return {
            "trace_ref": self.trace_ref,
            "incorrect_steps": self.incorrect_steps,
            "redundant_steps": self.redundant_steps,
            "irrelevant_steps": self.irrelevant_steps,
            "unfaithful_steps": self.unfaithful_steps,
            "justifications": [j.to_json() for j in self.justifications],
            "parse_ok": self.parse_ok,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "JudgeReport":
        return cls(
            trace_ref=obj["trace_ref"],
            incorrect_steps=int(obj["incorrect_steps"]),
            redundant_steps=int(obj["redundant_steps"]),
            irrelevant_steps=int(obj["irrelevant_steps"]),
            unfaithful_steps=int(obj["unfaithful_steps"]),
            justifications=tuple(Justification.from_json(j) for j in obj.get("justifications", ())),
            parse_ok=bool(obj["parse_ok"]),
        )

    @classmethod
    def unparseable(cls, trace_ref: str) -> "JudgeReport":
        return cls(trace_ref=trace_ref, parse_ok=False)


@dataclass(frozen=True, slots=True)
class FilterOutcome:
    question_id: str
    candidates_in: int
    survivors_stage1: int
    survivors_stage2: int
    selected: Trace | None
    selection_mode: SelectionMode
    error_score_of_selected: float | None = None
    status: Literal["ok", "empty", "failed"] = "ok"
    stage1_ids: tuple[str, ...] = ()
    stage2_ids: tuple[str, ...] = ()
    discards: Mapping[str, int] = field(default_factory=dict)
    error: str | None = None

    def __post_init__(self) -> None:
        if not self.survivors_stage2 <= self.survivors_stage1 <= self.candidates_in:
            raise ValueError(f"{self.question_id}: survivor counts must shrink stage by stage")

    def to_json(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "candidates_in": self.candidates_in,
            "survivors_stage1": self.survivors_stage1,
            "survivors_stage2": self.survivors_stage2,
            "selected": self.selected.to_json() if self.selected is not None else None,
            "selection_mode": self.selection_mode.value,
            "error_score_of_selected": self.error_score_of_selected,
            "status": self.status,
            "stage1_ids": list(self.stage1_ids),
            "stage2_ids": list(self.stage2_ids),
            "discards": dict(self.discards),
            "error": self.error,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "FilterOutcome":
        return cls(
            question_id=obj["question_id"],
            candidates_in=int(obj["candidates_in"]),
            survivors_stage1=int(obj["survivors_stage1"]),
            survivors_stage2=int(obj["survivors_stage2"]),
            selected=Trace.from_json(obj["selected"]) if obj.get("selected") else None,
            selection_mode=SelectionMode(obj["selection_mode"]),
            error_score_of_selected=obj.get("error_score_of_selected"),
            status=obj.get("status", "ok"),
            stage1_ids=tuple(obj.get("stage1_ids", ())),
            stage2_ids=tuple(obj.get("stage2_ids", ())),
            discards=dict(obj.get("discards", {})),
            error=obj.get("error"),
        )


def _demo_trace(*sub_answers: str, trace_id: str = "demo:0", final: str = "Paris") -> Trace:
    steps: list[Thought | SubQA] = []
    for answer in sub_answers:
        steps.append(Thought("I need another fact."))
        steps.append(SubQA(sub_question="What is needed?", documents=(), sub_answer=answer, answer_found=True))
    steps.append(Thought(f"The final answer is: {final}", is_terminal=True, final_answer=final))
    return Trace(question_id="demo", steps=tuple(steps), predicted_answer=final, trace_id=trace_id)


@example(1.0, trace=_demo_trace("The capital is Paris", "It was built in 1889"), gold_sub_answers=["Paris", "1889"])
@example(0.5, trace=_demo_trace("The capital is Paris"), gold_sub_answers=["Paris", "1889"])
@example(1.0, trace=_demo_trace("The capital is Paris"), gold_sub_answers=[])
@operation(module="trace-filter")
def subanswer_recall(trace: Trace, gold_sub_answers: Sequence[str]) -> float:
    """Fraction of gold sub-answers contained in the concatenated sub-answers of the trace."""
    if not gold_sub_answers:
        return 1.0
    sub_answers = " ".join(step.sub_answer for step in trace.sub_steps)
    return sum(contains_gold(sub_answers, [gold]) for gold in gold_sub_answers) / len(gold_sub_answers)


@example([], traces=[], gold_sub_answers=["Paris"])
@example([_demo_trace("Paris", trace_id="demo:1")],
         traces=[_demo_trace("Paris", trace_id="demo:1"), _demo_trace("Lyon", trace_id="demo:2")],
         gold_sub_answers=["Paris"])
@operation(module="trace-filter")
def stage1_filter(traces: Sequence[Trace], gold_sub_answers: Sequence[str]) -> list[Trace]:
    return [t for t in traces if subanswer_recall(t, gold_sub_answers) == 1.0]


def _extract_json(raw: str) -> dict[str, Any]:
    text = raw.strip()
    candidates = [text] if text.startswith("{") and text.endswith("}") else []
    match = _JSON_OBJECT.search(raw)
    if match is not None:
        candidates.append(match.group(0))
    for candidate in candidates:
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise JudgeParseError("no JSON object in judge output")


def _verdict_to_report(verdict: JudgeVerdict, trace_ref: str) -> JudgeReport:
    counts = {
        Criterion.INCORRECTNESS: verdict.incorrectness,
        Criterion.REDUNDANCY: verdict.redundancy,
        Criterion.IRRELEVANCE: verdict.irrelevance,
        Criterion.FAITHFULNESS: verdict.faithfulness,
    }
    justifications: list[Justification] = []
    for criterion, stated in counts.items():
        given = [Justification(j.step_index, criterion, j.text)
                 for j in verdict.justifications if j.criterion == criterion.value]
        # counts and justifications must agree; the larger of the two wins
        given.extend(Justification(None, criterion, "no justification given") for _ in range(stated - len(given)))
        counts[criterion] = len(given)
        justifications.extend(given)
    return JudgeReport(
        trace_ref=trace_ref,
        incorrect_steps=counts[Criterion.INCORRECTNESS],
        redundant_steps=counts[Criterion.REDUNDANCY],
        irrelevant_steps=counts[Criterion.IRRELEVANCE],
        unfaithful_steps=counts[Criterion.FAITHFULNESS],
        justifications=tuple(justifications),
    )


def _parse_verdict(raw: str, trace_ref: str) -> JudgeReport:
    try:
        verdict = JudgeVerdict.model_validate(_extract_json(raw))
    except ValidationError as e:
        raise JudgeParseError(f"judge output does not match the verdict schema: {e.error_count()} error(s)") from e
    return _verdict_to_report(verdict, trace_ref)


@example(JudgeReport("demo:0", redundant_steps=1,
                     justifications=(Justification(None, Criterion.REDUNDANCY, "no justification given"),)),
         raw='{"incorrectness": 0, "redundancy": 1, "irrelevance": 0, "faithfulness": 0}',
         trace=_demo_trace("Paris"))
@example(JudgeReport.unparseable("demo:0"), raw="The trace looks good overall.", trace=_demo_trace("Paris"))
@example(JudgeReport("demo:0", unfaithful_steps=1,
                     justifications=(Justification(3, Criterion.FAITHFULNESS, "Not in the passages."),)),
         raw='Verdict:\n```json\n{"incorrectness": 0, "redundancy": 0, "irrelevance": 0, "faithfulness": 1, '
             '"justifications": [{"step_index": 3, "criterion": "Faithfulness", "text": "Not in the passages."}]}\n```',
         trace=_demo_trace("Paris"))
@operation(module="trace-filter")
def parse_judge_report(raw: str, trace: Trace, repair: Callable[[str], str] | None = None) -> JudgeReport:
    """
    Parse a judge verdict. When it does not match the schema, `repair` (if given) is asked once
    for a corrected reply; a verdict that still fails yields a report with `parse_ok=False`.
    """
    try:
        return _parse_verdict(raw, trace.trace_id)
    except JudgeParseError as first:
        if repair is None:
            logger.warning("%s: unparseable judge verdict (%s)", trace.trace_id, first)
            return JudgeReport.unparseable(trace.trace_id)
        logger.info("%s: judge verdict unparseable (%s); asking for a repair", trace.trace_id, first)
    try:
        return _parse_verdict(repair(raw), trace.trace_id)
    except JudgeParseError as second:
        logger.warning("%s: judge verdict unparseable after repair (%s)", trace.trace_id, second)
        return JudgeReport.unparseable(trace.trace_id)


@example(True, report=JudgeReport("demo:0", incorrect_steps=1))
@example(False, report=JudgeReport("demo:0", redundant_steps=2))
@example(False, report=JudgeReport("demo:0"))
@example(raises=ValueError, report=JudgeReport.unparseable("demo:0"))
@operation(module="trace-filter")
def is_fatal(report: JudgeReport) -> bool:
    if not report.parse_ok:
        raise ValueError(f"{report.trace_ref}: an unparseable verdict is neither fatal nor passing")
    return report.incorrect_steps > 0 or report.unfaithful_steps > 0


@example(3.0, report=JudgeReport("demo:0", redundant_steps=2, irrelevant_steps=1), w_redundant=1.0,
         w_irrelevant=1.0)
@example(0.0, report=JudgeReport("demo:0"), w_redundant=1.0, w_irrelevant=1.0)
@example(0.5, report=JudgeReport("demo:0", redundant_steps=1), w_redundant=0.5, w_irrelevant=1.0)
@example(raises=ValueError, report=JudgeReport("demo:0", unfaithful_steps=1))
@operation(module="trace-filter")
def error_score(report: JudgeReport, w_redundant: float = 1.0, w_irrelevant: float = 1.0) -> float:
    if is_fatal(report):
        raise ValueError(f"{report.trace_ref}: fatal traces are discarded, not scored")
    return w_redundant * report.redundant_steps + w_irrelevant * report.irrelevant_steps


@example(_demo_trace("a", "b", "c", "d", trace_id="demo:B"),
         scored=[(_demo_trace("a", "b", trace_id="demo:A"), 2.0),
                 (_demo_trace("a", "b", "c", "d", trace_id="demo:B"), 0.0)])
@example(_demo_trace("a", "b", trace_id="demo:B"),
         scored=[(_demo_trace("a", "b", "c", trace_id="demo:A"), 0.0),
                 (_demo_trace("a", "b", trace_id="demo:B"), 0.0)])
@example(_demo_trace("a", trace_id="demo:A"), scored=[(_demo_trace("a", trace_id="demo:A"), 1.0)])
@example(None, scored=[])
@operation(module="trace-filter")
def select_optimal(scored: Sequence[tuple[Trace, float]]) -> Trace | None:
    """Minimum error score, then shortest, then smallest trace id."""
    for trace, score in scored:
        if not math.isfinite(score):
            raise ValueError(f"{trace.trace_id}: score {score} is not finite")
    if not scored:
        return None
    return min(scored, key=lambda pair: (pair[1], pair[0].length, pair[0].trace_id))[0]


def transcript_path(transcript_dir: Path, trace_id: str) -> Path:
    return transcript_dir / f"{safe_filename(trace_id)}.json"


def judge_trace(
        trace: Trace,
        question: Question,
        judge: Backend,
        templates: TemplateSet | None = None,
        transcript_dir: Path | None = None,
) -> JudgeReport:
    """Render, judge, repair once if needed, and persist the exchange as `<trace_id>.json`."""
    templates = templates or default_templates()
    rendering = render_trace_for_judge(trace)
    path = transcript_path(transcript_dir, trace.trace_id) if transcript_dir is not None else None
    if path is not None and path.exists():
        path.unlink()

    def call(template_id: str, previous_reply: str | None = None) -> str:
        return judge_call(rendering, judge, trace_id=trace.trace_id, question=question.text, steps=trace.steps,
                          template=templates[template_id], previous_reply=previous_reply, transcript_path=path)

    report = parse_judge_report(call("judge"), trace, repair=lambda raw: call("judge_repair", raw))
    if path is not None:
        transcript = json.loads(path.read_text(encoding="utf-8"))
        transcript["trace_id"] = trace.trace_id
        transcript["report"] = report.to_json()
        path.write_text(canonical_json(transcript, indent=2) + "\n", encoding="utf-8")
    return report


def _shortest(traces: Sequence[Trace]) -> Trace | None:
    return select_optimal([(t, 0.0) for t in traces])


@operation(module="trace-filter")
def run_filter_pipeline(
        candidates: Sequence[Trace],
        question: Question,
        mode: SelectionMode,
        judge: Backend | None = None,
        w_redundant: float = 1.0,
        w_irrelevant: float = 1.0,
        templates: TemplateSet | None = None,
        transcript_dir: Path | None = None,
        workers: int = 1,
) -> FilterOutcome:
    """
    SP keeps the shortest candidate; SP_AV first drops traces missing a gold sub-answer; SP_AV_LJ
    additionally judges every survivor and keeps the lowest-scoring non-fatal trace. The judge is
    only ever called in SP_AV_LJ mode.
    """
    mode = SelectionMode(mode)
    for trace in candidates:
        if trace.question_id != question.id:
            raise ValueError(f"trace {trace.trace_id} belongs to {trace.question_id}, not {question.id}")
    n = len(candidates)
    if mode is SelectionMode.SP:
        selected = _shortest(candidates)
        ids = tuple(t.trace_id for t in candidates)
        return FilterOutcome(question.id, n, n, n, selected, mode, stage1_ids=ids, stage2_ids=ids,
                             status="ok" if selected else "empty")

    survivors = stage1_filter(candidates, question.gold_sub_answers)
    stage1_ids = tuple(t.trace_id for t in survivors)
    discards = {"recall": n - len(survivors)}
    if mode is SelectionMode.SP_AV:
        selected = _shortest(survivors)
        return FilterOutcome(question.id, n, len(survivors), len(survivors), selected, mode,
                             stage1_ids=stage1_ids, stage2_ids=stage1_ids, discards=discards,
                             status="ok" if selected else "empty")

    if judge is None:
        raise ValueError("SP_AV_LJ selection needs a judge backend")
    discards |= {"judge_fatal": 0, "judge_unparseable": 0}
    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            reports = list(pool.map(
                lambda t: judge_trace(t, question, judge, templates=templates, transcript_dir=transcript_dir),
                survivors,
            ))
    except BackendError as e:
        logger.error("%s: judge unavailable: %s", question.id, e)
        return FilterOutcome(question.id, n, len(survivors), 0, None, mode, stage1_ids=stage1_ids,
                             discards=discards, status="failed", error=str(e))

    scored: list[tuple[Trace, float]] = []
    for trace, report in zip(survivors, reports):
        if not report.parse_ok:
            discards["judge_unparseable"] += 1
        elif is_fatal(report):
            discards["judge_fatal"] += 1
        else:
            scored.append((trace, error_score(report, w_redundant, w_irrelevant)))
    selected = select_optimal(scored)
    score = next((s for t, s in scored if t is selected), None)
    return FilterOutcome(question.id, n, len(survivors), len(scored), selected, mode, score,
                         stage1_ids=stage1_ids, stage2_ids=tuple(t.trace_id for t, _ in scored),
                         discards=discards, status="ok" if selected else "empty")


def summarize_outcomes(outcomes: Sequence[FilterOutcome]) -> dict[str, Any]:
    discards: dict[str, int] = {}
    for outcome in outcomes:
        for reason, count in outcome.discards.items():
            discards[reason] = discards.get(reason, 0) + count
    return {
        "questions": len(outcomes),
        "selected": sum(o.selected is not None for o in outcomes),
        "empty": sum(o.status == "empty" for o in outcomes),
        "failed": sum(o.status == "failed" for o in outcomes),
        "candidates": sum(o.candidates_in for o in outcomes),
        "survivors_stage1": sum(o.survivors_stage1 for o in outcomes),
        "survivors_stage2": sum(o.survivors_stage2 for o in outcomes),
        "discards": dict(sorted(discards.items())),
    }
