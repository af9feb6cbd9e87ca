import json
import random
import re

import pytest

from conftest import make_trace, subqa, thought

from hoptrace.errors import DatasetFormatError, IntegrityError, TraceStructureError
from hoptrace.export import (
    QUESTION_STEP_INDEX, SegmentKind, export_samples, load_samples, manifest_path, project_mask, render_trace,
    segment_at
)
from hoptrace.model import Question, Trace

QUESTION = Question(id="q", text="Who directed the film in which Ellen Ripley first appeared?",
                    gold_answers=("Ridley Scott",), gold_sub_answers=("Alien",))


def _random_trace(rng: random.Random, question_id: str) -> Trace:
    steps = []
    for hop in range(rng.randint(0, 4)):
        steps.append(thought(f"Hop {hop}: I need more\nfacts."))
        passages = [f"Passage {hop}.{i} mentions item {rng.randint(0, 99)}." for i in range(rng.randint(0, 3))]
        answer = rng.choice(["not found", f"item {rng.randint(0, 99)}"])
        steps.append(subqa(f"What about hop {hop}?", answer, *passages))
    steps.append(thought("Enough. The final answer is: Ridley Scott"))
    return Trace(question_id=question_id, steps=tuple(steps), predicted_answer="Ridley Scott",
                 trace_id=f"{question_id}:r")


def test_masked_segments_are_exactly_question_and_passages():
    rng = random.Random(5)
    for i in range(200):
        question = Question(id=f"q{i}", text="Q?\nsecond line", gold_answers=("Ridley Scott",))
        trace = _random_trace(rng, question.id)
        sample = render_trace(trace, question)
        masked = [(s.kind, s.step_index) for s in sample.segments if not s.learn]
        expected = [(SegmentKind.QUESTION, QUESTION_STEP_INDEX)] + [
            (SegmentKind.DOCUMENTS, j) for j, step in enumerate(trace.steps) if j % 2 == 1
        ]
        assert masked == expected
        learned = {s.kind for s in sample.segments if s.learn}
        assert SegmentKind.FINAL_THOUGHT in learned
        assert sample.segments[-1].kind is SegmentKind.FINAL_THOUGHT
        assert sample.trace_length == trace.length
        # offsets tile the rendered text and every segment is a single newline-terminated block
        offset = 0
        for segment in sample.segments:
            assert segment.start == offset
            assert sample.rendered_text[segment.start:segment.end] == segment.text
            assert segment.text.endswith("\n")
            offset = segment.end
        assert offset == len(sample.rendered_text)


def test_rendering_layout():
    trace = make_trace("q", ["Alien"], "Ridley Scott")
    sample = render_trace(trace, QUESTION)
    assert sample.rendered_text == (
        "Question: Who directed the film in which Ellen Ripley first appeared?\n"
        "Thought: I still need fact number 1.\n"
        "Sub-question: What is fact number 1?\n"
        "Documents:\n"
        "[1] Doc 0: The fact is Alien.\n"
        "Sub-answer: Alien\n"
        "Thought: That settles it. The final answer is: Ridley Scott\n"
    )
    assert [s.kind for s in sample.segments] == [
        SegmentKind.QUESTION, SegmentKind.THOUGHT, SegmentKind.SUBQUESTION, SegmentKind.DOCUMENTS,
        SegmentKind.SUBANSWER, SegmentKind.FINAL_THOUGHT,
    ]


def test_segment_lookup_and_token_projection():
    sample = render_trace(make_trace("q", ["Alien"], "Ridley Scott"), QUESTION)
    documents = next(s for s in sample.segments if s.kind is SegmentKind.DOCUMENTS)
    answer = next(s for s in sample.segments if s.kind is SegmentKind.SUBANSWER)
    assert segment_at(sample, 0).kind is SegmentKind.QUESTION
    assert segment_at(sample, documents.start + 3) == documents
    assert segment_at(sample, len(sample.rendered_text)) is None
    spans = [(m.start(), m.end()) for m in re.finditer(r"\S+", sample.rendered_text)]
    flags = project_mask(sample, spans)
    for (start, end), learn in zip(spans, flags):
        owner = segment_at(sample, start)
        assert learn == owner.learn
    # a token straddling the passages and the sub-answer is not learned
    assert project_mask(sample, [(documents.end - 2, answer.start + 2)]) == [False]
    assert project_mask(sample, [(answer.start, answer.end)]) == [True]


def test_export_round_trip_and_manifest(tmp_path):
    rng = random.Random(1)
    samples = [render_trace(_random_trace(rng, f"q{i}"), Question(f"q{i}", "Q?", ("Ridley Scott",)))
               for i in range(8)]
    path = tmp_path / "train.jsonl"
    manifest = export_samples(samples, path, template_hashes={"thought": "abc"}, config_snapshot={"seed": 0})
    assert len(path.read_text(encoding="utf-8").splitlines()) == 8
    assert manifest["count"] == 8
    assert json.loads(manifest_path(path).read_text(encoding="utf-8")) == manifest
    assert load_samples(path) == samples
    first = path.read_bytes()
    export_samples(samples, path, template_hashes={"thought": "abc"}, config_snapshot={"seed": 0})
    assert path.read_bytes() == first


def test_tampered_export_fails_integrity_check(tmp_path):
    path = tmp_path / "train.jsonl"
    export_samples([render_trace(make_trace("q", ["Alien"], "Ridley Scott"), QUESTION)], path)
    path.write_text(path.read_text(encoding="utf-8") + "\n\n", encoding="utf-8")
    with pytest.raises(IntegrityError):
        load_samples(path)
    assert len(load_samples(path, verify=False)) == 1


def test_duplicate_question_is_rejected(tmp_path):
    sample = render_trace(make_trace("q", ["Alien"], "Ridley Scott"), QUESTION)
    with pytest.raises(DatasetFormatError, match="duplicate question_id"):
        export_samples([sample, sample], tmp_path / "train.jsonl")
    assert not (tmp_path / "train.jsonl").exists()


def test_incomplete_trace_is_not_rendered():
    trace = Trace(question_id="q", steps=(thought("I need a fact."), subqa("What?", "Alien", "Alien is a film.")))
    with pytest.raises(TraceStructureError):
        render_trace(trace, QUESTION)
