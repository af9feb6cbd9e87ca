import csv
import json

import pytest

from conftest import INPUTS

from hoptrace.backends import Backend, BackendConfig
from hoptrace.errors import DatasetFormatError
from hoptrace.evaluation import (
    EvalConfig, EvalRecord, evaluate_dataset, load_dataset, run_inference_agent, summarize_records, write_results
)
from hoptrace.model import Dataset, Question, SubQA, Trace
from hoptrace.retrieval import InMemoryRetriever
from hoptrace.scripted import FlakyModel, ToyScriptModel

NO_RETRY = BackendConfig(max_retries=0, retry_backoff_ms=0)


@pytest.fixture(scope="module")
def toy_questions() -> dict[str, Question]:
    return {q.id: q for q in load_dataset(INPUTS / "toy_questions.jsonl", Dataset.CUSTOM)}


@pytest.fixture(scope="module")
def retriever() -> InMemoryRetriever:
    return InMemoryRetriever.from_file(INPUTS / "toy_corpus.jsonl")


@pytest.fixture
def agent() -> Backend:
    return Backend(ToyScriptModel.from_file(INPUTS / "toy_questions.jsonl"), NO_RETRY, name="agent")


def _write(tmp_path, name, content):
    path = tmp_path / name
    path.write_text(content, encoding="utf-8")
    return path


def test_two_wiki_loader_reads_evidence_answers(tmp_path):
    path = _write(tmp_path, "dev.json", json.dumps([{
        "_id": "a1", "question": "Who was born first?", "answer": "Babbage", "type": "comparison",
        "evidences": [["Ada Lovelace", "date of birth", "1815"], ["Charles Babbage", "date of birth", "1791"]],
    }]))
    [question] = load_dataset(path, Dataset.TWO_WIKI)
    assert question.gold_sub_answers == ("1815", "1791")
    assert question.question_type == "comparison"
    assert question.dataset is Dataset.TWO_WIKI


def test_musique_loader_merges_aliases(tmp_path):
    record = {
        "id": "3hop1__123_456_789", "question": "Q?", "answer": "Liffey", "answer_aliases": ["River Liffey", "Liffey"],
        "question_decomposition": [{"question": "a", "answer": "James Joyce"}, {"question": "b", "answer": "Dublin"}],
    }
    path = _write(tmp_path, "dev.jsonl", json.dumps(record) + "\n")
    [question] = load_dataset(path, "musique")
    assert question.gold_answers == ("Liffey", "River Liffey")
    assert question.gold_sub_answers == ("James Joyce", "Dublin")
    assert question.question_type == "3hop1"


def test_hotpotqa_and_webquestions_loaders(tmp_path):
    hotpot = _write(tmp_path, "hotpot.json", json.dumps([
        {"_id": "h1", "question": "Q1?", "answer": "yes", "type": "comparison"},
        {"_id": "h2", "question": "Q2?", "answer": "Paris", "type": "bridge"},
    ]))
    assert [q.question_type for q in load_dataset(hotpot, Dataset.HOTPOTQA)] == ["comparison", "bridge"]
    web = _write(tmp_path, "web.json", json.dumps([
        {"utterance": "what language do they speak in spain?",
         "targetValue": '(list (description Spanish) (description "Catalan language"))'},
        {"question": "who founded apple?", "answers": ["Steve Jobs", "Steve Wozniak"]},
    ]))
    first, second = load_dataset(web, Dataset.WEBQUESTIONS)
    assert first.gold_answers == ("Spanish", "Catalan language")
    assert first.id == "webquestions-1"
    assert second.gold_answers == ("Steve Jobs", "Steve Wozniak")


def test_loader_honours_limit_and_order(toy_questions):
    first_three = load_dataset(INPUTS / "toy_questions.jsonl", Dataset.CUSTOM, limit=3)
    assert [q.id for q in first_three] == ["toy-01", "toy-02", "toy-03"]
    assert len(toy_questions) == 12
    with pytest.raises(ValueError):
        load_dataset(INPUTS / "toy_questions.jsonl", Dataset.CUSTOM, limit=0)


@pytest.mark.parametrize("content,line", [
    ('{"id": "a", "text": "A?", "gold_answers": ["x"]}\n{broken\n', 2),
    ('{"id": "a", "text": "A?", "gold_answers": ["x"]}\n{"id": "a", "text": "B?", "gold_answers": ["y"]}\n', 2),
    ('{"id": "a", "text": "A?"}\n', 1),
    ('{"id": "a", "text": "A?", "gold_answers": []}\n', 1),
])
def test_malformed_records_name_the_line(tmp_path, content, line):
    path = _write(tmp_path, "bad.jsonl", content)
    with pytest.raises(DatasetFormatError) as raised:
        load_dataset(path, Dataset.CUSTOM)
    assert raised.value.line == line


def test_agent_rephrases_after_an_unanswered_sub_question(toy_questions, agent, retriever):
    record = run_inference_agent(toy_questions["toy-08"], agent, retriever)
    assert record.status == "answered"
    assert record.prediction == "Coventry"
    assert record.em and record.accuracy and record.f1 == 1.0
    assert record.retrievals == 2
    sub_steps = [s for s in record.trace.steps if isinstance(s, SubQA)]
    assert [s.answer_found for s in sub_steps] == [False, True]
    assert record.trace.is_complete


def test_agent_stops_at_the_step_limit(toy_questions, agent, retriever):
    record = run_inference_agent(toy_questions["toy-01"], agent, retriever, max_steps=2)
    assert record.status == "unanswered"
    assert record.steps_used == 2
    assert record.retrievals == 1
    assert (record.em, record.accuracy, record.f1) == (False, False, 0.0)


def test_agent_backend_failure_is_recorded(toy_questions, retriever):
    broken = Backend(FlakyModel(ToyScriptModel([]), failures=10 ** 6), NO_RETRY)
    record = run_inference_agent(toy_questions["toy-01"], broken, retriever)
    assert record.status == "failed"
    assert record.error
    assert record.steps_used == 0


def test_agent_on_an_unscripted_question_is_recorded_as_failed(agent, retriever):
    stray = Question(id="stray", text="Which river flows through Ellen Ripley's home town?", gold_answers=("x",))
    record = run_inference_agent(stray, agent, retriever)
    assert record.status == "failed"
    assert "no script" in record.error
    assert record.steps_used == 0


def _record(question_id: str, em: bool, accuracy: bool, f1: float, question_type: str | None,
            status: str = "answered") -> EvalRecord:
    return EvalRecord(question_id=question_id, prediction="x", trace=Trace(question_id=question_id, steps=()),
                      em=em, accuracy=accuracy, f1=f1, steps_used=0, retrievals=0, status=status,
                      question_type=question_type)


def test_summary_excludes_failed_records():
    records = [
        _record("a", True, True, 1.0, "bridge"),
        _record("b", False, True, 0.5, "bridge"),
        _record("c", False, False, 0.0, "comparison", status="unanswered"),
        _record("d", True, True, 1.0, "comparison", status="failed"),
    ]
    summary = summarize_records(records, "hotpotqa")
    assert summary.n == 3
    assert summary.failed == 1 and summary.unanswered == 1
    assert summary.em == pytest.approx(100 / 3)
    assert summary.accuracy == pytest.approx(200 / 3)
    assert summary.f1 == pytest.approx(50.0)
    assert summary.by_question_type["bridge"].em == pytest.approx(50.0)
    assert summary.by_question_type["comparison"].n == 1
    empty = summarize_records([], "custom")
    assert empty.n == 0 and empty.em is None


def test_evaluate_toy_set_and_write_results(toy_questions, agent, retriever, tmp_path):
    questions = list(toy_questions.values())
    summary, records = evaluate_dataset(questions, agent, retriever, EvalConfig(max_steps=12, top_k=3), workers=4)
    assert [r.question_id for r in records] == [q.id for q in questions]
    by_id = {r.question_id: r for r in records}
    assert by_id["toy-08"].retrievals == 2
    assert by_id["toy-01"].accuracy
    assert summary.failed == 0
    assert set(summary.by_question_type) == {"compositional", "comparison", "single_hop"}
    write_results(summary, records, tmp_path)
    lines = (tmp_path / "records.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["question_id"] for line in lines] == [q.id for q in questions]
    assert json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))["n"] == 12
    with open(tmp_path / "by_type.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["question_type", "n", "em", "accuracy", "f1"]
    assert rows[1][:2] == ["all", "12"]


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(limit=0)
    with pytest.raises(ValueError):
        EvalConfig(top_k=0)
    assert EvalConfig(limit=None).to_json()["limit"] is None
