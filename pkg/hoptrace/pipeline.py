"""
The four pipeline stages. Each stage reads the previous stage's files under the run's output
directory and writes its own, so any stage can be rerun or resumed on its own.

    <output_dir>/generate/trees/<qid>.json        search tree dumps
    <output_dir>/generate/candidates/<qid>.jsonl  correct traces per question
    <output_dir>/filter/outcomes.jsonl            one FilterOutcome per question
    <output_dir>/filter/selected.jsonl            the selected trace per question
    <output_dir>/export/train.jsonl               masked training samples
    <output_dir>/eval/records.jsonl               per-question agent results

Stage functions return a process exit status: 0 on success, 1 when some questions failed.
"""

from concurrent.futures import ThreadPoolExecutor
from functools import cached_property
import json
import logging
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Sequence, TypeVar

from rich.console import Console
from rich.progress import track

from . import operation
from .backends import Backend, BackendConfig, OpenAIChatModel, RequestLimiter
from .config import RunConfig
from .errors import ConfigError, DatasetFormatError, HoptraceError
from .evaluation import evaluate_dataset, load_dataset, print_summary, write_results
from .export import export_samples, render_trace
from .filtering import FilterOutcome, SelectionMode, run_filter_pipeline, summarize_outcomes
from .mcts import dump_tree, extract_correct_traces, run_search
from .model import Question, Trace
from .policy import Policy
from .prompts import TemplateSet, default_templates
from .retrieval import InMemoryRetriever, RemoteRetriever, Retriever
from .scripted import ScriptedJudge, ToyScriptModel
from .utils.hashing import canonical_json, derive_seed, safe_filename, sha256_file

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class Run:
    """
    Everything a stage needs, built lazily from a `RunConfig` so that a stage only constructs the
    backends it uses. Any backend can be passed in explicitly instead.

    In mock mode the generator and the evaluated agent follow the hop scripts stored alongside
    the questions, the judge is rule based, and retrieval is BM25 over the configured corpus.
    """

    def __init__(
            self,
            config: RunConfig,
            generator: Backend | None = None,
            judge: Backend | None = None,
            agent: Backend | None = None,
            retriever: Retriever | None = None,
            templates: TemplateSet | None = None,
            show_progress: bool = False,
    ):
        self.config: RunConfig = config
        self.show_progress: bool = show_progress
        # explicit parts shadow the lazily built ones
        for name, value in (("generator", generator), ("judge", judge), ("agent", agent), ("retriever", retriever),
                            ("templates", templates)):
            if value is not None:
                setattr(self, name, value)

    @property
    def output_dir(self) -> Path:
        return self.config.paths.output_dir

    @cached_property
    def limiter(self) -> RequestLimiter:
        return RequestLimiter(self.config.max_in_flight)

    @cached_property
    def templates(self) -> TemplateSet:
        if self.config.paths.templates_dir is not None:
            self.config.require("templates_dir")
            return TemplateSet.from_directory(self.config.paths.templates_dir)
        return default_templates()

    @cached_property
    def _toy_model(self) -> ToyScriptModel:
        self.config.require("questions")
        return ToyScriptModel.from_file(self.config.paths.questions)

    def _backend(self, name: str, config: BackendConfig) -> Backend:
        if self.config.mock:
            model = ScriptedJudge() if name == "judge" else self._toy_model
        else:
            try:
                model = OpenAIChatModel(config)
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from e
        return Backend(model, config, limiter=self.limiter, name=name)

    @cached_property
    def generator(self) -> Backend:
        return self._backend("generator", self.config.generator)

    @cached_property
    def judge(self) -> Backend:
        return self._backend("judge", self.config.judge)

    @cached_property
    def agent(self) -> Backend:
        return self._backend("agent", self.config.agent_backend)

    @cached_property
    def retriever(self) -> Retriever:
        if self.config.mock or self.config.retriever.kind == "memory":
            self.config.require("corpus")
            return InMemoryRetriever.from_file(self.config.paths.corpus)
        try:
            return RemoteRetriever(self.config.retriever.backend, limiter=self.limiter)
        except ValueError as e:
            raise ConfigError(f"retriever: {e}") from e

    def questions(self) -> list[Question]:
        self.config.require("questions")
        return load_dataset(self.config.paths.questions, self.config.paths.questions_kind)

    def map(self, fn: Callable[[T], R], items: Sequence[T], description: str) -> list[R]:
        """`fn` over `items` on the worker pool; results keep the order of `items`."""
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            results: Iterable[R] = pool.map(fn, items)
            if self.show_progress:
                results = track(results, total=len(items), description=description)
            return list(results)

    def input_hashes(self, *names: str) -> dict[str, str]:
        hashes = {}
        for name in names:
            path: Path | None = getattr(self.config.paths, name)
            if path is not None and path.is_file():
                hashes[name] = sha256_file(path)
        return hashes

    def write_manifest(self, stage_dir: Path, inputs: dict[str, str], **extra: Any) -> None:
        """
        Everything needed to reproduce the stage: the configuration snapshot (which names API-key
        variables but never holds their values), the seed, prompt hashes and input hashes.
        There are no timestamps, so rerunning a finished stage rewrites identical bytes.
        """
        manifest = {
            "config": self.config.snapshot(),
            "seed": self.config.seed,
            "template_hashes": self.templates.hashes(),
            "inputs": inputs,
            **extra,
        }
        stage_dir.mkdir(parents=True, exist_ok=True)
        (stage_dir / "manifest.json").write_text(canonical_json(manifest, indent=2) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, objs: Iterable[Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for obj in objs:
            f.write(canonical_json(obj) + "\n")
    tmp.replace(path)


def _read_jsonl(path: Path) -> Iterable[tuple[int, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield line_number, json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"invalid JSON: {e.msg}", line=line_number, path=str(path)) from e


def tree_path(output_dir: Path, question_id: str) -> Path:
    return output_dir / "generate" / "trees" / f"{safe_filename(question_id)}.json"


def candidates_path(output_dir: Path, question_id: str) -> Path:
    return output_dir / "generate" / "candidates" / f"{safe_filename(question_id)}.jsonl"


def load_candidates(path: Path) -> list[Trace]:
    traces = []
    for line_number, obj in _read_jsonl(path):
        try:
            traces.append(Trace.from_json(obj))
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"invalid trace: {e}", line=line_number, path=str(path)) from e
    return traces


type GenerateStatus = Literal["generated", "skipped", "failed"]


@operation(module="pipeline-cli")
def cmd_generate(run: Run, force: bool = False) -> int:
    """
    Search every question and keep its correct traces. A question whose tree dump already exists
    is skipped unless `force` is set; the tree is written last, so an interrupted question is
    searched again on the next run.
    """
    config = run.config
    questions = run.questions()
    policy = Policy(run.generator, run.retriever, templates=run.templates)
    output_dir = run.output_dir

    def generate(question: Question) -> GenerateStatus:
        tree_file = tree_path(output_dir, question.id)
        if tree_file.exists() and not force:
            logger.debug("%s: tree exists, skipping", question.id)
            return "skipped"
        try:
            tree = run_search(question, config.mcts, policy, derive_seed(config.seed, question.id))
        except HoptraceError as e:
            logger.error("%s: search failed: %s", question.id, e)
            return "failed"
        traces = extract_correct_traces(tree)
        _write_jsonl(candidates_path(output_dir, question.id), (t.to_json() for t in traces))
        tree_file.parent.mkdir(parents=True, exist_ok=True)
        tree_file.write_text(dump_tree(tree), encoding="utf-8")
        if not traces:
            logger.warning("%s: no correct trace found", question.id)
        return "generated"

    statuses = run.map(generate, questions, "Generating...")
    counts = {s: statuses.count(s) for s in ("generated", "skipped", "failed")}
    logger.info("generate: %(generated)d generated, %(skipped)d skipped, %(failed)d failed", counts)

    # the manifest describes what is on disk, not what this invocation did
    trees, with_traces, missing = 0, 0, []
    for question in questions:
        if not tree_path(output_dir, question.id).exists():
            missing.append(question.id)
            continue
        trees += 1
        if load_candidates(candidates_path(output_dir, question.id)):
            with_traces += 1
    run.write_manifest(output_dir / "generate", run.input_hashes("questions", "corpus"),
                       questions=len(questions), trees=trees, questions_with_correct_traces=with_traces,
                       missing=missing)
    return 1 if counts["failed"] else 0


@operation(module="pipeline-cli")
def cmd_filter(run: Run) -> int:
    """Select at most one trace per question under the configured mode."""
    config = run.config
    mode = config.filter.mode
    candidates_dir = run.output_dir / "generate" / "candidates"
    if not candidates_dir.is_dir():
        raise ConfigError(f"no candidates under {candidates_dir}; run the generate stage first")
    questions = run.questions()
    present = [q for q in questions if candidates_path(run.output_dir, q.id).exists()]
    missing = [q.id for q in questions if q not in present]
    for question_id in missing:
        logger.warning("%s: no candidate traces on disk", question_id)
    judge = run.judge if mode is SelectionMode.SP_AV_LJ else None
    stage_dir = run.output_dir / "filter"

    def select(question: Question) -> FilterOutcome:
        return run_filter_pipeline(
            load_candidates(candidates_path(run.output_dir, question.id)),
            question,
            mode,
            judge=judge,
            w_redundant=config.filter.w_redundant,
            w_irrelevant=config.filter.w_irrelevant,
            templates=run.templates,
            transcript_dir=stage_dir / "judge",
            workers=config.workers,
        )

    outcomes = run.map(select, present, "Filtering...")
    _write_jsonl(stage_dir / "outcomes.jsonl", (o.to_json() for o in outcomes))
    _write_jsonl(stage_dir / "selected.jsonl", (o.selected.to_json() for o in outcomes if o.selected is not None))
    summary = summarize_outcomes(outcomes) | {"selection_mode": mode.value, "missing_candidates": missing}
    (stage_dir / "summary.json").write_text(canonical_json(summary, indent=2) + "\n", encoding="utf-8")
    run.write_manifest(stage_dir, run.input_hashes("questions"), selection_mode=mode.value)
    logger.info("filter (%s): %d of %d questions have a selected trace", mode.value, summary["selected"],
                len(questions))
    return 1 if summary["failed"] or missing else 0


@operation(module="pipeline-cli")
def cmd_export(run: Run) -> int:
    """Render every selected trace; any invalid trace aborts the export before anything is written."""
    selected_file = run.output_dir / "filter" / "selected.jsonl"
    if not selected_file.exists():
        raise ConfigError(f"{selected_file} does not exist; run the filter stage first")
    questions = {q.id: q for q in run.questions()}
    samples = []
    exported: set[str] = set()
    for line_number, obj in _read_jsonl(selected_file):
        question_id = obj.get("question_id") if isinstance(obj, dict) else None
        question_id = question_id or f"line {line_number}"
        try:
            trace = Trace.from_json(obj)
            if trace.question_id not in questions:
                raise ValueError("unknown question")
            if trace.question_id in exported:
                raise ValueError("more than one selected trace for this question")
            exported.add(trace.question_id)
            samples.append(render_trace(trace, questions[trace.question_id]))
        except (KeyError, TypeError, ValueError) as e:
            logger.error("%s: cannot export its selected trace: %s", question_id, e)
            return 1
    export_samples(samples, run.output_dir / "export" / "train.jsonl", template_hashes=run.templates.hashes(),
                   config_snapshot=run.config.snapshot())
    return 0


@operation(module="pipeline-cli")
def cmd_eval(run: Run, console: Console | None = None) -> int:
    """Run the iterative-retrieval agent over the first `eval.limit` questions of the dataset."""
    config = run.config
    config.require("eval_dataset")
    questions = load_dataset(config.paths.eval_dataset, config.paths.eval_dataset_kind, limit=config.eval.limit)
    summary, records = evaluate_dataset(questions, run.agent, run.retriever, config=config.eval,
                                        templates=run.templates, workers=config.workers,
                                        show_progress=run.show_progress)
    stage_dir = run.output_dir / "eval"
    write_results(summary, records, stage_dir)
    run.write_manifest(stage_dir, run.input_hashes("eval_dataset", "corpus"), records=len(records))
    print_summary(summary, console)
    return 1 if summary.failed else 0
