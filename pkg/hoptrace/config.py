"""
Run configuration: one YAML document, with `${VAR}` and `${VAR:-default}` environment
interpolation in string values, loaded into frozen dataclasses. Relative paths are resolved
against the directory of the configuration file.
"""

from dataclasses import dataclass, field, replace
import os
from pathlib import Path
import re
from typing import Any, Literal, Mapping

import yaml

from .backends import BackendConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .filtering import SelectionMode
from .mcts import MctsConfig
from .model import Dataset

_ENV_REFERENCE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate(value: Any) -> Any:
    """Expand environment references in every string of a parsed YAML tree."""
    if isinstance(value, str):
        def expand(match: re.Match) -> str:
            name, default = match.group(1), match.group(2)
            if name in os.environ:
                return os.environ[name]
            if default is not None:
                return default
            raise ConfigError(f"environment variable {name} is not set and has no default")

        return _ENV_REFERENCE.sub(expand, value)
    elif isinstance(value, Mapping):
        return {k: interpolate(v) for k, v in value.items()}
    elif isinstance(value, list):
        return [interpolate(v) for v in value]
    return value


def _section(obj: Mapping[str, Any], name: str, allowed: set[str]) -> dict[str, Any]:
    section = obj.get(name) or {}
    if not isinstance(section, Mapping):
        raise ConfigError(f"{name}: expected a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{name}: unknown settings {', '.join(sorted(unknown))}")
    return dict(section)


@dataclass(frozen=True, slots=True)
class RetrieverConfig:
    kind: Literal["memory", "remote"] = "memory"
    backend: BackendConfig = field(default_factory=BackendConfig)

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind, "backend": self.backend.to_json()}


@dataclass(frozen=True, slots=True)
class FilterConfig:
    mode: SelectionMode = SelectionMode.SP_AV_LJ
    w_redundant: float = 1.0
    w_irrelevant: float = 1.0

    def __post_init__(self) -> None:
        if self.w_redundant < 0 or self.w_irrelevant < 0:
            raise ConfigError("judge weights must be non-negative")

    def to_json(self) -> dict[str, Any]:
        return {"mode": self.mode.value, "w_redundant": self.w_redundant, "w_irrelevant": self.w_irrelevant}


@dataclass(frozen=True, slots=True)
class PathsConfig:
    output_dir: Path = Path("runs/default")
    questions: Path | None = None
    questions_kind: Dataset = Dataset.CUSTOM
    corpus: Path | None = None
    eval_dataset: Path | None = None
    eval_dataset_kind: Dataset = Dataset.CUSTOM
    templates_dir: Path | None = None

    def to_json(self) -> dict[str, Any]:
        def text(p: Path | None) -> str | None:
            return None if p is None else p.as_posix()

        return {
            "output_dir": text(self.output_dir),
            "questions": text(self.questions),
            "questions_kind": self.questions_kind.value,
            "corpus": text(self.corpus),
            "eval_dataset": text(self.eval_dataset),
            "eval_dataset_kind": self.eval_dataset_kind.value,
            "templates_dir": text(self.templates_dir),
        }


@dataclass(frozen=True, slots=True)
class RunConfig:
    mcts: MctsConfig = field(default_factory=MctsConfig)
    generator: BackendConfig = field(default_factory=BackendConfig)
    judge: BackendConfig = field(default_factory=BackendConfig)
    agent: BackendConfig = field(default_factory=BackendConfig)
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    workers: int = 4
    mock: bool = False

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")

    @property
    def max_in_flight(self) -> int:
        """Size of the one request limiter shared by every backend of a run."""
        return min(self.generator.max_concurrent_requests, self.judge.max_concurrent_requests,
                   self.agent_backend.max_concurrent_requests, self.retriever.backend.max_concurrent_requests)

    @property
    def agent_backend(self) -> BackendConfig:
        """The model under evaluation; the generator unless an `agent` endpoint is configured."""
        return self.agent if self.agent.endpoint_url else self.generator

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any] | None, base_dir: Path = Path(".")) -> "RunConfig":
        obj = interpolate(dict(obj or {}))
        unknown = set(obj) - {"mcts", "generator", "judge", "retriever", "filter", "eval", "paths", "seed", "agent",
                              "parallelism", "mock"}
        if unknown:
            raise ConfigError(f"unknown configuration sections: {', '.join(sorted(unknown))}")

        def path(value: Any) -> Path | None:
            if value in (None, ""):
                return None
            p = Path(str(value)).expanduser()
            return p if p.is_absolute() else base_dir / p

        try:
            backend_fields = set(BackendConfig.__dataclass_fields__)
            retriever = _section(obj, "retriever", {"kind", "backend"})
            if retriever.get("kind", "memory") not in ("memory", "remote"):
                raise ConfigError(f"retriever.kind must be memory or remote, got {retriever['kind']!r}")
            paths = _section(obj, "paths", set(PathsConfig.__dataclass_fields__))
            filter_section = _section(obj, "filter", {"mode", "w_redundant", "w_irrelevant"})
            parallelism = _section(obj, "parallelism", {"workers"})
            return cls(
                mcts=MctsConfig.from_json(_section(obj, "mcts", set(MctsConfig.__dataclass_fields__))),
                generator=BackendConfig.from_mapping(_section(obj, "generator", backend_fields)),
                judge=BackendConfig.from_mapping(_section(obj, "judge", backend_fields)),
                agent=BackendConfig.from_mapping(_section(obj, "agent", backend_fields)),
                retriever=RetrieverConfig(
                    kind=retriever.get("kind", "memory"),
                    backend=BackendConfig.from_mapping(retriever.get("backend")),
                ),
                filter=FilterConfig(
                    mode=SelectionMode.parse(str(filter_section.get("mode", SelectionMode.SP_AV_LJ.value))),
                    w_redundant=float(filter_section.get("w_redundant", 1.0)),
                    w_irrelevant=float(filter_section.get("w_irrelevant", 1.0)),
                ),
                eval=EvalConfig(**_section(obj, "eval", set(EvalConfig.__dataclass_fields__))),
                paths=PathsConfig(
                    output_dir=path(paths.get("output_dir")) or base_dir / "runs" / "default",
                    questions=path(paths.get("questions")),
                    questions_kind=Dataset(paths.get("questions_kind", Dataset.CUSTOM.value)),
                    corpus=path(paths.get("corpus")),
                    eval_dataset=path(paths.get("eval_dataset")),
                    eval_dataset_kind=Dataset(paths.get("eval_dataset_kind", Dataset.CUSTOM.value)),
                    templates_dir=path(paths.get("templates_dir")),
                ),
                seed=int(obj.get("seed", 0)),
                workers=int(parallelism.get("workers", 4)),
                mock=bool(obj.get("mock", False)),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_yaml(cls, path: Path) -> "RunConfig":
        if not path.exists():
            raise ConfigError(f"configuration file {path} does not exist")
        try:
            with open(path, "r", encoding="utf-8") as f:
                obj = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
        if obj is not None and not isinstance(obj, Mapping):
            raise ConfigError(f"{path}: expected a mapping at the top level")
        return cls.from_mapping(obj, base_dir=path.parent)

    def with_overrides(
            self,
            seed: int | None = None,
            mode: str | None = None,
            limit: int | None = None,
            mock: bool | None = None,
            output_dir: Path | None = None,
    ) -> "RunConfig":
        config = self
        try:
            if seed is not None:
                config = replace(config, seed=seed)
            if mode is not None:
                config = replace(config, filter=replace(config.filter, mode=SelectionMode.parse(mode)))
            if limit is not None:
                config = replace(config, eval=replace(config.eval, limit=limit))
            if mock:
                config = replace(config, mock=True)
            if output_dir is not None:
                config = replace(config, paths=replace(config.paths, output_dir=output_dir))
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return config

    def snapshot(self) -> dict[str, Any]:
        """Every setting of the run as JSON; backends contribute env-var names, never keys."""
        return {
            "mcts": self.mcts.to_json(),
            "generator": self.generator.to_json(),
            "judge": self.judge.to_json(),
            "agent": self.agent.to_json(),
            "retriever": self.retriever.to_json(),
            "filter": self.filter.to_json(),
            "eval": self.eval.to_json(),
            "paths": self.paths.to_json(),
            "seed": self.seed,
            "parallelism": {"workers": self.workers},
            "mock": self.mock,
        }

    def require(self, *names: str) -> None:
        """Raise `ConfigError` unless each named input path is configured and exists."""
        for name in names:
            value: Path | None = getattr(self.paths, name)
            if value is None:
                raise ConfigError(f"paths.{name} is not configured")
            if not value.exists():
                raise ConfigError(f"paths.{name}: {value} does not exist")
