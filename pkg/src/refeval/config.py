"""Run configuration: defaults, JSON loading, and the hash guarding resumes."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

# Stage -> model defaults follow the model split of the original pipeline:
# a mid-tier model for extraction and fragment extraction, a top-tier model
# for labels, question writing and verdicts.
MID_TIER = "gpt-3.5-turbo-0125"
TOP_TIER = "gpt-4-turbo-2024-04-09"

DEFAULT_MODELS = {
    "extract": MID_TIER,
    "judge_extract": MID_TIER,
    "cluster_label": TOP_TIER,
    "question_gen": TOP_TIER,
    "judge_verdict": TOP_TIER,
    "baseline": TOP_TIER,
}

DEFAULT_TEMPERATURES = {
    "extract": 0.0,
    "cluster_label": 0.0,
    "question_gen": 0.7,
    "get_response": 0.7,
    "judge_extract": 0.0,
    "judge_verdict": 0.0,
    "baseline": 0.0,
}

# Fields that cannot change a run's outcome stay out of the resume hash.
_UNHASHED = {"run_dir", "parallelism"}


@dataclass
class HttpSettings:
    base_url: str = "https://api.openai.com/v1"
    chat_path: str = "/chat/completions"
    embeddings_path: str = "/embeddings"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 60.0
    model_map: dict[str, str] = field(default_factory=dict)


@dataclass
class RunConfig:
    corpus: str = ""
    run_dir: str = "run"
    evaluated_model: str = MID_TIER
    models: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_MODELS))
    embedding_model: str = "text-embedding-3-small"
    embedding_dim: int = 64
    parallelism: int = 4
    max_chars: int = 4000
    k_max: int = 50
    k_fixed: int | None = None
    kmeans_restarts: int = 20
    units_per_question: int = 8
    ignored_threshold: int = 3
    min_delta: int = 1
    patience: int = 3
    max_rounds: int = 50
    temperatures: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TEMPERATURES))
    seed: int = 0
    backend: str = "mock"
    playbook: str | None = None
    mock_default_response: str | None = None
    http: HttpSettings = field(default_factory=HttpSettings)
    judge_extract_mode: str = "per_unit"
    max_output_tokens: int = 1024
    selection: dict | None = None
    annotations: str | None = None
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        self.models = {**DEFAULT_MODELS, **self.models}
        self.temperatures = {**DEFAULT_TEMPERATURES, **self.temperatures}
        if isinstance(self.http, dict):
            self.http = HttpSettings(**self.http)
        self.base_dir = Path(self.base_dir)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | str = ".") -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**d, base_dir=Path(base_dir))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data, path.parent)

    def validate(self) -> None:
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"backend must be 'mock' or 'http', not {self.backend!r}")
        if self.backend == "mock" and not self.playbook:
            raise ConfigError("the mock backend needs a playbook path")
        if self.judge_extract_mode not in ("per_unit", "batched"):
            raise ConfigError("judge_extract_mode must be 'per_unit' or 'batched'")
        for name in ("units_per_question", "ignored_threshold", "patience", "max_rounds", "k_max",
                     "parallelism", "embedding_dim", "kmeans_restarts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_chars < 200:
            raise ConfigError("max_chars must be >= 200")
        if self.k_fixed is not None and self.k_fixed < 1:
            raise ConfigError("k_fixed must be >= 1")
        for stage, t in self.temperatures.items():
            if not 0.0 <= t <= 1.0:
                raise ConfigError(f"temperature for {stage} outside [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def run_path(self) -> Path:
        return self.resolve(self.run_dir)

    def model_for(self, stage: str) -> str:
        stage = str(stage)
        if stage == "get_response":
            return self.evaluated_model
        if stage == "embed":
            return self.embedding_model
        return self.models[stage]

    def temperature_for(self, stage: str) -> float:
        return self.temperatures.get(str(stage), 0.0)

    def model_ids(self) -> set[str]:
        return set(self.models.values()) | {self.evaluated_model, self.embedding_model}
