"""Run configuration: one JSON file feeding every CLI command.

Example::

    {
      "schema_version": 1,
      "seed": 0,
      "out": "runs/demo",
      "tasks": [{"name": "copy"}, {"name": "reverse"}],
      "model": {"n_layers": 2, "d_model": 64, "n_heads": 4, "d_ff": 256},
      "train": {"learning_rate": 0.002, "steps": 2000, "batch_size": 32},
      "attribution": {"eps": 1e-9},
      "importance": {"k": 8, "eps": 1e-12, "samples": 64, "prior_source": "single"},
      "study": {"k_fraction": 0.01, "samples": 64}
    }

``model.d_head``, ``model.vocab_size`` and ``model.max_seq_len`` are
derived when omitted and checked when given. Every task shares the root
seed; components draw from labelled substreams of it.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from lrpcl.attribution import AttributionConfig
from lrpcl.model import ModelConfig
from lrpcl.tasks import TASK_NAMES, TaskSpec, Tokenizer
from lrpcl.trainer import TrainConfig

SCHEMA_VERSION = 1

DEFAULTS: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "out": "runs/default",
    "tasks": [{"name": "copy"}, {"name": "reverse"}],
    "model": {"n_layers": 2, "d_model": 64, "n_heads": 4, "d_ff": 256, "lora_rank": None},
    "train": dict(
        {k: v for k, v in asdict(TrainConfig()).items() if k != "seed"},
        learning_rate=2e-3, steps=2000, batch_size=32,
    ),
    "attribution": asdict(AttributionConfig()),
    "importance": {"k": 8, "eps": 1e-12, "samples": 64, "prior_source": "single"},
    "study": {"k_fraction": 0.01, "samples": 64},
}

_TASK_KEYS = {"name", "alphabet_size", "min_len", "max_len", "n_train", "n_eval"}
_TASK_DEFAULTS = {"alphabet_size": 16, "min_len": 4, "max_len": 10, "n_train": 4000, "n_eval": 200}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field '{field_name}': {message}")
        self.field = field_name


@dataclass(frozen=True)
class ImportanceSettings:
    k: int = 8
    eps: float = 1e-12
    samples: int = 64
    prior_source: str = "single"


@dataclass(frozen=True)
class StudySettings:
    k_fraction: float = 0.01
    samples: int = 64


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out: Path
    tasks: List[TaskSpec]
    model: ModelConfig
    train: TrainConfig
    attribution: AttributionConfig
    importance: ImportanceSettings
    study: StudySettings
    raw: Dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def task_names(self) -> List[str]:
        return [t.name for t in self.tasks]

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError("tasks", f"task {name!r} is not configured (have {self.task_names})")

    def stage_of(self, name: str) -> int:
        """1-based position of ``name`` in the task order."""
        return self.task_names.index(self.task(name).name) + 1

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.tasks[0].alphabet_size)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(where, "unknown field")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(where, "expected an object")
            # model keys are checked by ModelConfig itself (derived fields may be given)
            out[k] = {**base[k], **v} if k == "model" else _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, section: str, values: dict, **extra):
    known = {f.name for f in fields(cls)}
    for k in values:
        if k not in known:
            raise ConfigError(f"{section}.{k}", "unknown field")
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as exc:
        name = str(exc).split(" ")[0].split(".")[-1] if "." in str(exc).split(" ")[0] else ""
        raise ConfigError(f"{section}.{name}" if name else section, str(exc)) from None


def _int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(name, f"must be >= {minimum}")
    return value


def resolve(data: Dict[str, Any], seed: Optional[int] = None, out: Optional[str] = None,
            mode: Optional[str] = None, gate: Optional[bool] = None,
            task_order: Optional[Sequence[str]] = None) -> RunConfig:
    """Validate a parsed config dict; keyword arguments override its scalars."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {data.get('schema_version')!r}")
    merged = _merge(DEFAULTS, {k: v for k, v in data.items() if k != "tasks"})
    merged["tasks"] = copy.deepcopy(data.get("tasks", DEFAULTS["tasks"]))
    if seed is not None:
        merged["seed"] = seed
    if out is not None:
        merged["out"] = out
    if mode is not None:
        merged["train"]["mode"] = mode
    if gate is not None:
        merged["train"]["gate"] = gate
    seed_v = _int(merged["seed"], "seed", 0)

    if not isinstance(merged["tasks"], list) or not merged["tasks"]:
        raise ConfigError("tasks", "expected a nonempty list")
    rows = []
    for i, t in enumerate(merged["tasks"]):
        if not isinstance(t, dict) or "name" not in t:
            raise ConfigError(f"tasks[{i}]", "each task needs a 'name'")
        for k in t:
            if k not in _TASK_KEYS:
                raise ConfigError(f"tasks[{i}].{k}", "unknown field")
        row = dict(_TASK_DEFAULTS, **t)
        if row["name"] not in TASK_NAMES:
            raise ConfigError(f"tasks[{i}].name", f"unknown task {row['name']!r}; choose from {TASK_NAMES}")
        rows.append(row)
    if task_order is not None:
        by_name = {r["name"]: r for r in rows}
        missing = [n for n in task_order if n not in by_name]
        if missing:
            raise ConfigError("task_order", f"tasks {missing} are not configured")
        rows = [by_name[n] for n in task_order]
    names = [r["name"] for r in rows]
    if len(set(names)) != len(names):
        raise ConfigError("tasks", f"duplicate task names {names}")
    merged["tasks"] = rows
    specs = []
    for i, r in enumerate(rows):
        if r["alphabet_size"] != rows[0]["alphabet_size"]:
            raise ConfigError(f"tasks[{i}].alphabet_size", "all tasks must share one alphabet")
        try:
            specs.append(TaskSpec(seed=seed_v, **r))
        except ValueError as exc:
            raise ConfigError(f"tasks[{i}]", str(exc)) from None
    tok = Tokenizer(rows[0]["alphabet_size"])

    m = dict(merged["model"])
    for k in ("n_layers", "d_model", "n_heads", "d_ff"):
        if k not in m:
            raise ConfigError(f"model.{k}", "required")
        _int(m[k], f"model.{k}", 1)
    if m["d_model"] % m["n_heads"]:
        raise ConfigError("model.n_heads", f"d_model={m['d_model']} is not divisible by n_heads={m['n_heads']}")
    d_head = m["d_model"] // m["n_heads"]
    if m.setdefault("d_head", d_head) != d_head:
        raise ConfigError("model.d_head", f"must equal d_model / n_heads = {d_head}")
    if m.setdefault("vocab_size", tok.vocab_size) != tok.vocab_size:
        raise ConfigError("model.vocab_size", f"must equal the tokenizer size {tok.vocab_size}")
    need = max(s.max_framed_len() for s in specs)
    if m.setdefault("max_seq_len", need) < need:
        raise ConfigError("model.max_seq_len", f"{m['max_seq_len']} is shorter than the longest sequence ({need})")
    m["seed"] = seed_v
    model = _build(ModelConfig, "model", m)
    merged["model"] = {k: v for k, v in m.items() if k != "seed"}

    tr = dict(merged["train"])
    tr["seed"] = seed_v
    train = _build(TrainConfig, "train", tr)
    if train.mode == "lora" and model.lora_rank is None:
        raise ConfigError("model.lora_rank", "LoRA mode needs model.lora_rank")

    attr = _build(AttributionConfig, "attribution", merged["attribution"])
    imp = _build(ImportanceSettings, "importance", merged["importance"])
    _int(imp.k, "importance.k", 1)
    _int(imp.samples, "importance.samples", 1)
    if not imp.eps > 0:
        raise ConfigError("importance.eps", "must be positive")
    if imp.prior_source not in ("single", "continual"):
        raise ConfigError("importance.prior_source", "must be 'single' or 'continual'")
    study = _build(StudySettings, "study", merged["study"])
    if not 0 < study.k_fraction <= 1:
        raise ConfigError("study.k_fraction", "must lie in (0, 1]")
    _int(study.samples, "study.samples", 1)
    if not isinstance(merged["out"], str) or not merged["out"]:
        raise ConfigError("out", "expected a nonempty path")

    return RunConfig(seed_v, Path(merged["out"]), specs, model, train, attr, imp, study, raw=merged)


def load(path, **overrides) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"{path} is not valid JSON ({exc})") from None
    return resolve(data, **overrides)
