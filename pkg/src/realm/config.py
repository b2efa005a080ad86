"""Run configuration: a strict JSON schema with every default echoed into
the resolved config, plus named seed substreams so each random component
(data generation, parameter init, batch shuffling, bootstrap) draws from
its own deterministic stream derived from one root seed."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional, get_type_hints


class ConfigError(ValueError):
    pass


def substream(root_seed: int, name: str) -> int:
    """Stable 63-bit seed for a named random stream."""
    digest = hashlib.sha256(f"{name}:{root_seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


@dataclass
class DataSection:
    path: Optional[str] = None  # load from disk when set, else generate
    n_patients: int = 200
    prevalence: float = 0.25
    t_max: int = 48
    t_min: int = 4
    obs_rate: float = 0.65
    note_rate: float = 0.85
    anomaly_weight: float = 2.4
    mention_weight: float = 2.8
    plant_probe_entities: bool = False


@dataclass
class ThresholdSection:
    eps: float = 3.0  # time-series anomaly threshold (|z|)
    eta: float = 0.85  # KG match cosine threshold
    dedupe: float = 0.9  # semantic-duplicate cosine threshold


@dataclass
class EmbedderSection:
    kind: str = "trigram"  # or "remote"
    dim: int = 256
    cache_dir: Optional[str] = None
    model_id: Optional[str] = None


@dataclass
class ExtractorSection:
    kind: str = "lexicon"  # or "remote"
    max_rounds: int = 3
    lexicon_path: Optional[str] = None


@dataclass
class ModelSection:
    hidden: int = 312
    heads: int = 4
    time_freqs: int = 8
    omega_max: float = 10000.0
    ffn_mult: int = 4
    modalities: list = field(default_factory=lambda: ["ts", "text"])
    rag_ts: bool = True
    rag_text: bool = True
    rag_injection: str = "symmetric"
    fusion: str = "attention"


@dataclass
class TrainSection:
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 5
    lr: float = 6e-4
    weight_decay: float = 0.01
    task: str = "mortality"


@dataclass
class ExperimentSection:
    n_seeds: int = 1
    bootstrap_b: int = 10
    drop_fractions: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8])
    importance_runs: int = 10


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    thresholds: ThresholdSection = field(default_factory=ThresholdSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    kg_path: Optional[str] = None  # None -> shipped toy KG
    split: list = field(default_factory=lambda: [7, 1, 2])
    seed: int = 0
    out_dir: str = "runs/run"

    # -- validation ---------------------------------------------------------

    def validate(self) -> "RunConfig":
        t = self.thresholds
        if t.eps <= 0:
            raise ConfigError(f"thresholds.eps must be positive, got {t.eps}")
        if not 0 < t.eta <= 1:
            raise ConfigError(f"thresholds.eta must be in (0, 1], got {t.eta}")
        if not 0 < t.dedupe <= 1:
            raise ConfigError(f"thresholds.dedupe must be in (0, 1], got {t.dedupe}")
        if self.embedder.kind not in ("trigram", "remote"):
            raise ConfigError(f"embedder.kind must be trigram or remote, got {self.embedder.kind!r}")
        if self.embedder.dim < 8:
            raise ConfigError(f"embedder.dim must be >= 8, got {self.embedder.dim}")
        if self.extractor.kind not in ("lexicon", "remote"):
            raise ConfigError(f"extractor.kind must be lexicon or remote, got {self.extractor.kind!r}")
        if self.extractor.max_rounds < 1:
            raise ConfigError(f"extractor.max_rounds must be >= 1, got {self.extractor.max_rounds}")
        m = self.model
        if m.hidden < 1 or m.heads < 1 or m.hidden % m.heads != 0:
            raise ConfigError(f"model.heads ({m.heads}) must divide model.hidden ({m.hidden})")
        if m.fusion not in ("attention", "add", "concat"):
            raise ConfigError(f"model.fusion must be attention/add/concat, got {m.fusion!r}")
        if m.rag_injection not in ("symmetric", "text_only"):
            raise ConfigError(f"model.rag_injection must be symmetric/text_only, got {m.rag_injection!r}")
        if not m.modalities or any(x not in ("ts", "text") for x in m.modalities):
            raise ConfigError(f"model.modalities must be a subset of ts/text, got {m.modalities}")
        tr = self.train
        if tr.batch_size < 1 or tr.max_epochs < 1 or tr.patience < 1:
            raise ConfigError("train.batch_size, max_epochs and patience must all be >= 1")
        if tr.patience > tr.max_epochs:
            raise ConfigError(f"train.patience ({tr.patience}) must be <= max_epochs ({tr.max_epochs})")
        if tr.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {tr.lr}")
        if tr.task not in ("mortality", "readmission"):
            raise ConfigError(f"train.task must be mortality or readmission, got {tr.task!r}")
        e = self.experiment
        if e.n_seeds < 1 or e.bootstrap_b < 1 or e.importance_runs < 1:
            raise ConfigError("experiment counters must all be >= 1")
        if any(not 0 <= fr < 1 for fr in e.drop_fractions):
            raise ConfigError(f"experiment.drop_fractions must be in [0, 1), got {e.drop_fractions}")
        if len(self.split) != 3 or any(r <= 0 for r in self.split):
            raise ConfigError(f"split must be three positive ratios, got {self.split}")
        d = self.data
        if d.path is None:
            if d.n_patients < 1:
                raise ConfigError(f"data.n_patients must be >= 1, got {d.n_patients}")
            if not 0 < d.prevalence < 1:
                raise ConfigError(f"data.prevalence must be in (0, 1), got {d.prevalence}")
        return self

    def seed_for(self, name: str) -> int:
        return substream(self.seed, name)

    def to_dict(self) -> dict:
        return _asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _asdict(obj: Any) -> Any:
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _asdict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, list):
        return [_asdict(v) for v in obj]
    return obj


_SECTION_TYPES = {
    "data": DataSection,
    "thresholds": ThresholdSection,
    "embedder": EmbedderSection,
    "extractor": ExtractorSection,
    "model": ModelSection,
    "train": TrainSection,
    "experiment": ExperimentSection,
}

_SCALARS = {int, float, str, bool}


def _coerce(name: str, value: Any, annotation: Any) -> Any:
    if annotation in (Optional[str], Optional[int]):
        if value is None:
            return None
        annotation = str if annotation is Optional[str] else int
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name!r}: expected a number, got {value!r}")
        return float(value)
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {name!r}: expected an integer, got {value!r}")
        return value
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {name!r}: expected a boolean, got {value!r}")
        return value
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {name!r}: expected a string, got {value!r}")
        return value
    if annotation is list:
        if not isinstance(value, list):
            raise ConfigError(f"config key {name!r}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"config key {name!r}: unsupported value {value!r}")


def _build_section(cls: type, data: dict, prefix: str) -> Any:
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config key {prefix}{sorted(unknown)[0]!r}")
    hints = get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(f"{prefix}{key}", value, hints[key])
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    top_fields = {f.name for f in fields(RunConfig)}
    unknown = set(data) - top_fields
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    hints = get_type_hints(RunConfig)
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r}: expected an object")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, f"{key}.")
        else:
            kwargs[key] = _coerce(key, value, hints[key])
    return RunConfig(**kwargs).validate()


def _set_dotted(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r} conflicts with a scalar key")
    node[parts[-1]] = value


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read a JSON config file (empty file = all defaults), apply dotted
    overrides (flags win over the file), validate, and return the fully
    resolved config."""
    tree: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8").strip()
        if text:
            try:
                tree = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(tree, dict):
                raise ConfigError(f"{path}: config root must be a JSON object")
    for dotted, value in (overrides or {}).items():
        _set_dotted(tree, dotted, value)
    return config_from_dict(tree)
