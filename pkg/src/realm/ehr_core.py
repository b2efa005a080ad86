"""Multimodal EHR data model and synthetic cohort generation.

A patient record is a T x F lab/vitals matrix (NaN = not measured), one
optional clinical note per visit, strictly increasing visit timestamps in
hours, and binary outcome labels. The synthetic generator plants a known
signal: label probability is a logistic function of (a) how many features
were pushed beyond 3 sigma of their reference range and (b) how many
dangerous disease mentions were written into the notes, so downstream
models that recover either signal have measurably better discrimination.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MISSING = float("nan")


class EhrError(ValueError):
    """Raised on malformed records, configs, or event streams."""


@dataclass(frozen=True)
class FeatureSpec:
    """One time-series feature with its clinical reference range."""

    name: str
    ref_low: float
    ref_high: float
    unit: str = ""
    is_categorical: bool = False

    def __post_init__(self) -> None:
        if not self.is_categorical and not self.ref_low < self.ref_high:
            raise EhrError(
                f"feature {self.name!r}: ref_low must be < ref_high "
                f"(got {self.ref_low}, {self.ref_high})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(**d)


@dataclass
class PatientRecord:
    """One patient's multimodal record. ``ts`` is T x F with NaN for
    missing cells; ``notes`` holds one optional note per visit."""

    id: str
    ts: np.ndarray
    notes: list[Optional[str]]
    times: np.ndarray
    label_mortality: int
    label_readmission: int

    def __post_init__(self) -> None:
        self.ts = np.asarray(self.ts, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.ts.ndim != 2 or self.ts.shape[0] < 1:
            raise EhrError(f"patient {self.id}: ts must be a T x F matrix with T >= 1")
        t = self.ts.shape[0]
        if len(self.notes) != t or self.times.shape != (t,):
            raise EhrError(
                f"patient {self.id}: ts rows ({t}), notes ({len(self.notes)}) "
                f"and times ({self.times.shape[0]}) must agree"
            )
        if t > 1 and not np.all(np.diff(self.times) > 0):
            raise EhrError(f"patient {self.id}: times must be strictly increasing")
        for name, lab in (("mortality", self.label_mortality), ("readmission", self.label_readmission)):
            if lab not in (0, 1):
                raise EhrError(f"patient {self.id}: {name} label must be 0 or 1, got {lab!r}")

    @property
    def n_visits(self) -> int:
        return self.ts.shape[0]

    @property
    def n_features(self) -> int:
        return self.ts.shape[1]

    def label(self, task: str) -> int:
        if task == "mortality":
            return self.label_mortality
        if task == "readmission":
            return self.label_readmission
        raise EhrError(f"unknown task {task!r}")


@dataclass
class Dataset:
    """A cohort: patients plus the shared feature catalog."""

    patients: list[PatientRecord]
    features: list[FeatureSpec]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            dupe = next(n for n in names if names.count(n) > 1)
            raise EhrError(f"duplicate feature name {dupe!r}")
        f = len(self.features)
        for p in self.patients:
            if p.n_features != f:
                raise EhrError(
                    f"patient {p.id}: has {p.n_features} features, catalog has {f}"
                )

    def __len__(self) -> int:
        return len(self.patients)

    def labels(self, task: str) -> np.ndarray:
        return np.array([p.label(task) for p in self.patients], dtype=np.int64)


# ---------------------------------------------------------------------------
# Raw-event consolidation
# ---------------------------------------------------------------------------

def consolidate_segments(
    events: Sequence[tuple[float, int, float]],
    window_hours: float,
    max_records: int,
    n_features: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate raw (time, feature_index, value) events into fixed windows.

    Windows are consecutive ``window_hours`` segments anchored at the first
    event time. Within a window the last observation wins; cells with no
    observation stay NaN. Only the first ``max_records`` windows are kept,
    and windows with no events produce no row. Row timestamps are the
    window start times, which makes re-consolidating an already
    consolidated series the identity.
    """
    if not events:
        raise EhrError("no events")
    if window_hours <= 0:
        raise EhrError(f"window_hours must be positive, got {window_hours}")
    if max_records < 1:
        raise EhrError(f"max_records must be >= 1, got {max_records}")
    times = [e[0] for e in events]
    if any(b < a for a, b in zip(times, times[1:])):
        raise EhrError("events must be sorted by time")

    if n_features is None:
        n_features = max(int(e[1]) for e in events) + 1

    t0 = float(events[0][0])
    # Tiny relative slack so window-start timestamps land in their own
    # window despite float subtraction rounding.
    slack = 1e-9 * window_hours
    rows: dict[int, np.ndarray] = {}
    for t, f, v in events:
        f = int(f)
        if not 0 <= f < n_features:
            raise EhrError(f"feature index {f} out of range [0, {n_features})")
        k = int(math.floor((float(t) - t0 + slack) / window_hours))
        if k not in rows:
            if len(rows) >= max_records and k > max(rows):
                break
            rows[k] = np.full(n_features, MISSING)
        rows[k][f] = float(v)

    keys = sorted(rows)[:max_records]
    ts = np.stack([rows[k] for k in keys])
    out_times = np.array([t0 + k * window_hours for k in keys], dtype=np.float64)
    return ts, out_times


def impute_matrix(
    ts: np.ndarray, features: Sequence[FeatureSpec]
) -> tuple[np.ndarray, np.ndarray]:
    """Fill missing cells: forward-fill per column, then the reference-range
    midpoint for anything still empty. Returns (filled, observed_mask)."""
    ts = np.asarray(ts, dtype=np.float64)
    observed = ~np.isnan(ts)
    filled = ts.copy()
    for j, spec in enumerate(features):
        col = filled[:, j]
        last = None
        for i in range(col.shape[0]):
            if observed[i, j]:
                last = col[i]
            elif last is not None:
                col[i] = last
        midpoint = (spec.ref_low + spec.ref_high) / 2.0
        col[np.isnan(col)] = midpoint
    return filled, observed


# ---------------------------------------------------------------------------
# Synthetic cohort
# ---------------------------------------------------------------------------

# 17 lab/vital features plus 2 demographics (age, gender), mirrored as
# constant columns so every patient stays a single T x F matrix.
FEATURE_CATALOG: list[FeatureSpec] = [
    FeatureSpec("heart rate", 60, 100, "bpm"),
    FeatureSpec("respiratory rate", 12, 20, "breaths/min"),
    FeatureSpec("systolic blood pressure", 90, 120, "mmHg"),
    FeatureSpec("diastolic blood pressure", 60, 80, "mmHg"),
    FeatureSpec("body temperature", 36.1, 37.2, "degC"),
    FeatureSpec("oxygen saturation", 94, 100, "%"),
    FeatureSpec("blood urea nitrogen", 7, 20, "mg/dL"),
    FeatureSpec("serum creatinine", 0.6, 1.2, "mg/dL"),
    FeatureSpec("serum sodium", 135, 145, "mEq/L"),
    FeatureSpec("serum potassium", 3.5, 5.0, "mEq/L"),
    FeatureSpec("blood glucose", 70, 110, "mg/dL"),
    FeatureSpec("white blood cell count", 4.5, 11.0, "10^9/L"),
    FeatureSpec("hemoglobin", 12, 17, "g/dL"),
    FeatureSpec("platelet count", 150, 400, "10^9/L"),
    FeatureSpec("serum lactate", 0.5, 2.0, "mmol/L"),
    FeatureSpec("serum bicarbonate", 22, 28, "mEq/L"),
    FeatureSpec("total bilirubin", 0.2, 1.2, "mg/dL"),
    FeatureSpec("age", 0, 110, "years"),
    FeatureSpec("gender", 0, 1, "binary", is_categorical=True),
]

# Plausible deviation direction when a feature is planted as anomalous.
_ANOMALY_DIRECTIONS = {
    "heart rate": "high",
    "respiratory rate": "high",
    "systolic blood pressure": "low",
    "diastolic blood pressure": "low",
    "body temperature": "high",
    "oxygen saturation": "low",
    "blood urea nitrogen": "high",
    "serum creatinine": "high",
    "serum sodium": "both",
    "serum potassium": "both",
    "blood glucose": "both",
    "white blood cell count": "high",
    "hemoglobin": "low",
    "platelet count": "low",
    "serum lactate": "high",
    "serum bicarbonate": "low",
    "total bilirubin": "high",
}

# Disease mentions written into notes. The dangerous subset drives the
# planted label signal; the benign subset is distractor text.
DANGEROUS_TERMS = [
    "sepsis",
    "septic shock",
    "acute kidney injury",
    "acute respiratory distress syndrome",
    "pulmonary embolism",
    "myocardial infarction",
    "intracranial hemorrhage",
    "ventricular tachycardia",
    "acute liver failure",
    "bacterial meningitis",
    "aortic dissection",
    "cardiogenic shock",
]

BENIGN_TERMS = [
    "seasonal allergic rhinitis",
    "osteoarthritis",
    "gastroesophageal reflux disease",
    "chronic constipation",
    "eczema",
    "tension headache",
    "benign paroxysmal positional vertigo",
    "insomnia",
    "vitamin d deficiency",
    "seborrheic dermatitis",
]

# Non-disease mentions exercising the type filter of the notes pipeline.
DRUG_TERMS = ["furosemide", "metoprolol", "heparin", "vancomycin"]
PROCEDURE_TERMS = ["chest radiograph", "central line placement"]

# Probe mentions for the entity-importance experiment: neither term feeds
# the label model; the predictive one is injected iff the label is 1.
PROBE_PREDICTIVE_TERM = "fulminant myocarditis"
PROBE_INDEPENDENT_TERM = "chronic sinusitis"

_FILLER_SENTENCES = [
    "overnight course reviewed with the team.",
    "family meeting held at bedside to discuss goals of care.",
    "lines and drains intact, dressings clean and dry.",
    "tolerating diet, ambulating with assistance.",
    "repeat laboratory panel ordered for the morning.",
    "telemetry reviewed, no events recorded.",
    "physical therapy and social work following.",
    "fluid balance monitored, inputs and outputs recorded.",
]


@dataclass
class CohortConfig:
    """Knobs for the synthetic generator. ``prevalence`` sets the target
    positive fraction; the intercept of the label model is calibrated to it
    unless ``base_rate`` pins the clean-patient probability directly."""

    n_patients: int
    n_features: int = 19
    t_max: int = 48
    t_min: int = 4
    prevalence: float = 0.25
    base_rate: Optional[float] = None
    seed: int = 0
    anomaly_weight: float = 2.4
    mention_weight: float = 2.8
    obs_rate: float = 0.65
    note_rate: float = 0.85
    window_hours: float = 12.0
    plant_probe_entities: bool = False

    def validate(self) -> None:
        if self.n_patients < 1:
            raise EhrError("n_patients must be >= 1")
        if not 0 < self.prevalence < 1:
            raise EhrError(f"prevalence must be in (0, 1), got {self.prevalence}")
        if self.base_rate is not None and not 0 < self.base_rate < 1:
            raise EhrError(f"base_rate must be in (0, 1), got {self.base_rate}")
        if not 4 <= self.n_features <= len(FEATURE_CATALOG):
            raise EhrError(
                f"n_features must be in [4, {len(FEATURE_CATALOG)}], got {self.n_features}"
            )
        if not 1 <= self.t_min <= self.t_max:
            raise EhrError(f"need 1 <= t_min <= t_max, got {self.t_min}, {self.t_max}")
        if not 0 < self.obs_rate <= 1 or not 0 <= self.note_rate <= 1:
            raise EhrError("obs_rate must be in (0, 1], note_rate in [0, 1]")


def cohort_features(cfg: CohortConfig) -> list[FeatureSpec]:
    """First n_features-2 labs from the catalog plus age and gender."""
    n_labs = cfg.n_features - 2
    return FEATURE_CATALOG[:n_labs] + FEATURE_CATALOG[-2:]


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def _calibrate_intercept(signal: np.ndarray, prevalence: float) -> float:
    """Bisect the intercept so the mean label probability hits prevalence."""
    lo, hi = -30.0, 30.0
    for _ in range(80):
        mid = (lo + hi) / 2.0
        mean_p = float(np.mean(1.0 / (1.0 + np.exp(-(mid + signal)))))
        if mean_p < prevalence:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def _make_note(
    rng: np.random.Generator,
    day: int,
    age: int,
    gender: int,
    mentions: list[str],
    extras: list[str],
) -> str:
    sex = "f" if gender else "m"
    parts = [
        f"hospital day {day}. {age} yo {sex} admitted from the emergency department.",
        str(rng.choice(_FILLER_SENTENCES)),
    ]
    if mentions:
        parts.append("assessment notable for " + " and ".join(mentions) + ".")
    else:
        parts.append("no new active issues identified on this review.")
    if extras:
        parts.append("plan: continue " + ", ".join(extras) + ".")
    parts.append(str(rng.choice(_FILLER_SENTENCES)))
    parts.append("will reassess in the morning and adjust plan as needed.")
    return " ".join(parts)


def generate_synthetic_cohort(cfg: CohortConfig) -> Dataset:
    """Build a deterministic synthetic cohort with recoverable signal.

    Per patient we draw a planted-anomaly count (lab cells pushed beyond
    3 sigma of the reference range; all other cells are clipped inside
    2.5 sigma so the count is exact) and a dangerous-mention count
    (distinct terms from DANGEROUS_TERMS woven verbatim into note text).
    Both labels are Bernoulli draws from logistic models on those counts.
    The per-patient ground truth lands in ``Dataset.meta["planted"]``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    features = cohort_features(cfg)
    n_labs = len(features) - 2
    lab_specs = features[:n_labs]

    n = cfg.n_patients
    anomaly_counts = rng.choice(5, size=n, p=[0.35, 0.25, 0.20, 0.12, 0.08])
    mention_counts = rng.choice(4, size=n, p=[0.45, 0.25, 0.18, 0.12])

    signal = cfg.anomaly_weight * anomaly_counts + cfg.mention_weight * mention_counts
    if cfg.base_rate is not None:
        intercept = math.log(cfg.base_rate / (1.0 - cfg.base_rate))
    else:
        intercept = _calibrate_intercept(signal, cfg.prevalence)
    base_rate = _sigmoid(intercept)

    # Readmission shares the planted structure with its own weighting.
    re_signal = 0.8 * cfg.anomaly_weight * anomaly_counts + 1.2 * cfg.mention_weight * mention_counts
    re_intercept = _calibrate_intercept(re_signal, cfg.prevalence)

    patients: list[PatientRecord] = []
    planted: dict[str, dict] = {}
    for i in range(n):
        pid = f"p{i:05d}"
        t = int(rng.integers(cfg.t_min, min(cfg.t_max, 14) + 1))
        times = cfg.window_hours * np.arange(t) + rng.uniform(0.0, 2.0, size=t)
        times = np.sort(times)
        age = int(rng.integers(25, 96))
        gender = int(rng.integers(0, 2))

        ts = np.full((t, len(features)), MISSING)
        observed = rng.random((t, n_labs)) < cfg.obs_rate
        for j, spec in enumerate(lab_specs):
            mean = (spec.ref_low + spec.ref_high) / 2.0
            std = (spec.ref_high - spec.ref_low) / 4.0
            vals = np.clip(rng.normal(mean, std, size=t), mean - 2.5 * std, mean + 2.5 * std)
            ts[observed[:, j], j] = vals[observed[:, j]]
        ts[:, n_labs] = age
        ts[:, n_labs + 1] = gender

        k_a = int(anomaly_counts[i])
        anomalous = rng.choice(n_labs, size=k_a, replace=False)
        for j in anomalous:
            spec = lab_specs[j]
            mean = (spec.ref_low + spec.ref_high) / 2.0
            std = (spec.ref_high - spec.ref_low) / 4.0
            direction = _ANOMALY_DIRECTIONS.get(spec.name, "both")
            if direction == "both":
                direction = "high" if rng.random() < 0.5 else "low"
            sign = 1.0 if direction == "high" else -1.0
            visit = int(rng.integers(0, t))
            ts[visit, j] = mean + sign * std * rng.uniform(3.3, 6.0)

        k_m = int(mention_counts[i])
        mentions = [str(s) for s in rng.choice(DANGEROUS_TERMS, size=k_m, replace=False)]
        n_benign = int(rng.integers(0, 3))
        benign = [str(s) for s in rng.choice(BENIGN_TERMS, size=n_benign, replace=False)]

        p_mort = _sigmoid(intercept + float(signal[i]))
        p_read = _sigmoid(re_intercept + float(re_signal[i]))
        y_mort = int(rng.random() < p_mort)
        y_read = int(rng.random() < p_read)

        probe = []
        if cfg.plant_probe_entities:
            if y_mort == 1:
                probe.append(PROBE_PREDICTIVE_TERM)
            if rng.random() < 0.3:
                probe.append(PROBE_INDEPENDENT_TERM)

        notes: list[Optional[str]] = []
        has_note = rng.random(t) < cfg.note_rate
        if t > 0 and not has_note.any():
            has_note[0] = True
        note_visits = [v for v in range(t) if has_note[v]]
        # Spread disease mentions over the noted visits.
        slots: dict[int, list[str]] = {v: [] for v in note_visits}
        for term in mentions + benign + probe:
            v = note_visits[int(rng.integers(0, len(note_visits)))]
            slots[v].append(term)
        for v in range(t):
            if not has_note[v]:
                notes.append(None)
                continue
            extras = [str(s) for s in rng.choice(DRUG_TERMS, size=int(rng.integers(0, 3)), replace=False)]
            if rng.random() < 0.2:
                extras.append(str(rng.choice(PROCEDURE_TERMS)))
            notes.append(_make_note(rng, v + 1, age, gender, slots[v], extras))

        patients.append(
            PatientRecord(
                id=pid,
                ts=ts,
                notes=notes,
                times=times,
                label_mortality=y_mort,
                label_readmission=y_read,
            )
        )
        planted[pid] = {
            "anomalies": k_a,
            "mentions": k_m,
            "label_prob": p_mort,
            "readmission_prob": p_read,
        }

    meta = {
        "generator": "synthetic-v1",
        "config": asdict(cfg),
        "base_rate": base_rate,
        "planted": planted,
    }
    return Dataset(patients=patients, features=features, meta=meta)


# ---------------------------------------------------------------------------
# Splitting / sparsification
# ---------------------------------------------------------------------------

def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of n items to ratio buckets."""
    total = float(sum(ratios))
    raw = [n * r / total for r in ratios]
    sizes = [int(math.floor(x)) for x in raw]
    short = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    return sizes


def split_dataset(
    ds: Dataset, ratios: Sequence[float] = (7, 1, 2), seed: int = 0
) -> tuple[Dataset, ...]:
    """Shuffle patients and partition them by ``ratios`` (default 7:1:2).

    The partition is exact: splits are disjoint, their union is the whole
    cohort, and sizes are within one patient of proportional.
    """
    if any(r <= 0 for r in ratios):
        raise EhrError(f"ratios must be positive, got {tuple(ratios)}")
    n = len(ds.patients)
    if n < len(ratios):
        raise EhrError(f"cannot split {n} patients into {len(ratios)} parts")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    sizes = _allocate(n, ratios)
    out = []
    start = 0
    names = ("train", "val", "test")
    for i, size in enumerate(sizes):
        idx = sorted(order[start : start + size])
        start += size
        meta = dict(ds.meta)
        meta["split"] = names[i] if i < len(names) else f"part{i}"
        out.append(Dataset(patients=[ds.patients[j] for j in idx], features=ds.features, meta=meta))
    return tuple(out)


def sparsify_training_set(train: Dataset, drop_fraction: float, seed: int = 0) -> Dataset:
    """Uniformly remove floor(drop_fraction * N) patients."""
    if not 0 <= drop_fraction < 1:
        raise EhrError(f"drop_fraction must be in [0, 1), got {drop_fraction}")
    n = len(train.patients)
    n_drop = int(math.floor(drop_fraction * n))
    if n_drop == 0:
        return Dataset(patients=list(train.patients), features=train.features, meta=dict(train.meta))
    rng = np.random.default_rng(seed)
    dropped = set(rng.choice(n, size=n_drop, replace=False).tolist())
    kept = [p for i, p in enumerate(train.patients) if i not in dropped]
    meta = dict(train.meta)
    meta["drop_fraction"] = drop_fraction
    return Dataset(patients=kept, features=train.features, meta=meta)


# ---------------------------------------------------------------------------
# Disk format: features.json + patients.jsonl (+ meta.json when present)
# ---------------------------------------------------------------------------

def _cell(v: float) -> Optional[float]:
    return None if math.isnan(v) else float(v)


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "features.json").write_text(
        json.dumps([f.to_dict() for f in ds.features], indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    with open(directory / "patients.jsonl", "w", encoding="utf-8") as fh:
        for p in ds.patients:
            row = {
                "id": p.id,
                "ts": [[_cell(v) for v in row] for row in p.ts],
                "notes": p.notes,
                "times": [float(t) for t in p.times],
                "label_mortality": p.label_mortality,
                "label_readmission": p.label_readmission,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if ds.meta:
        (directory / "meta.json").write_text(
            json.dumps(ds.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    feat_path = directory / "features.json"
    pat_path = directory / "patients.jsonl"
    if not feat_path.exists() or not pat_path.exists():
        raise EhrError(f"{directory} is not a dataset directory (need features.json + patients.jsonl)")
    features = [FeatureSpec.from_dict(d) for d in json.loads(feat_path.read_text(encoding="utf-8"))]
    patients = []
    with open(pat_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            ts = np.array(
                [[MISSING if v is None else float(v) for v in r] for r in row["ts"]],
                dtype=np.float64,
            )
            patients.append(
                PatientRecord(
                    id=row["id"],
                    ts=ts,
                    notes=row["notes"],
                    times=np.array(row["times"], dtype=np.float64),
                    label_mortality=int(row["label_mortality"]),
                    label_readmission=int(row["label_readmission"]),
                )
            )
    meta_path = directory / "meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return Dataset(patients=patients, features=features, meta=meta)
