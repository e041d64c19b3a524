"""Sequence data model: daily user records, feature scaling, window assembly.

A dataset is a directory of ``part-NNNNN.jsonl`` partition files (one JSON
object per line, one object per user), a ``calendar.jsonl`` file with one
row of event context per day, and a ``manifest.json`` describing feature
dimensions, task typing and fitted scaler parameters.  Everything in this
module is a pure function over immutable inputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PARTITION_GLOB = "part-*.jsonl"
CALENDAR_FILENAME = "calendar.jsonl"
MANIFEST_FILENAME = "manifest.json"


class ScalerKind(str, Enum):
    MIN_MAX = "min_max"
    LOG_MIN_MAX = "log_min_max"


class TaskKind(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class TaskSpec:
    """Typing of one behavioral dimension: its name, loss family and column."""

    name: str
    kind: TaskKind
    index: int
    scaler: ScalerKind = ScalerKind.MIN_MAX

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TaskKind(self.kind))
        object.__setattr__(self, "scaler", ScalerKind(self.scaler))
        if self.index < 0:
            raise ValueError(f"task {self.name!r}: index must be >= 0")


def validate_task_specs(specs: Sequence[TaskSpec], d_u: int) -> None:
    """Task indices must be a permutation of 0..d_u-1 with unique names."""
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate task names: {sorted(names)}")
    indices = sorted(s.index for s in specs)
    if indices != list(range(d_u)):
        raise ValueError(
            f"task indices {indices} are not a permutation of 0..{d_u - 1}"
        )


@dataclass(frozen=True)
class WindowConfig:
    """History/forecast window lengths, in days."""

    t_hist: int = 360
    t_fut: int = 7

    def __post_init__(self) -> None:
        if self.t_hist < 1 or self.t_fut < 1:
            raise ValueError("window lengths must be >= 1")


@dataclass(frozen=True)
class ScalerParams:
    """Fitted range of one feature.  For LOG_MIN_MAX the stored min/max live
    in log1p space."""

    kind: ScalerKind
    data_min: float
    data_max: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScalerKind(self.kind))
        if self.data_max < self.data_min:
            raise ValueError("data_max must be >= data_min")


def fit_scaler(values: Sequence[float], kind: ScalerKind | str) -> ScalerParams:
    kind = ScalerKind(kind)
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("cannot fit a scaler on empty input")
    if kind is ScalerKind.LOG_MIN_MAX:
        if np.any(arr < 0):
            raise ValueError("log_min_max requires non-negative values")
        arr = np.log1p(arr)
    return ScalerParams(kind, float(arr.min()), float(arr.max()))


def apply_scaler(values, params: ScalerParams):
    """Map values into [0, 1].  Out-of-range inputs clamp; a degenerate fitted
    range maps everything to 0."""
    scalar = np.isscalar(values)
    arr = np.asarray(values, dtype=np.float64)
    if params.kind is ScalerKind.LOG_MIN_MAX:
        arr = np.log1p(np.maximum(arr, 0.0))
    span = params.data_max - params.data_min
    if span == 0.0:
        out = np.zeros_like(arr)
    else:
        out = np.clip((arr - params.data_min) / span, 0.0, 1.0)
    return float(out) if scalar else out


def inverse_scale(scaled, params: ScalerParams):
    """Inverse of :func:`apply_scaler` on [0, 1], back to original units."""
    scalar = np.isscalar(scaled)
    arr = np.asarray(scaled, dtype=np.float64)
    span = params.data_max - params.data_min
    raw = params.data_min + arr * span
    if params.kind is ScalerKind.LOG_MIN_MAX:
        raw = np.expm1(raw)
    return float(raw) if scalar else raw


@dataclass(frozen=True)
class FeatureScalers:
    """Per-dimension scalers for user features and supply channels."""

    user: tuple[ScalerParams, ...]
    supply: tuple[ScalerParams, ...]


@dataclass
class UserRecord:
    """One user's raw history: static attributes plus a sparse map from
    day index to that day's d_u-dimensional activity vector.  A missing day
    means no activity."""

    user_id: str
    registration_day: int
    static_features: np.ndarray
    activity: dict[int, np.ndarray]

    def __post_init__(self) -> None:
        self.static_features = np.asarray(self.static_features, dtype=np.float64)
        self.activity = {int(d): np.asarray(v, dtype=np.float64) for d, v in self.activity.items()}
        widths = {v.shape for v in self.activity.values()}
        if len(widths) > 1:
            raise ValueError(f"user {self.user_id}: inconsistent activity widths {widths}")
        for day in self.activity:
            if day < self.registration_day:
                raise ValueError(
                    f"user {self.user_id}: activity on day {day} precedes "
                    f"registration day {self.registration_day}"
                )


@dataclass
class EventCalendar:
    """Event context per day, contiguous over the modeled date range."""

    context: dict[int, np.ndarray]

    def __post_init__(self) -> None:
        self.context = {int(d): np.asarray(v, dtype=np.float64) for d, v in self.context.items()}
        if self.context:
            widths = {v.shape for v in self.context.values()}
            if len(widths) > 1:
                raise ValueError(f"inconsistent context widths {widths}")
            days = sorted(self.context)
            if days != list(range(days[0], days[-1] + 1)):
                raise ValueError("calendar coverage is not contiguous")

    @property
    def first_day(self) -> int:
        return min(self.context)

    @property
    def last_day(self) -> int:
        return max(self.context)

    @property
    def d_s(self) -> int:
        return len(next(iter(self.context.values())))

    def window(self, start_day: int, end_day: int) -> np.ndarray:
        """Context rows for days start_day..end_day inclusive."""
        rows = []
        for day in range(start_day, end_day + 1):
            if day not in self.context:
                raise ValueError(f"calendar gap: day {day} not covered")
            rows.append(self.context[day])
        return np.stack(rows)


@dataclass
class TrainingSample:
    """One aligned training window.

    ``pad_mask`` marks pre-registration history positions (a prefix).
    ``activity_mask`` is True where the user was active on the target day;
    only continuous dimensions consult it in the loss.
    """

    user_hist: np.ndarray       # (t_hist, d_u) scaled
    pad_mask: np.ndarray        # (t_hist,) bool
    activity_mask: np.ndarray   # (t_fut, d_u) bool
    supply_hist: np.ndarray     # (t_hist, d_s) scaled
    supply_fut: np.ndarray      # (t_fut, d_s) scaled
    static_features: np.ndarray # (d_static,)
    targets: np.ndarray         # (t_fut, d_u) scaled
    as_of_day: int
    user_id: str = ""


def build_sample(
    record: UserRecord,
    calendar: EventCalendar,
    as_of_day: int,
    window: WindowConfig,
    scalers: FeatureScalers,
) -> TrainingSample:
    """Assemble one (history, future) window ending at ``as_of_day``.

    History days before registration are flagged in ``pad_mask`` (the model
    substitutes its learned pad vector there).  Non-pad days with no activity
    get all-zero rows.  Targets cover days as_of_day+1 .. as_of_day+t_fut.
    """
    if as_of_day < record.registration_day:
        raise ValueError(
            f"user {record.user_id}: as-of day {as_of_day} precedes "
            f"registration day {record.registration_day}; sample rejected"
        )
    d_u = len(scalers.user)
    hist_start = as_of_day - window.t_hist + 1

    supply_hist = _scale_columns(calendar.window(hist_start, as_of_day), scalers.supply)
    supply_fut = _scale_columns(
        calendar.window(as_of_day + 1, as_of_day + window.t_fut), scalers.supply
    )

    # inactive days stay exactly zero; only observed activity rows are scaled
    user_hist = np.zeros((window.t_hist, d_u), dtype=np.float64)
    hist_items = [
        (day - hist_start, row)
        for day, row in record.activity.items()
        if hist_start <= day <= as_of_day
    ]
    if hist_items:
        idx = np.array([i for i, _ in hist_items])
        user_hist[idx] = _scale_columns(np.stack([r for _, r in hist_items]), scalers.user)

    pad_mask = np.zeros(window.t_hist, dtype=bool)
    n_pad = max(0, min(window.t_hist, record.registration_day - hist_start))
    pad_mask[:n_pad] = True

    targets = np.zeros((window.t_fut, d_u), dtype=np.float64)
    activity_mask = np.zeros((window.t_fut, d_u), dtype=bool)
    fut_items = [
        (day - as_of_day - 1, row)
        for day, row in record.activity.items()
        if as_of_day < day <= as_of_day + window.t_fut
    ]
    if fut_items:
        idx = np.array([i for i, _ in fut_items])
        targets[idx] = _scale_columns(np.stack([r for _, r in fut_items]), scalers.user)
        activity_mask[idx] = True

    return TrainingSample(
        user_hist=user_hist,
        pad_mask=pad_mask,
        activity_mask=activity_mask,
        supply_hist=supply_hist,
        supply_fut=supply_fut,
        static_features=record.static_features.copy(),
        targets=targets,
        as_of_day=as_of_day,
        user_id=record.user_id,
    )


def _scale_columns(mat: np.ndarray, scalers: Sequence[ScalerParams]) -> np.ndarray:
    if mat.shape[1] != len(scalers):
        raise ValueError(f"column count {mat.shape[1]} != scaler count {len(scalers)}")
    out = np.empty_like(mat, dtype=np.float64)
    for j, p in enumerate(scalers):
        out[:, j] = apply_scaler(mat[:, j], p)
    return out


@dataclass
class SampleBatch:
    """Stacked training samples (leading batch axis on every array field)."""

    user_hist: np.ndarray
    pad_mask: np.ndarray
    activity_mask: np.ndarray
    supply_hist: np.ndarray
    supply_fut: np.ndarray
    static_features: np.ndarray
    targets: np.ndarray
    user_ids: list[str]
    as_of_days: list[int]

    def __len__(self) -> int:
        return self.user_hist.shape[0]


def collate(samples: Sequence[TrainingSample]) -> SampleBatch:
    if not samples:
        raise ValueError("cannot collate an empty batch")
    return SampleBatch(
        user_hist=np.stack([s.user_hist for s in samples]),
        pad_mask=np.stack([s.pad_mask for s in samples]),
        activity_mask=np.stack([s.activity_mask for s in samples]),
        supply_hist=np.stack([s.supply_hist for s in samples]),
        supply_fut=np.stack([s.supply_fut for s in samples]),
        static_features=np.stack([s.static_features for s in samples]),
        targets=np.stack([s.targets for s in samples]),
        user_ids=[s.user_id for s in samples],
        as_of_days=[s.as_of_day for s in samples],
    )


def mask_supply(sample: TrainingSample, mask_past: bool, mask_future: bool) -> TrainingSample:
    """Return a copy with the selected supply blocks zeroed out."""
    return dataclasses.replace(
        sample,
        supply_hist=np.zeros_like(sample.supply_hist) if mask_past else sample.supply_hist,
        supply_fut=np.zeros_like(sample.supply_fut) if mask_future else sample.supply_fut,
    )


def validate_sample(
    sample: TrainingSample, task_specs: Sequence[TaskSpec] | None = None
) -> list[str]:
    """Check sample invariants; returns violation messages (empty = valid)."""
    violations: list[str] = []
    t_hist, d_u = sample.user_hist.shape
    t_fut = sample.targets.shape[0]

    if sample.pad_mask.shape != (t_hist,):
        violations.append("pad_mask length does not match history length")
    else:
        pad = sample.pad_mask.astype(int)
        if np.any(np.diff(pad) > 0):
            violations.append("pad positions do not form a prefix of the history")

    if sample.targets.shape != (t_fut, d_u):
        violations.append("targets width does not match user history width")
    if sample.activity_mask.shape != sample.targets.shape:
        violations.append("activity_mask shape does not match targets")
    else:
        inactive = ~sample.activity_mask.any(axis=1)
        if np.any(sample.targets[inactive] != 0.0):
            violations.append("inactive future day has nonzero target row")

    if sample.supply_hist.shape[0] != t_hist:
        violations.append("supply_hist length does not match history length")
    if sample.supply_fut.shape[0] != t_fut:
        violations.append("supply_fut length does not match forecast length")

    if np.any(sample.user_hist < 0.0) or np.any(sample.user_hist > 1.0):
        violations.append("user history values outside scaled range [0, 1]")

    if task_specs is not None:
        for spec in task_specs:
            if spec.kind is TaskKind.BINARY:
                col = sample.targets[:, spec.index]
                if not np.all(np.isin(col, (0.0, 1.0))):
                    violations.append(
                        f"binary target {spec.name!r} has entries outside {{0, 1}}"
                    )
    return violations


# --------------------------------------------------------------------------
# Dataset manifest
# --------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Self-description of a generated dataset directory."""

    d_u: int
    d_s: int
    d_static: int
    task_specs: list[TaskSpec]
    scalers: FeatureScalers
    seed: int
    n_days: int

    def to_dict(self) -> dict:
        return {
            "d_u": self.d_u,
            "d_s": self.d_s,
            "d_static": self.d_static,
            "tasks": [
                {
                    "name": t.name,
                    "kind": t.kind.value,
                    "index": t.index,
                    "scaler": t.scaler.value,
                }
                for t in self.task_specs
            ],
            "user_scalers": [_scaler_to_dict(p) for p in self.scalers.user],
            "supply_scalers": [_scaler_to_dict(p) for p in self.scalers.supply],
            "seed": self.seed,
            "n_days": self.n_days,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetManifest":
        return cls(
            d_u=int(d["d_u"]),
            d_s=int(d["d_s"]),
            d_static=int(d["d_static"]),
            task_specs=[
                TaskSpec(t["name"], TaskKind(t["kind"]), int(t["index"]), ScalerKind(t["scaler"]))
                for t in d["tasks"]
            ],
            scalers=FeatureScalers(
                user=tuple(_scaler_from_dict(p) for p in d["user_scalers"]),
                supply=tuple(_scaler_from_dict(p) for p in d["supply_scalers"]),
            ),
            seed=int(d["seed"]),
            n_days=int(d["n_days"]),
        )

    def save(self, directory: Path | str) -> Path:
        path = Path(directory) / MANIFEST_FILENAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, directory: Path | str) -> "DatasetManifest":
        path = Path(directory) / MANIFEST_FILENAME
        return cls.from_dict(json.loads(path.read_text()))


def _scaler_to_dict(p: ScalerParams) -> dict:
    return {"kind": p.kind.value, "min": p.data_min, "max": p.data_max}


def _scaler_from_dict(d: Mapping) -> ScalerParams:
    return ScalerParams(ScalerKind(d["kind"]), float(d["min"]), float(d["max"]))


def fit_feature_scalers(
    records: Iterable[UserRecord],
    calendar: EventCalendar,
    task_specs: Sequence[TaskSpec],
    d_s: int,
) -> FeatureScalers:
    """Fit per-dimension scalers from training users and the calendar.

    Binary dimensions get a fixed identity (0, 1) range so their targets
    survive scaling untouched; continuous dimensions are fitted over the
    values observed on active days only.
    """
    by_index = {t.index: t for t in task_specs}
    d_u = len(task_specs)
    columns: list[list[float]] = [[] for _ in range(d_u)]
    for rec in records:
        for row in rec.activity.values():
            for j in range(d_u):
                columns[j].append(float(row[j]))

    user: list[ScalerParams] = []
    for j in range(d_u):
        spec = by_index[j]
        if spec.kind is TaskKind.BINARY:
            user.append(ScalerParams(ScalerKind.MIN_MAX, 0.0, 1.0))
        elif columns[j]:
            user.append(fit_scaler(columns[j], spec.scaler))
        else:
            user.append(ScalerParams(spec.scaler, 0.0, 0.0))

    context = np.stack([calendar.context[d] for d in sorted(calendar.context)])
    supply = tuple(fit_scaler(context[:, j], ScalerKind.MIN_MAX) for j in range(d_s))
    return FeatureScalers(user=tuple(user), supply=supply)


# --------------------------------------------------------------------------
# Partition / calendar file IO
# --------------------------------------------------------------------------

def partition_filename(index: int) -> str:
    return f"part-{index:05d}.jsonl"


def list_partition_files(directory: Path | str) -> list[Path]:
    return sorted(Path(directory).glob(PARTITION_GLOB))


def record_to_json(record: UserRecord) -> str:
    obj = {
        "user_id": record.user_id,
        "registration_day": record.registration_day,
        "static_features": [float(v) for v in record.static_features],
        "activity": {
            str(day): [float(v) for v in record.activity[day]]
            for day in sorted(record.activity)
        },
    }
    return json.dumps(obj, sort_keys=True)


def record_from_json(line: str) -> UserRecord:
    obj = json.loads(line)
    return UserRecord(
        user_id=obj["user_id"],
        registration_day=int(obj["registration_day"]),
        static_features=np.asarray(obj["static_features"], dtype=np.float64),
        activity={int(d): np.asarray(v, dtype=np.float64) for d, v in obj["activity"].items()},
    )


def write_partition_file(path: Path | str, records: Sequence[UserRecord]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def read_partition_file(path: Path | str) -> list[UserRecord]:
    with Path(path).open() as fh:
        return [record_from_json(line) for line in fh if line.strip()]


def write_calendar(directory: Path | str, calendar: EventCalendar) -> Path:
    path = Path(directory) / CALENDAR_FILENAME
    with path.open("w") as fh:
        for day in sorted(calendar.context):
            row = {"day": day, "context": [float(v) for v in calendar.context[day]]}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_calendar(directory: Path | str) -> EventCalendar:
    path = Path(directory) / CALENDAR_FILENAME
    context = {}
    with path.open() as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                context[int(obj["day"])] = np.asarray(obj["context"], dtype=np.float64)
    return EventCalendar(context)
