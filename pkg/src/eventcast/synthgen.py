"""Synthetic event calendar and event-driven user population.

The generator exists so that every architectural claim can be exercised on
a desk: user activity truly depends on the (schedule-known) event calendar,
so a model that reads future event context has real signal to pick up, and
one that cannot see it has strictly less.  Users belong to archetypes with
different baseline engagement, event responsiveness and disengagement
hazard; once the hazard fires, a user goes permanently silent.

All randomness is counter-seeded per user, so records are bit-identical
given the config seed regardless of generation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import (
    DatasetManifest,
    EventCalendar,
    FeatureScalers,
    ScalerKind,
    TaskKind,
    TaskSpec,
    UserRecord,
    fit_feature_scalers,
    partition_filename,
    validate_task_specs,
    write_calendar,
    write_partition_file,
)

TOURNAMENT_LENGTH = 35
YEAR_LENGTH = 365


@dataclass
class GeneratorConfig:
    n_users: int = 2000
    n_days: int = 540
    d_u: int = 4
    d_s: int = 3
    d_static: int = 4
    n_event_types: int = 2
    seed: int = 0
    archetype_mix: tuple[float, ...] = (0.4, 0.3, 0.3)

    def __post_init__(self) -> None:
        self.archetype_mix = tuple(float(p) for p in self.archetype_mix)
        if abs(sum(self.archetype_mix) - 1.0) > 1e-9:
            raise ValueError("archetype_mix must sum to 1")
        if any(p < 0 for p in self.archetype_mix):
            raise ValueError("archetype_mix entries must be non-negative")
        for name in ("d_u", "d_s", "d_static"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_event_types > max(self.d_s - 1, 0):
            raise ValueError(
                "d_s must provide one presence channel per event type plus "
                "one intensity channel"
            )


@dataclass(frozen=True)
class Archetype:
    id: int
    affinity: np.ndarray      # (d_s,) responsiveness per context channel
    base_rate: float          # activity probability on event-free days
    churn_hazard: float       # per-day probability of permanent disengagement

    def __post_init__(self) -> None:
        object.__setattr__(self, "affinity", np.asarray(self.affinity, dtype=np.float64))
        if np.any(self.affinity < 0) or np.any(self.affinity > 1):
            raise ValueError("affinity entries must be in [0, 1]")
        if not (0.0 <= self.base_rate <= 1.0 and 0.0 <= self.churn_hazard <= 1.0):
            raise ValueError("rates must be probabilities")


@dataclass
class UserShell:
    user_id: str
    index: int
    registration_day: int
    archetype: Archetype
    static_features: np.ndarray


def default_task_specs(d_u: int) -> list[TaskSpec]:
    """Behavioral dimension typing used by the generator's feature synthesis."""
    specs = [TaskSpec("active", TaskKind.BINARY, 0)]
    if d_u >= 2:
        specs.append(TaskSpec("sessions", TaskKind.CONTINUOUS, 1, ScalerKind.MIN_MAX))
    if d_u >= 3:
        specs.append(TaskSpec("spend", TaskKind.CONTINUOUS, 2, ScalerKind.LOG_MIN_MAX))
    if d_u >= 4:
        specs.append(TaskSpec("deposit", TaskKind.BINARY, 3))
    for k in range(4, d_u):
        kind = ScalerKind.MIN_MAX if k % 2 == 0 else ScalerKind.LOG_MIN_MAX
        specs.append(TaskSpec(f"metric_{k}", TaskKind.CONTINUOUS, k, kind))
    validate_task_specs(specs, d_u)
    return specs


def default_archetypes(config: GeneratorConfig) -> list[Archetype]:
    """A spread of engagement profiles: steady regulars, event chasers and
    casuals; extra archetypes beyond three are drawn from the seed."""
    d_s = config.d_s
    rng = np.random.default_rng([config.seed, 11])

    def aff(presence: float, intensity: float) -> np.ndarray:
        v = np.zeros(d_s)
        n = config.n_event_types
        if n > 0:
            v[:n] = presence / n
            v[d_s - 1] = intensity
        return v

    library = [
        Archetype(0, aff(0.25, 0.10), base_rate=0.45, churn_hazard=0.0015),
        Archetype(1, aff(0.70, 0.25), base_rate=0.05, churn_hazard=0.0025),
        Archetype(2, aff(0.40, 0.15), base_rate=0.15, churn_hazard=0.006),
    ]
    archetypes = library[: len(config.archetype_mix)]
    for i in range(len(archetypes), len(config.archetype_mix)):
        archetypes.append(
            Archetype(
                i,
                aff(rng.uniform(0.1, 0.8), rng.uniform(0.0, 0.3)),
                base_rate=float(rng.uniform(0.05, 0.5)),
                churn_hazard=float(rng.uniform(0.001, 0.01)),
            )
        )
    return archetypes


def generate_calendar(config: GeneratorConfig) -> EventCalendar:
    """Deterministic event schedule over days 0..n_days-1.

    Each event type recurs on fixed weekdays and gets one annual tournament
    block of consecutive days.  Presence channels are 0/1; the final channel
    carries a continuous intensity that ramps up during tournaments.
    """
    rng = np.random.default_rng([config.seed, 12])
    context = np.zeros((config.n_days, config.d_s))
    days = np.arange(config.n_days)

    for k in range(config.n_event_types):
        weekday = (2 * k + 3) % 7
        weekly = (days % 7) == weekday
        start = (60 + k * 150) % YEAR_LENGTH
        in_year = days % YEAR_LENGTH
        tournament = (in_year >= start) & (in_year < start + TOURNAMENT_LENGTH)
        presence = weekly | tournament
        context[presence, k] = 1.0

        intensity = np.zeros(config.n_days)
        intensity[weekly] = 0.3 + 0.2 * rng.random(int(weekly.sum()))
        ramp = (in_year[tournament] - start + 1) / TOURNAMENT_LENGTH
        intensity[tournament] = np.maximum(intensity[tournament], 0.5 + 0.5 * ramp)
        context[:, config.d_s - 1] = np.maximum(context[:, config.d_s - 1], intensity)

    return EventCalendar({int(d): context[d] for d in days})


def generate_users(config: GeneratorConfig) -> list[UserShell]:
    """Archetype-assigned user shells with registration days and static
    attributes that softly encode the archetype (plus noise)."""
    archetypes = default_archetypes(config)
    rng = np.random.default_rng([config.seed, 13])
    ids = rng.choice(len(archetypes), size=config.n_users, p=list(config.archetype_mix))
    early = rng.random(config.n_users) < 0.5
    late_span = max(int(config.n_days * 0.6), 1)
    reg_days = np.where(early, 0, rng.integers(0, late_span, size=config.n_users))

    shells = []
    for i in range(config.n_users):
        arche = archetypes[int(ids[i])]
        static = rng.uniform(0.0, 1.0, size=config.d_static)
        hot = min(arche.id, config.d_static - 1)
        static[hot] = 0.8 + 0.2 * static[hot]
        shells.append(
            UserShell(
                user_id=f"u{i:06d}",
                index=i,
                registration_day=int(reg_days[i]),
                archetype=arche,
                static_features=static,
            )
        )
    return shells


def simulate_activity(
    user: UserShell, calendar: EventCalendar, config: GeneratorConfig
) -> UserRecord:
    """Roll one user's daily life: active with probability
    clamp(base_rate + affinity . context, 0, 1) until the churn hazard fires,
    then permanently silent.  Active days draw the behavioral feature vector
    (dimension 0 is the activity indicator itself)."""
    rng = np.random.default_rng([config.seed, 14, user.index])
    arche = user.archetype
    reg = user.registration_day
    days = np.arange(reg, config.n_days)
    if days.size == 0:
        return UserRecord(user.user_id, reg, user.static_features, {})

    context = calendar.window(reg, config.n_days - 1)
    drive = context @ arche.affinity
    p_active = np.clip(arche.base_rate + drive, 0.0, 1.0)
    active = rng.random(days.size) < p_active
    if arche.churn_hazard > 0:
        churn_day = reg + int(rng.geometric(arche.churn_hazard))
        active &= days < churn_day

    specs = default_task_specs(config.d_u)
    act_idx = np.nonzero(active)[0]
    feats = np.zeros((act_idx.size, config.d_u))
    drive_act = drive[act_idx]
    for spec in specs:
        j = spec.index
        if spec.name == "active":
            feats[:, j] = 1.0
        elif spec.kind is TaskKind.BINARY:
            p = np.clip(0.15 + 0.6 * drive_act, 0.0, 0.95)
            feats[:, j] = (rng.random(act_idx.size) < p).astype(float)
        else:
            scale = 1.0 + 0.5 * (j % 3)
            mean = np.log1p(scale * (arche.base_rate + 2.0 * drive_act))
            feats[:, j] = rng.lognormal(mean=mean, sigma=0.5)

    activity = {int(days[i]): feats[n] for n, i in enumerate(act_idx)}
    return UserRecord(user.user_id, reg, user.static_features, activity)


def stable_hash(user_id: str) -> int:
    digest = hashlib.md5(user_id.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def write_partitions(
    records: Sequence[UserRecord],
    directory: Path | str,
    n_partitions: int,
    manifest: DatasetManifest,
) -> DatasetManifest:
    """Hash users into partition files and write the manifest alongside.
    Empty partitions still produce (empty) files so worker sharding sees a
    stable file count."""
    if n_partitions < 1:
        raise ValueError("n_partitions must be >= 1")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    buckets: list[list[UserRecord]] = [[] for _ in range(n_partitions)]
    for rec in records:
        buckets[stable_hash(rec.user_id) % n_partitions].append(rec)
    for i, bucket in enumerate(buckets):
        bucket.sort(key=lambda r: r.user_id)
        write_partition_file(directory / partition_filename(i), bucket)
    manifest.save(directory)
    return manifest


def generate_dataset(
    config: GeneratorConfig,
    out_dir: Path | str,
    n_partitions: int = 8,
    val_fraction: float = 0.2,
) -> tuple[Path, Path]:
    """Full pipeline: calendar + population -> train/ and val/ directories.

    The split is by user hash (whole users, never sample-level), and the
    feature scalers stored in both manifests are fitted on the training
    users only.
    """
    out_dir = Path(out_dir)
    calendar = generate_calendar(config)
    shells = generate_users(config)
    records = [simulate_activity(u, calendar, config) for u in shells]

    cut = int(round(val_fraction * 1000))
    val = [r for r in records if stable_hash(r.user_id + "#split") % 1000 < cut]
    train = [r for r in records if stable_hash(r.user_id + "#split") % 1000 >= cut]

    task_specs = default_task_specs(config.d_u)
    scalers = fit_feature_scalers(train, calendar, task_specs, config.d_s)
    manifest = DatasetManifest(
        d_u=config.d_u,
        d_s=config.d_s,
        d_static=config.d_static,
        task_specs=task_specs,
        scalers=scalers,
        seed=config.seed,
        n_days=config.n_days,
    )

    train_dir, val_dir = out_dir / "train", out_dir / "val"
    for split_dir, split_records in ((train_dir, train), (val_dir, val)):
        write_partitions(split_records, split_dir, n_partitions, manifest)
        write_calendar(split_dir, calendar)
    return train_dir, val_dir
