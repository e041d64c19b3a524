"""Generator properties: determinism, registration/churn discipline, event
lift, archetype mix, and partition layout."""

import numpy as np
import pytest

from eventcast.datamodel import DatasetManifest, read_partition_file
from eventcast.synthgen import (
    Archetype,
    GeneratorConfig,
    UserShell,
    default_task_specs,
    generate_calendar,
    generate_dataset,
    generate_users,
    simulate_activity,
    stable_hash,
    write_partitions,
)


def small_config(**overrides) -> GeneratorConfig:
    base = dict(n_users=50, n_days=120, d_u=4, d_s=3, d_static=4,
                n_event_types=2, seed=1)
    base.update(overrides)
    return GeneratorConfig(**base)


class TestCalendar:
    def test_deterministic(self):
        a = generate_calendar(small_config())
        b = generate_calendar(small_config())
        assert sorted(a.context) == sorted(b.context)
        for d in a.context:
            np.testing.assert_array_equal(a.context[d], b.context[d])

    def test_zero_event_types_all_zero(self):
        cal = generate_calendar(small_config(n_event_types=0, d_s=2))
        total = sum(np.abs(v).sum() for v in cal.context.values())
        assert total == 0.0

    def test_tournament_block_nonzero_on_channel_zero(self):
        cal = generate_calendar(small_config())
        block = [cal.context[d][0] for d in range(60, 95)]
        assert all(v == 1.0 for v in block)

    def test_weekly_cadence_present(self):
        cal = generate_calendar(small_config(n_days=40))
        ch0 = np.array([cal.context[d][0] for d in range(40)])
        weekly = np.nonzero(ch0)[0]
        assert len(weekly) >= 5
        assert set(np.diff(weekly[:4])) == {7}

    def test_intensity_channel_continuous_and_bounded(self):
        cfg = small_config()
        cal = generate_calendar(cfg)
        intensity = np.array([cal.context[d][cfg.d_s - 1] for d in range(cfg.n_days)])
        assert intensity.max() <= 1.0 and intensity.min() >= 0.0
        assert len(np.unique(intensity[intensity > 0])) > 2

    def test_coverage_matches_n_days(self):
        cfg = small_config(n_days=77)
        cal = generate_calendar(cfg)
        assert cal.first_day == 0 and cal.last_day == 76


class TestUsers:
    def test_single_archetype_mix(self):
        users = generate_users(small_config(archetype_mix=(1.0,)))
        assert all(u.archetype.id == 0 for u in users)

    def test_zero_users(self):
        assert generate_users(small_config(n_users=0)) == []

    def test_mix_frequencies_within_3_sigma(self):
        cfg = small_config(n_users=10000, archetype_mix=(0.5, 0.5))
        users = generate_users(cfg)
        counts = np.bincount([u.archetype.id for u in users], minlength=2)
        assert 4700 <= counts[0] <= 5300
        assert 4700 <= counts[1] <= 5300

    def test_deterministic(self):
        a = generate_users(small_config())
        b = generate_users(small_config())
        for ua, ub in zip(a, b):
            assert ua.user_id == ub.user_id
            assert ua.registration_day == ub.registration_day
            assert ua.archetype.id == ub.archetype.id
            np.testing.assert_array_equal(ua.static_features, ub.static_features)

    def test_registration_days_in_range(self):
        cfg = small_config(n_users=500)
        users = generate_users(cfg)
        regs = np.array([u.registration_day for u in users])
        assert regs.min() >= 0 and regs.max() < cfg.n_days
        assert (regs == 0).sum() > 100  # a solid block of full-history users


def shell(archetype: Archetype, cfg: GeneratorConfig, index=0, reg=0) -> UserShell:
    return UserShell(f"x{index:06d}", index, reg, archetype,
                     np.full(cfg.d_static, 0.5))


class TestSimulateActivity:
    def test_certain_churn_allows_at_most_registration_day(self):
        cfg = small_config()
        cal = generate_calendar(cfg)
        arche = Archetype(0, np.zeros(cfg.d_s), base_rate=1.0, churn_hazard=1.0)
        for idx in range(20):
            rec = simulate_activity(shell(arche, cfg, idx, reg=5), cal, cfg)
            assert set(rec.activity) <= {5}

    def test_always_active_without_churn(self):
        cfg = small_config()
        cal = generate_calendar(cfg)
        arche = Archetype(0, np.zeros(cfg.d_s), base_rate=1.0, churn_hazard=0.0)
        rec = simulate_activity(shell(arche, cfg, 3, reg=10), cal, cfg)
        assert sorted(rec.activity) == list(range(10, cfg.n_days))

    def test_no_activity_before_registration(self):
        cfg = small_config()
        cal = generate_calendar(cfg)
        users = generate_users(cfg)
        for u in users[:20]:
            rec = simulate_activity(u, cal, cfg)
            assert all(d >= u.registration_day for d in rec.activity)

    def test_post_churn_silence(self):
        cfg = small_config(n_days=400)
        cal = generate_calendar(cfg)
        arche = Archetype(0, np.zeros(cfg.d_s), base_rate=1.0, churn_hazard=0.05)
        for idx in range(30):
            rec = simulate_activity(shell(arche, cfg, idx), cal, cfg)
            days = sorted(rec.activity)
            # base_rate 1 means active every day until churn: contiguous block
            assert days == list(range(days[0], days[-1] + 1))
            assert days[-1] < cfg.n_days - 1 or len(days) == cfg.n_days

    def test_event_affinity_lifts_event_day_activity(self):
        cfg = small_config(n_users=0, n_days=200)
        cal = generate_calendar(cfg)
        event_days = np.array([
            d for d in range(cfg.n_days) if cal.context[d][: cfg.n_event_types].any()
        ])
        responsive = Archetype(0, np.ones(cfg.d_s), base_rate=0.1, churn_hazard=0.0)
        indifferent = Archetype(1, np.zeros(cfg.d_s), base_rate=0.1, churn_hazard=0.0)

        def event_day_rate(arche, offset):
            hits = total = 0
            for idx in range(1000):
                rec = simulate_activity(shell(arche, cfg, idx + offset), cal, cfg)
                hits += sum(1 for d in event_days if int(d) in rec.activity)
                total += len(event_days)
            return hits / total

        r1 = event_day_rate(responsive, 0)
        r0 = event_day_rate(indifferent, 50_000)
        # r0 is binomial around 0.1; 3 sigma over ~50k trials is tiny
        sigma = np.sqrt(0.1 * 0.9 / (1000 * len(event_days)))
        assert r1 > r0 + 3 * sigma

    def test_feature_vector_layout(self):
        cfg = small_config()
        cal = generate_calendar(cfg)
        arche = Archetype(0, np.full(cfg.d_s, 0.3), base_rate=0.5, churn_hazard=0.0)
        rec = simulate_activity(shell(arche, cfg, 7), cal, cfg)
        specs = default_task_specs(cfg.d_u)
        for vec in rec.activity.values():
            assert vec[0] == 1.0
            assert vec[3] in (0.0, 1.0)      # second binary dim
            assert vec[1] >= 0 and vec[2] >= 0
        assert {s.name for s in specs} == {"active", "sessions", "spend", "deposit"}

    def test_bit_identical_under_seed(self):
        cfg = small_config()
        cal = generate_calendar(cfg)
        users = generate_users(cfg)
        a = simulate_activity(users[3], cal, cfg)
        b = simulate_activity(users[3], cal, cfg)
        assert sorted(a.activity) == sorted(b.activity)
        for d in a.activity:
            np.testing.assert_array_equal(a.activity[d], b.activity[d])


class TestWritePartitions:
    def _records(self, cfg):
        cal = generate_calendar(cfg)
        return [simulate_activity(u, cal, cfg) for u in generate_users(cfg)]

    def _manifest(self, cfg):
        from eventcast.datamodel import fit_feature_scalers
        cal = generate_calendar(cfg)
        specs = default_task_specs(cfg.d_u)
        records = self._records(cfg)
        scalers = fit_feature_scalers(records, cal, specs, cfg.d_s)
        return DatasetManifest(cfg.d_u, cfg.d_s, cfg.d_static, specs, scalers,
                               cfg.seed, cfg.n_days)

    def test_single_partition_holds_everyone(self, tmp_path):
        cfg = small_config()
        records = self._records(cfg)
        write_partitions(records, tmp_path, 1, self._manifest(cfg))
        back = read_partition_file(tmp_path / "part-00000.jsonl")
        assert {r.user_id for r in back} == {r.user_id for r in records}

    def test_partitions_disjoint_and_cover(self, tmp_path):
        cfg = small_config(n_users=200)
        records = self._records(cfg)
        write_partitions(records, tmp_path, 5, self._manifest(cfg))
        seen: list[str] = []
        for i in range(5):
            part = read_partition_file(tmp_path / f"part-{i:05d}.jsonl")
            seen.extend(r.user_id for r in part)
        assert len(seen) == len(set(seen)) == 200
        assert set(seen) == {r.user_id for r in records}

    def test_byte_identical_rewrites(self, tmp_path):
        cfg = small_config()
        records = self._records(cfg)
        m = self._manifest(cfg)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        write_partitions(records, d1, 3, m)
        write_partitions(records, d2, 3, m)
        for i in range(3):
            f1 = (d1 / f"part-{i:05d}.jsonl").read_bytes()
            f2 = (d2 / f"part-{i:05d}.jsonl").read_bytes()
            assert f1 == f2

    def test_manifest_round_trip(self, tmp_path):
        cfg = small_config()
        m = self._manifest(cfg)
        write_partitions(self._records(cfg), tmp_path, 2, m)
        loaded = DatasetManifest.load(tmp_path)
        assert loaded.d_u == cfg.d_u
        assert [t.name for t in loaded.task_specs] == [t.name for t in m.task_specs]
        assert loaded.scalers.user[2].kind.value == "log_min_max"


class TestGenerateDataset:
    def test_split_directories_and_manifest(self, tmp_path):
        cfg = small_config(n_users=300)
        train_dir, val_dir = generate_dataset(cfg, tmp_path, n_partitions=4, val_fraction=0.2)
        train_users = set()
        for p in sorted(train_dir.glob("part-*.jsonl")):
            train_users |= {r.user_id for r in read_partition_file(p)}
        val_users = set()
        for p in sorted(val_dir.glob("part-*.jsonl")):
            val_users |= {r.user_id for r in read_partition_file(p)}
        assert not (train_users & val_users)
        assert len(train_users) + len(val_users) == 300
        assert 0.1 < len(val_users) / 300 < 0.3
        assert (train_dir / "manifest.json").exists()
        assert (val_dir / "calendar.jsonl").exists()

    def test_stable_hash_is_stable(self):
        assert stable_hash("u000042") == stable_hash("u000042")
        assert stable_hash("a") != stable_hash("b")
