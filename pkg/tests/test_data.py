import math
from datetime import datetime, timedelta

import numpy as np
import pytest

from sensorcal import data
from sensorcal.data import (
    COLUMNS,
    SensorCoefficients,
    SensorRecord,
    SeriesPair,
    clean,
    load_csv,
    make_windows,
    split_by_sensor,
    synth_frames,
    synth_generate,
    window_end_indices,
)
from sensorcal.errors import DataError

T0 = datetime(2021, 3, 1)


def write_csv(path, rows):
    lines = [",".join(COLUMNS)]
    for ts, sid, x, y in rows:
        lines.append(f"{ts},{sid},{x},,,{y},,")
    path.write_text("\n".join(lines) + "\n")
    return path


def records(sid, x, y, step=1):
    return [SensorRecord(T0 + timedelta(minutes=step * i), sid, "pm10", a, b) for i, (a, b) in enumerate(zip(x, y))]


def pair(t, sid="a"):
    t = np.asarray(t, dtype=float)
    return SeriesPair(sid, "pm10", t, t * 0.5 + 1.0, t)


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        p = write_csv(tmp_path / "s.csv", [(f"2021-03-01T00:0{i}", "a", 1.5 + i, 2.0) for i in range(3)])
        recs = load_csv(p)
        assert len(recs) == 3
        assert [r.lowcost for r in recs] == [1.5, 2.5, 3.5]

    def test_empty_cell_is_invalid(self, tmp_path):
        p = write_csv(tmp_path / "s.csv", [("2021-03-01T00:00", "a", "", 2.0), ("2021-03-01T00:01", "a", "n/a", 2.0)])
        assert all(math.isnan(r.lowcost) for r in load_csv(p))

    def test_out_of_order_names_sensor(self, tmp_path):
        p = write_csv(
            tmp_path / "s.csv",
            [("2021-03-01T00:01", "a", 1, 1), ("2021-03-01T00:05", "beta", 1, 1), ("2021-03-01T00:03", "beta", 1, 1)],
        )
        with pytest.raises(DataError, match="beta"):
            load_csv(p)

    def test_duplicate_timestamp(self, tmp_path):
        p = write_csv(tmp_path / "s.csv", [("2021-03-01T00:01", "a", 1, 1), ("2021-03-01T00:01", "a", 2, 2)])
        with pytest.raises(DataError, match="duplicate"):
            load_csv(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("timestamp,sensor_id,lowcost_pm10\n2021-03-01T00:00,a,1\n")
        with pytest.raises(DataError, match="ref_pm10"):
            load_csv(p)

    def test_unknown_feature(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "nope.csv", "pm4")


class TestClean:
    def smooth(self, m=200, seed=0):
        # noise-free so the rolling-MAD rule has nothing to flag
        phase = np.random.default_rng(seed).uniform(0, 6)
        y = 20 + 5 * np.sin(np.arange(m) / 15 + phase)
        return 1.2 * y + 0.01 * y * y, y

    def test_pass_through(self):
        x, y = self.smooth()
        pairs, report = clean(records("a", x, y))
        assert len(pairs) == 1
        np.testing.assert_array_equal(pairs[0].x, x)
        np.testing.assert_array_equal(pairs[0].y, y)
        assert report.to_list() == [{"sensor_id": "a", "kept": 200, "removed": 0, "discarded": False}]

    def test_sixty_percent_invalid_discards_sensor(self):
        x, y = self.smooth(100)
        x[:60] = np.nan
        good_x, good_y = self.smooth(100, seed=1)
        pairs, report = clean(records("a", x, y) + records("b", good_x, good_y))
        assert [p.sensor_id for p in pairs] == ["b"]
        entry = report.to_list()[0]
        assert entry == {"sensor_id": "a", "kept": 40, "removed": 60, "discarded": True}

    def test_exactly_half_is_kept(self):
        x, y = self.smooth(100)
        x[::2] = -1.0
        pairs, _ = clean(records("a", x, y))
        assert len(pairs) == 1 and len(pairs[0]) == 50

    def test_spike_removed(self):
        x, y = self.smooth()
        x[100] = 10 * np.median(x[95:106])
        pairs, report = clean(records("a", x, y))
        assert len(pairs[0]) == 199
        assert 100 not in set(np.flatnonzero(np.isin(pairs[0].x, x[100])))
        assert report.to_list()[0]["removed"] == 1

    def test_physical_cap(self):
        x, y = self.smooth()
        y[7] = 1500.0
        pairs, _ = clean(records("a", x, y))
        assert len(pairs[0]) == 199 and pairs[0].y.max() < 1000

    def test_never_increases(self, rng):
        x = rng.gamma(2.0, 10.0, 300)
        y = rng.gamma(2.0, 10.0, 300)
        x[rng.integers(0, 300, 20)] = np.nan
        pairs, report = clean(records("a", x, y))
        kept = sum(len(p) for p in pairs)
        assert kept <= 300
        assert sum(e["kept"] + e["removed"] for e in report.to_list()) == 300

    def test_empty_input(self):
        pairs, report = clean([])
        assert pairs == [] and report.to_list() == []


class TestSplit:
    @pytest.mark.parametrize(
        "ids,expected",
        [("dcba", (("a", "b"), "c", "d")), ("cab", (("a",), "b", "c"))],
    )
    def test_alphabetical(self, ids, expected):
        plan = split_by_sensor([pair([0, 1], sid) for sid in ids])
        assert (plan.train, plan.validation, plan.test) == expected

    def test_two_sensors(self):
        with pytest.raises(DataError, match="3 sensors"):
            split_by_sensor([pair([0, 1], "a"), pair([0, 1], "b")])

    def test_partition(self):
        ids = [f"s{i}" for i in range(7)]
        plan = split_by_sensor([pair([0, 1], s) for s in ids])
        groups = [set(plan.train), {plan.validation}, {plan.test}]
        assert set().union(*groups) == set(ids)
        assert sum(len(g) for g in groups) == len(ids)


class TestWindows:
    def test_counting(self):
        windows = make_windows(pair(range(5)), 3)
        assert [w.t for w in windows] == [2.0, 3.0, 4.0]  # 1-based ends 3, 4, 5
        np.testing.assert_array_equal(windows[0].window, [1.0, 1.5, 2.0])
        assert windows[-1].target == 4.0

    def test_too_short(self):
        assert make_windows(pair(range(3)), 4) == []

    def test_hole_enumeration(self):
        t = np.concatenate([np.arange(10), np.arange(20, 30)])  # 10-minute hole
        n = 4
        expected = [
            i for i in range(n - 1, len(t)) if all(t[k + 1] - t[k] <= 3 * 1.0 for k in range(i - n + 1, i))
        ]
        got = window_end_indices(t, n)
        assert got.tolist() == expected
        assert 10 not in got and 12 not in got and 13 in got

    def test_small_delay_is_tolerated(self):
        t = np.array([0, 1, 2, 5, 6, 7], dtype=float)
        assert window_end_indices(t, 3).tolist() == [2, 3, 4, 5]

    def test_windows_are_finite_and_sized(self, rng):
        t = np.cumsum(rng.choice([1, 1, 1, 2, 7], size=300)).astype(float)
        for w in make_windows(pair(t), 6):
            assert w.window.shape == (6,) and np.all(np.isfinite(w.window))

    def test_granularity(self):
        assert pair([0, 2, 3, 7, 12]).granularity == 1.0
        assert pair([5, 10, 20]).granularity == 5.0

    def test_rejects_n_below_two(self):
        with pytest.raises(DataError):
            window_end_indices(np.arange(5.0), 1)


class TestSynthetic:
    def test_same_seed_same_bytes(self, tmp_path):
        a = synth_generate(3, 3, 500, tmp_path / "a.csv")
        b = synth_generate(3, 3, 500, tmp_path / "b.csv")
        assert a.read_bytes() == b.read_bytes()
        c = synth_generate(4, 3, 500, tmp_path / "c.csv")
        assert c.read_bytes() != a.read_bytes()

    def test_schema_and_ids(self, tmp_path):
        p = synth_generate(1, 4, 50, tmp_path / "s.csv")
        assert p.read_text().splitlines()[0] == ",".join(COLUMNS)
        assert {r.sensor_id for r in load_csv(p)} == {"S00", "S01", "S02", "S03"}

    def test_identity_coefficients(self, tmp_path):
        ident = SensorCoefficients(gain=1.0, curve=0.0, drift=0.0, noise=0.0)
        p = synth_generate(2, 3, 400, tmp_path / "s.csv", coefficients=ident)
        for feature in data.FEATURES:
            recs = load_csv(p, feature)
            x = np.array([r.lowcost for r in recs])
            y = np.array([r.reference for r in recs])
            assert np.sqrt(np.mean((x - y) ** 2)) == 0.0

    def test_requires_three_sensors(self, tmp_path):
        with pytest.raises(DataError):
            synth_frames(0, 2, 100)

    def test_raw_error_exceeds_least_squares_residual(self, desk_splits):
        x, y = desk_splits["test"]
        raw = np.sqrt(np.mean((x[:, -1] - y) ** 2))
        design = np.column_stack([x[:, -1], np.ones(len(y))])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        fit = np.sqrt(np.mean((design @ coef - y) ** 2))
        assert raw > 0 and raw > fit
