import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from realm.ehr_core import FeatureSpec, PatientRecord
from realm.ts_rag import TsRagError, extract_ts_entities, find_anomalies, reference_stats, zscore

from oracles import zscore_by_hand

TOL = 1e-6


def record_with(ts, pid="p0"):
    ts = np.asarray(ts, dtype=float)
    t = ts.shape[0]
    return PatientRecord(pid, ts, [None] * t, np.arange(t, dtype=float), 0, 0)


class TestReferenceStats:
    @pytest.mark.parametrize(
        "low,high,mean,std",
        [(0, 10, 5.0, 2.5), (70, 110, 90.0, 10.0), (-2, 2, 0.0, 1.0), (7, 20, 13.5, 3.25)],
    )
    def test_midpoint_and_quarter_width(self, low, high, mean, std):
        spec = FeatureSpec("x", low, high)
        npt.assert_allclose(reference_stats(spec), (mean, std), atol=TOL)

    def test_zero_width_range_errors(self):
        spec = FeatureSpec("flag", 1, 1, is_categorical=True)
        with pytest.raises(TsRagError, match="zero-width"):
            reference_stats(spec)


class TestZscore:
    @pytest.mark.parametrize(
        "value,mean,std,expected",
        [(10, 5, 2.5, 2.0), (5, 5, 2.5, 0.0), (12, 5, 2.5, 2.8), (60, 13.5, 3.25, 14.307692307692308)],
    )
    def test_formula(self, value, mean, std, expected):
        npt.assert_allclose(zscore(value, mean, std), expected, atol=TOL)
        npt.assert_allclose(zscore(value, mean, std), zscore_by_hand(value, mean, std), atol=TOL)

    def test_nonpositive_std_errors(self):
        with pytest.raises(TsRagError):
            zscore(1.0, 0.0, 0.0)
        with pytest.raises(TsRagError):
            zscore(1.0, 0.0, -1.0)


FEATURES = [
    FeatureSpec("blood urea nitrogen", 7, 20),
    FeatureSpec("serum sodium", 135, 145),
    FeatureSpec("gender", 0, 1, is_categorical=True),
]


class TestExtract:
    def test_all_missing_is_empty(self):
        rec = record_with(np.full((3, 3), np.nan))
        assert len(extract_ts_entities(rec, FEATURES)) == 0

    def test_bun_example(self):
        ts = np.full((4, 3), np.nan)
        ts[:, 0] = [13.0, 14.0, 60.0, 13.5]  # spike at visit 2
        ts[:, 1] = 140.0
        rec = record_with(ts)
        entities = extract_ts_entities(rec, FEATURES, eps=3.0)
        assert entities.surfaces() == ["blood urea nitrogen"]
        prov = next(iter(entities)).provenance
        assert prov.visit_index == 2
        npt.assert_allclose(prov.zscore, (60 - 13.5) / 3.25, atol=TOL)
        npt.assert_allclose(prov.zscore, 14.3077, atol=1e-4)

    def test_default_threshold_is_three_sigma(self):
        ts = np.full((1, 3), np.nan)
        ts[0, 0] = 13.5 + 2.9 * 3.25  # |z| = 2.9, below default
        assert len(extract_ts_entities(record_with(ts), FEATURES)) == 0
        ts[0, 0] = 13.5 + 3.1 * 3.25
        assert len(extract_ts_entities(record_with(ts), FEATURES)) == 1

    def test_categorical_features_skipped(self):
        ts = np.full((1, 3), np.nan)
        ts[0, 2] = 999.0
        assert len(extract_ts_entities(record_with(ts), FEATURES)) == 0

    def test_output_follows_feature_order(self):
        ts = np.full((1, 3), np.nan)
        ts[0, 1] = 135 + 10 * 2.5  # sodium, |z| = 10
        ts[0, 0] = 60.0  # bun, |z| = 14.3
        entities = extract_ts_entities(record_with(ts), FEATURES)
        assert entities.surfaces() == ["blood urea nitrogen", "serum sodium"]

    def test_direction_tracks_sign(self):
        ts = np.full((1, 3), np.nan)
        ts[0, 1] = 135 - 10 * 2.5
        (anomaly,) = find_anomalies(record_with(ts), FEATURES)
        assert anomaly.direction == "low"
        assert anomaly.zscore < -3

    def test_brute_force_scan_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            t = int(rng.integers(1, 8))
            ts = rng.normal(13.5, 6.0, size=(t, 3))
            ts[:, 1] = rng.normal(140, 10, size=t)
            ts[rng.random((t, 3)) < 0.4] = np.nan
            rec = record_with(ts)
            got = {a.feature_name: a for a in find_anomalies(rec, FEATURES, eps=3.0)}
            # oracle: exhaustive scan over every observed cell
            for j, spec in enumerate(FEATURES):
                if spec.is_categorical:
                    assert spec.name not in got
                    continue
                mean, std = (spec.ref_low + spec.ref_high) / 2, (spec.ref_high - spec.ref_low) / 4
                best, best_visit = 0.0, None
                for i in range(t):
                    if np.isnan(ts[i, j]):
                        continue
                    z = abs((ts[i, j] - mean) / std)
                    if z > best:
                        best, best_visit = z, i
                if best > 3.0:
                    assert spec.name in got
                    assert got[spec.name].visit_index == best_visit
                else:
                    assert spec.name not in got

    def test_invalid_eps(self):
        with pytest.raises(TsRagError):
            extract_ts_entities(record_with(np.zeros((1, 3))), FEATURES, eps=0.0)


class TestProperties:
    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_threshold_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        ts = rng.normal(13.5, 8.0, size=(int(rng.integers(1, 6)), 3))
        ts[rng.random(ts.shape) < 0.3] = np.nan
        rec = record_with(ts)
        loose = set(extract_ts_entities(rec, FEATURES, eps=2.0).surfaces())
        tight = set(extract_ts_entities(rec, FEATURES, eps=4.0).surfaces())
        assert tight <= loose

    @given(st.integers(0, 10_000), st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]))
    @settings(max_examples=40, deadline=None)
    def test_scale_invariance_power_of_two(self, seed, scale):
        # power-of-two rescaling is exact in floats, so the emitted set
        # must be identical, not merely close
        rng = np.random.default_rng(seed)
        ts = rng.normal(10.0, 8.0, size=(3, 1))
        spec = [FeatureSpec("f", 4.0, 16.0)]
        spec_scaled = [FeatureSpec("f", 4.0 * scale, 16.0 * scale)]
        base = extract_ts_entities(record_with(ts), spec).surfaces()
        scaled = extract_ts_entities(record_with(ts * scale), spec_scaled).surfaces()
        assert base == scaled

    def test_determinism(self):
        rng = np.random.default_rng(0)
        ts = rng.normal(13.5, 8.0, size=(4, 3))
        rec = record_with(ts)
        a = [(e.surface, e.provenance) for e in extract_ts_entities(rec, FEATURES)]
        b = [(e.surface, e.provenance) for e in extract_ts_entities(rec, FEATURES)]
        assert a == b
