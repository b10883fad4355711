import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htgquant.trace_io import (
    CalibrationTrace,
    CorruptBlobError,
    ManifestMismatchError,
    SyntheticSpec,
    TraceFormatError,
    TruncatedBlobError,
    UnsupportedVersionError,
    channel_offsets,
    drift_factor,
    generate_trace,
    load_trace,
    outlier_layout,
    save_trace,
    summarize,
)


def two_layers(seed=0):
    a = generate_trace(SyntheticSpec(channels=6, tokens=4, samples=2, timesteps=5, seed=seed, layer_id="a.in"))
    b = summarize(generate_trace(SyntheticSpec(channels=3, tokens=2, samples=1, timesteps=5, seed=seed, layer_id="b.in")))
    return {"a.in": a, "b.in": b}


def tree_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


class TestGenerator:
    def test_deterministic(self):
        spec = SyntheticSpec(channels=8, tokens=4, samples=3, timesteps=6, seed=7)
        assert generate_trace(spec).data.tobytes() == generate_trace(spec).data.tobytes()
        other = generate_trace(SyntheticSpec(channels=8, tokens=4, samples=3, timesteps=6, seed=8))
        assert other.data.tobytes() != generate_trace(spec).data.tobytes()

    def test_noise_seed_keeps_outlier_channels(self):
        a = SyntheticSpec(channels=40, seed=3)
        b = SyntheticSpec(channels=40, seed=3, noise_seed=99)
        np.testing.assert_array_equal(outlier_layout(a)[0], outlier_layout(b)[0])
        assert generate_trace(a).data.tobytes() != generate_trace(b).data.tobytes()

    def test_no_outliers_channels_look_alike(self):
        spec = SyntheticSpec(channels=32, tokens=16, samples=8, timesteps=3, outlier_channel_fraction=0.0, seed=1)
        x = generate_trace(spec).data.astype(np.float64).reshape(-1, 32)
        n = x.shape[0]
        # two-sided bounds on every channel mean and std at ~5 sigma
        assert np.all(np.abs(x.mean(axis=0)) < 5 / math.sqrt(n))
        assert np.all(np.abs(x.std(axis=0) - 1.0) < 5 / math.sqrt(2 * n))

    def test_outlier_count(self):
        spec = SyntheticSpec(channels=64, outlier_channel_fraction=0.05)
        assert len(outlier_layout(spec)[0]) == 3
        assert len(outlier_layout(SyntheticSpec(channels=64, outlier_channel_fraction=1.0))[0]) == 64

    def test_constant_profile_is_stable_over_t(self):
        spec = SyntheticSpec(channels=16, tokens=16, samples=8, timesteps=10, drift_profile="constant", seed=2)
        tr = generate_trace(spec)
        n = spec.rows
        off = channel_offsets(spec, 1)
        means = tr.data.astype(np.float64).mean(axis=1)
        assert np.all(np.abs(means - off) < 5 * spec.base_std / math.sqrt(n))
        for t in range(1, 11):
            np.testing.assert_array_equal(channel_offsets(spec, t), off)

    def test_linear_decay(self):
        assert drift_factor("linear_decay", 100, 100) == 1.0
        assert drift_factor("linear_decay", 1, 100) == pytest.approx(0.3)
        vals = [drift_factor("linear_decay", t, 100) for t in range(1, 101)]
        assert np.all(np.diff(vals) > 0)

    def test_sign_flip_at_end(self):
        assert drift_factor("sign_flip_at_end", 1, 100) == pytest.approx(-0.3)
        assert drift_factor("sign_flip_at_end", 2, 100) > 0
        spec = SyntheticSpec(channels=20, tokens=16, samples=4, timesteps=10, outlier_channel_fraction=0.1)
        idx, signs = outlier_layout(spec)
        means = generate_trace(spec).data.astype(np.float64).mean(axis=1)
        assert np.all(np.sign(means[-1, idx]) == signs)
        assert np.all(np.sign(means[0, idx]) == -signs)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(outlier_channel_fraction=1.5),
            dict(outlier_magnitude=0.0),
            dict(drift_profile="cosine"),
            dict(channels=0),
            dict(base_std=-1.0),
        ],
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            generate_trace(SyntheticSpec(**kw))


class TestSummaries:
    def test_matches_column_extrema(self):
        tr = generate_trace(SyntheticSpec(channels=5, tokens=3, samples=2, timesteps=4, seed=4))
        s = summarize(tr)
        for t in range(1, 5):
            rec = tr.record(t)
            got = s.summary(t)
            np.testing.assert_array_equal(got.col_min, rec.min(axis=0))
            np.testing.assert_array_equal(got.col_max, rec.max(axis=0))
            np.testing.assert_array_equal(got.abs_max, np.maximum(np.abs(got.col_min), np.abs(got.col_max)))
            full = tr.summary(t)
            np.testing.assert_array_equal(full.col_max, got.col_max)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_abs_max(self, seed):
        x = np.random.default_rng(seed).normal(size=(2, 5, 3)) * 10
        s = summarize(CalibrationTrace("x", "full", x))
        lo, hi, am = s.data[:, 0], s.data[:, 1], s.data[:, 2]
        np.testing.assert_array_equal(am, np.maximum(np.abs(lo), np.abs(hi)))
        np.testing.assert_array_equal(am, np.abs(x.astype(np.float32)).max(axis=1))

    def test_summary_has_no_records(self):
        s = summarize(two_layers()["a.in"])
        with pytest.raises(ValueError):
            s.record(1)

    def test_timestep_bounds(self):
        tr = two_layers()["a.in"]
        for t in (0, 6):
            with pytest.raises(ValueError):
                tr.summary(t)

    def test_rejects_bad_records(self):
        with pytest.raises(ValueError):
            CalibrationTrace("x", "full", np.array([[[np.nan]]]))
        with pytest.raises(ValueError):
            CalibrationTrace("x", "summary", np.zeros((2, 2, 3)))
        with pytest.raises(ValueError):
            CalibrationTrace("x", "sparse", np.zeros((2, 2, 3)))


class TestPersistence:
    def test_round_trip_bytes(self, tmp_path):
        traces = two_layers()
        save_trace(traces, tmp_path / "a", metadata={"note": "x"})
        loaded = load_trace(tmp_path / "a")
        assert set(loaded) == {"a.in", "b.in"}
        for k, tr in traces.items():
            assert loaded[k].kind == tr.kind
            assert loaded[k].data.tobytes() == tr.data.tobytes()
        save_trace(loaded, tmp_path / "b", metadata={"note": "x"})
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_little_endian_layout(self, tmp_path):
        x = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
        save_trace(CalibrationTrace("l", "full", x), tmp_path)
        raw = (tmp_path / "l.bin").read_bytes()
        assert raw == x.astype("<f4").tobytes()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["layers"][0]["offsets"] == [0, 24]

    def test_summary_only_round_trip(self, tmp_path):
        s = summarize(two_layers()["a.in"])
        save_trace({"a.in": s}, tmp_path)
        assert [p.name for p in tmp_path.iterdir() if p.suffix == ".bin"] == ["a.in.bin"]
        loaded = load_trace(tmp_path)["a.in"]
        assert loaded.kind == "summary"
        np.testing.assert_array_equal(loaded.data, s.data)

    def test_corrupt_byte_names_layer(self, tmp_path):
        save_trace(two_layers(), tmp_path)
        blob = tmp_path / "b.in.bin"
        raw = bytearray(blob.read_bytes())
        raw[17] ^= 0x40
        blob.write_bytes(bytes(raw))
        with pytest.raises(CorruptBlobError, match="b.in"):
            load_trace(tmp_path)

    def test_truncated(self, tmp_path):
        save_trace(two_layers(), tmp_path)
        blob = tmp_path / "a.in.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(TruncatedBlobError, match="a.in"):
            load_trace(tmp_path)

    def test_unknown_version(self, tmp_path):
        save_trace(two_layers(), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["schema"] = "htg-trace/9"
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(UnsupportedVersionError):
            load_trace(tmp_path)

    def test_manifest_mismatch(self, tmp_path):
        save_trace(two_layers(), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["layers"][0]["cols"] += 1
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ManifestMismatchError):
            load_trace(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(TraceFormatError):
            load_trace(tmp_path)

    def test_distinct_error_types(self):
        kinds = {CorruptBlobError, TruncatedBlobError, UnsupportedVersionError, ManifestMismatchError}
        assert len(kinds) == 4
        assert all(issubclass(k, TraceFormatError) for k in kinds)

    def test_mixed_timesteps_rejected(self, tmp_path):
        a = two_layers()["a.in"]
        b = CalibrationTrace("b", "full", np.zeros((3, 1, 1)))
        with pytest.raises(ValueError):
            save_trace([a, b], tmp_path)
