import json

import numpy as np
import pytest
from scipy import stats

from ecgdiff.dataset import (
    FACTOR_RANGE,
    QT_TEST_IDS,
    DatasetSplit,
    build_splits,
    csv_to_record,
    load_record,
    mix_noise,
    noise_term,
    patchify,
    prepare,
    load_manifest,
    save_record,
    split_records,
    synth_corpus,
    synth_ecg,
    synth_wander,
    write_synthetic_corpus,
)
from ecgdiff.errors import ConfigError, DataError, DegenerateInputError, FormatError
from ecgdiff.metrics import SEGMENTS, SignalRecord, segment_of


def write_raw(tmp_path, name, values, rate=360.0, dtype="f32le"):
    blob = tmp_path / f"{name}.f32"
    blob.write_bytes(np.asarray(values, dtype="<f4").tobytes())
    side = tmp_path / f"{name}.json"
    side.write_text(json.dumps({"id": name, "sample_rate_hz": rate, "n_samples": len(values),
                                "dtype": dtype, "data": blob.name}))
    return side


class TestRecordIO:
    def test_minimal_fixture(self, tmp_path):
        rec = load_record(write_raw(tmp_path, "tiny", [0.5, -1.25, 2.0, 0.0]))
        assert rec.samples.tolist() == [0.5, -1.25, 2.0, 0.0]
        assert rec.sample_rate_hz == 360.0 and rec.id == "tiny"

    def test_inf_sample(self, tmp_path):
        with pytest.raises(DataError):
            load_record(write_raw(tmp_path, "bad", [0.0, np.inf, 1.0]))

    def test_nan_sample(self, tmp_path):
        with pytest.raises(DataError):
            load_record(write_raw(tmp_path, "bad", [0.0, np.nan]))

    def test_round_trip_7200(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.standard_normal(7200).astype(np.float32)
        # scratch writer, independent of save_record
        side = write_raw(tmp_path, "long", values)
        rec = load_record(side)
        assert len(rec) == 7200 and rec.sample_rate_hz == 360.0
        assert np.array_equal(rec.samples, values.astype(np.float64))
        again = load_record(save_record(rec, tmp_path / "copy.json"))
        assert np.array_equal(again.samples, rec.samples)

    def test_truncated_blob(self, tmp_path):
        side = write_raw(tmp_path, "short", [1.0, 2.0, 3.0])
        meta = json.loads(side.read_text())
        meta["n_samples"] = 4
        side.write_text(json.dumps(meta))
        with pytest.raises(FormatError):
            load_record(side)

    def test_bad_json(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("{not json")
        with pytest.raises(FormatError):
            load_record(p)

    def test_unknown_dtype(self, tmp_path):
        with pytest.raises(FormatError):
            load_record(write_raw(tmp_path, "d", [1.0], dtype="i16"))

    def test_csv_conversion(self, tmp_path):
        src = tmp_path / "rec.csv"
        src.write_text("sample_index,value\n0,0.25\n1,-0.5\n2,1.0\n")
        side = csv_to_record(src, tmp_path / "out" / "rec.json", 250.0)
        rec = load_record(side)
        assert rec.samples.tolist() == [0.25, -0.5, 1.0] and rec.sample_rate_hz == 250.0
        assert load_record(src).samples.tolist() == [0.25, -0.5, 1.0]

    def test_csv_garbage(self, tmp_path):
        src = tmp_path / "rec.csv"
        src.write_text("sample_index,value\n0,0.25\n1,abc\n")
        with pytest.raises(FormatError):
            load_record(src)


class TestMixing:
    def test_zero_factor(self):
        rng = np.random.default_rng(0)
        clean = np.sin(np.linspace(0, 5, 100))
        noisy, f, _ = mix_noise(clean, np.random.default_rng(1).standard_normal(300), 0.0, rng)
        assert np.array_equal(noisy, clean)

    def test_identity_rescale(self):
        clean = np.linspace(-1, 1, 50)
        noise = -np.linspace(-1, 1, 50)   # spans exactly [-1, 1]
        noisy, _, off = mix_noise(clean, noise, 0.5, np.random.default_rng(0))
        assert off == 0
        added = noisy - clean
        assert added.min() == pytest.approx(-0.5) and added.max() == pytest.approx(0.5)
        np.testing.assert_allclose(added, 0.5 * noise, atol=1e-12)

    def test_pipeline_oracle(self):
        clean = synth_ecg(3, morphology_seed=2).samples[:512]
        noise = synth_wander(5000, seed=3).samples
        noisy, factor, off = mix_noise(clean, noise, 1.3, np.random.default_rng(17))
        # scratch: same offset draw, then rescale + scale + add by hand
        expected_off = int(np.random.default_rng(17).integers(0, 5000 - 512 + 1))
        assert off == expected_off
        w = noise[off:off + 512]
        lo, hi = clean.min(), clean.max()
        scaled = (w - w.min()) / (w.max() - w.min()) * (hi - lo) + lo
        np.testing.assert_allclose(noisy, clean + 1.3 * scaled, rtol=1e-12, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        clean = rng.standard_normal(512)
        noise = rng.standard_normal(2000)
        noisy, f, off = mix_noise(clean, noise, 0.9, np.random.default_rng(5))
        back = noisy - noise_term(clean, noise[off:off + 512], f)
        np.testing.assert_allclose(back, clean, atol=1e-13)

    def test_constant_noise(self):
        with pytest.raises(DegenerateInputError):
            mix_noise(np.arange(10.0), np.ones(20), 1.0, np.random.default_rng(0))

    def test_noise_too_short(self):
        with pytest.raises(ValueError):
            mix_noise(np.arange(10.0), np.arange(5.0), 1.0, np.random.default_rng(0))


class TestPatchify:
    def test_counts(self):
        assert len(patchify(np.arange(1024.0))) == 2
        assert len(patchify(np.arange(1023.0))) == 1
        assert patchify(np.arange(100.0)) == []

    def test_prefix(self):
        x = np.random.default_rng(0).standard_normal(1700)
        parts = patchify(x, 512)
        assert np.array_equal(np.concatenate(parts), x[:1536])

    def test_bad_len(self):
        with pytest.raises(ValueError):
            patchify(np.arange(10.0), 0)


def _records(n, seconds=3.0):
    clean, noises = synth_corpus(n, seconds, seed=0, n_noise=2, noise_seconds=30)
    return clean, noises


class TestSplits:
    def test_table_ids(self):
        assert len(QT_TEST_IDS) == 14
        assert QT_TEST_IDS[0] == "sel123" and QT_TEST_IDS[-1] == "sel15815"

    def test_ten_records(self):
        ids = [f"r{i}" for i in range(10)]
        a = split_records(ids, ["r3", "r7"], seed=5)
        assert sorted(k for k, v in a.items() if v == "test") == ["r3", "r7"]
        assert sum(v == "train" for v in a.values()) == 6   # ceil(0.7 * 8)
        assert sum(v == "val" for v in a.values()) == 2
        assert split_records(ids, ["r3", "r7"], seed=5) == a
        assert any(split_records(ids, ["r3", "r7"], seed=s) != a for s in range(6, 12))

    def test_missing_test_id(self):
        with pytest.raises(ConfigError):
            split_records(["a", "b"], ["c"], 0)

    def test_disjoint_and_complete(self):
        clean, noises = _records(10)
        sp = build_splits(clean, [clean[0].id, clean[1].id], 3, noises)
        train, val, test = (set(p.record_ids) for p in (sp.train, sp.val, sp.test))
        assert not (train & val) and not (train & test) and not (val & test)
        assert test == {clean[0].id, clean[1].id}
        per_record = len(clean[0].samples) // 512
        assert len(sp.train) + len(sp.val) + len(sp.test) == 10 * per_record
        for part in (sp.train, sp.val, sp.test):
            assert np.all((part.noise_factor >= FACTOR_RANGE[0]) & (part.noise_factor <= FACTOR_RANGE[1]))

    def test_deterministic(self):
        clean, noises = _records(6)
        a = build_splits(clean, [clean[0].id], 1, noises)
        b = build_splits(clean, [clean[0].id], 1, noises)
        assert np.array_equal(a.train.noisy, b.train.noisy)
        assert np.array_equal(a.test.noise_factor, b.test.noise_factor)

    def test_save_load(self, tmp_path):
        clean, noises = _records(5)
        sp = build_splits(clean, [clean[0].id], 1, noises)
        sp.save(tmp_path)
        back = DatasetSplit.load(tmp_path)
        assert np.array_equal(back.val.clean, sp.val.clean)
        assert back.train.record_id == sp.train.record_id
        assert back.assignment == sp.assignment

    def test_factor_occupancy_chi_square(self):
        rng = np.random.default_rng(0)
        f = rng.uniform(*FACTOR_RANGE, 10_000)
        observed = np.bincount([segment_of(v) for v in f], minlength=4)
        widths = np.array([hi - lo for lo, hi in SEGMENTS])
        expected = 10_000 * widths / widths.sum()
        assert stats.chisquare(observed, expected).pvalue > 0.01


class TestSynthetic:
    def test_peak_count(self):
        rec = synth_ecg(3, 360.0, morphology_seed=7)
        x = rec.samples
        above = x > 0.5 * x.max()
        # rising edges of the thresholded signal
        assert int(np.sum(above[1:] & ~above[:-1]) + above[0]) == 3

    def test_pure_sinusoid(self):
        n = 360 * 400
        rec = synth_wander(n, components=1, seed=2, band_level=0.0)
        spec = np.abs(np.fft.rfft(rec.samples * np.hanning(n)))
        k = int(spec.argmax())
        others = np.delete(spec, np.arange(k - 3, k + 4))
        assert spec[k] > 100 * others.max()
        assert 0.05 <= k * 360.0 / n <= 0.5

    def test_band_component(self):
        rec = synth_wander(36000, components=2, seed=1, band_level=1.0)
        f = np.fft.rfftfreq(36000, 1 / 360)
        p = np.abs(np.fft.rfft(rec.samples)) ** 2
        assert p[(f > 0.6) & (f < 8)].sum() > 0.2 * p.sum()

    def test_same_seed(self):
        assert np.array_equal(synth_ecg(5, morphology_seed=1).samples, synth_ecg(5, morphology_seed=1).samples)
        assert np.array_equal(synth_wander(500, 2, 3).samples, synth_wander(500, 2, 3).samples)

    def test_invalid(self):
        with pytest.raises(ValueError):
            synth_ecg(0)
        with pytest.raises(ValueError):
            synth_wander(100, components=0)


class TestManifest:
    def test_prepare_from_written_corpus(self, tmp_path):
        path = write_synthetic_corpus(tmp_path, n_records=10, seconds=3.0, seed=4, n_test=2)
        m = load_manifest(path)
        sp = prepare(m)
        assert len(sp.test.record_ids) == 2
        assert len(sp.train.record_ids) == 6 and len(sp.val.record_ids) == 2

    def test_missing_noise(self, tmp_path):
        path = write_synthetic_corpus(tmp_path, n_records=4, seconds=3.0, n_test=1)
        m = json.loads(path.read_text())
        m["records"] = [r for r in m["records"] if r["role"] == "clean"]
        path.write_text(json.dumps(m))
        with pytest.raises(ConfigError):
            prepare(load_manifest(path))

    def test_missing_file(self, tmp_path):
        path = write_synthetic_corpus(tmp_path, n_records=4, seconds=3.0, n_test=1)
        (tmp_path / "records" / "noise_0.json").unlink()
        with pytest.raises(ConfigError):
            prepare(load_manifest(path))
