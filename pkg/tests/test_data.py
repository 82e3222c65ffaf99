import numpy as np
import pytest

from cpformer.data import (EcgRecord, SplitPlan, SynthSpec, beat_times, class_prevalence, label_matrix,
                           load_dataset, load_label_map, load_processed, make_splits, read_signal_csv,
                           save_processed, st_token_windows, synth_corpus, synth_dataset, synth_ecg, synth_labels,
                           write_raw_corpus, write_signal_csv)
from cpformer.errors import ConfigurationError, InputError
from cpformer.preprocess import preprocess_signal


def test_archetype_labels():
    assert synth_labels(SynthSpec(heart_rate_bpm=50)).tolist() == [1, 0, 0, 0, 0, 0]
    y = synth_labels(SynthSpec(heart_rate_bpm=120, st_offset_mv=0.2))
    assert y[1] == 1 and y[4] == 1 and y.sum() == 2
    assert synth_labels(SynthSpec(qrs_width_ms=140))[3] == 1
    assert synth_labels(SynthSpec(st_offset_mv=-0.15))[4] == 1
    assert synth_labels(SynthSpec(rr_jitter=0.2))[2] == 1
    assert synth_labels(SynthSpec(qrs_axis_deg=-50))[5] == 1


def test_synth_spec_validation():
    with pytest.raises(ConfigurationError):
        SynthSpec(heart_rate_bpm=300)
    with pytest.raises(ConfigurationError):
        SynthSpec(duration_s=1.0)
    with pytest.raises(ConfigurationError):
        SynthSpec(t_amp=float("inf"))


def test_synth_deterministic_and_shaped():
    spec = SynthSpec(seed=5, duration_s=4.0)
    a, b = synth_ecg(spec), synth_ecg(spec)
    assert a.leads.shape == (12, 2000)
    assert np.array_equal(a.leads, b.leads)
    assert not np.array_equal(a.leads, synth_ecg(SynthSpec(seed=6, duration_s=4.0)).leads)


@pytest.mark.parametrize("hr", [50.0, 75.0, 120.0])
def test_synth_fundamental_at_heart_rate(hr):
    spec = SynthSpec(heart_rate_bpm=hr, duration_s=10.0, noise_std=0.0)
    x = synth_ecg(spec, noise=False).leads[1]
    spectrum = np.abs(np.fft.rfft(x - x.mean()))
    freqs = np.fft.rfftfreq(x.size, 1 / spec.sample_rate_hz)
    band = freqs > 0.5
    # the fundamental is the lowest strong harmonic of the beat train
    strong = freqs[band][spectrum[band] > 0.5 * spectrum[band].max()]
    bin_hz = freqs[1]
    assert np.any(np.abs(strong - hr / 60.0) <= bin_hz)
    assert strong.min() >= hr / 60.0 - bin_hz


def test_lead_vector_avr_inverted():
    x = synth_ecg(SynthSpec(noise_std=0.0, qrs_amp=0.0, p_amp=0.0, st_offset_mv=0.0), noise=False).leads
    assert x[3].min() < 0 < x[1].max()


def test_st_windows_follow_beats():
    spec = SynthSpec(heart_rate_bpm=60, start_offset_s=0.5, duration_s=3.0)
    marks = st_token_windows(spec, 75, 0.04)
    centers = beat_times(spec)
    assert np.allclose(np.diff(centers), 1.0)
    on = np.flatnonzero(marks)
    # 40-120 ms after the QRS at 0.5 s spans tokens 13..15
    assert {13, 14, 15} <= set(on.tolist())
    assert not marks[12] and not marks[16]


def test_st_shift_visible_in_window():
    base = SynthSpec(noise_std=0.0, st_offset_mv=0.0, duration_s=3.0)
    shifted = SynthSpec(noise_std=0.0, st_offset_mv=0.25, duration_s=3.0)
    diff = synth_ecg(shifted, noise=False).leads[9] - synth_ecg(base, noise=False).leads[9]
    t = np.arange(diff.size) / 500.0
    c = beat_times(base)[1]
    inside = (t >= c + 0.05) & (t < c + 0.11)
    assert np.allclose(diff[inside], 0.25)


def test_label_map_and_loader(tmp_path):
    lm = load_label_map()
    assert lm.encode(["SB"]).tolist() == [1, 0, 0, 0, 0, 0]
    assert lm.encode(["AFIB", "STE"]).tolist() == [0, 0, 1, 0, 1, 0]
    with pytest.raises(InputError):
        lm.encode(["NOT_A_CODE"])

    x = np.random.default_rng(0).normal(size=(12, 1200))
    write_signal_csv(tmp_path / "good.csv", x)
    eleven = np.random.default_rng(1).normal(size=(1200, 11))
    np.savetxt(tmp_path / "short.csv", eleven, delimiter=",", header=",".join(["I"] * 11), comments="")
    write_signal_csv(tmp_path / "nan.csv", np.where(np.arange(1200) == 5, np.nan, x))
    write_signal_csv(tmp_path / "bad_code.csv", x)
    (tmp_path / "labels.csv").write_text(
        "id,codes\ngood,SB;LVH\nshort,SR\nnan,SR\nbad_code,XYZ\nmissing,SR\n")
    res = load_dataset(tmp_path, tmp_path / "labels.csv")
    assert [r.id for r in res.records] == ["good"]
    assert res.records[0].labels.tolist() == [1, 0, 0, 0, 0, 1]
    assert np.allclose(res.records[0].raw.leads, x, atol=1e-6)
    rejected = dict(res.rejected)
    assert set(rejected) == {"short", "nan", "bad_code", "missing"}
    assert "columns" in rejected["short"] and "XYZ" in rejected["bad_code"]


def test_signal_csv_reorders_columns(tmp_path):
    x = np.arange(24.0).reshape(12, 2).repeat(3, axis=1)
    names = ["V6", "V5", "V4", "V3", "V2", "V1", "aVF", "aVL", "aVR", "III", "II", "I"]
    np.savetxt(tmp_path / "r.csv", x[::-1].T, delimiter=",", header=",".join(names), comments="")
    assert np.array_equal(read_signal_csv(tmp_path / "r.csv"), x)


def test_raw_corpus_roundtrip_through_loader(tmp_path):
    raw = synth_corpus(6, seed=3, duration_s=2.56)
    write_raw_corpus(tmp_path, raw)
    res = load_dataset(tmp_path, tmp_path / "labels.csv")
    assert not res.rejected
    for a, b in zip(raw, res.records):
        assert np.array_equal(a.labels, b.labels)
        assert np.abs(a.raw.leads - b.raw.leads).max() < 1e-6


def test_processed_roundtrip(tmp_path):
    recs = synth_dataset(12, seed=4)
    save_processed(tmp_path / "p", recs)
    back = load_processed(tmp_path / "p")
    assert [r.id for r in back] == [r.id for r in recs]
    for a, b in zip(recs, back):
        assert np.array_equal(a.signal, b.signal) and np.array_equal(a.labels, b.labels)
    assert back[0].meta == recs[0].meta


def test_synth_dataset_shapes_and_normalization():
    recs = synth_dataset(8, seed=5)
    assert all(r.signal.shape == (12, 256) for r in recs)
    raw = synth_corpus(8, seed=5)
    assert np.array_equal(recs[0].signal, preprocess_signal(raw[0].raw)[:, :256])


def test_synth_corpus_covers_all_classes():
    prev = class_prevalence(synth_dataset(200, seed=6))
    assert np.all(prev > 0.1)


def test_class_prevalence_examples():
    only0 = np.zeros((5, 6))
    only0[:, 0] = 1
    assert class_prevalence(only0).tolist() == [1, 0, 0, 0, 0, 0]
    with pytest.raises(InputError):
        class_prevalence(np.zeros((0, 6)))


def test_record_label_length():
    with pytest.raises(InputError):
        EcgRecord("x", np.zeros((12, 10)), np.zeros(5))


def _labels(n, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.uniform(size=(n, 6)) < 0.3).astype(float)


def test_split_arithmetic_and_partition():
    labels = _labels(100)
    s = make_splits(labels, SplitPlan(0.15, 5, 0))
    assert len(s.test) == 15
    vals = [set(v) for _, v in s.folds]
    assert all(16 <= len(v) <= 18 for v in vals)
    union = set().union(*vals)
    assert union == set(range(100)) - set(s.test)
    assert sum(len(v) for v in vals) == len(union)
    for tr, va in s.folds:
        assert not set(tr) & set(va) and not set(tr) & set(s.test)
        assert set(tr) | set(va) == union


def test_split_determinism_and_minimum():
    labels = _labels(120, 1)
    a, b = make_splits(labels, SplitPlan(seed=3)), make_splits(labels, SplitPlan(seed=3))
    assert a.test == b.test and a.folds == b.folds
    c = make_splits(labels, SplitPlan(seed=4))
    assert a.test != c.test
    with pytest.raises(ConfigurationError):
        make_splits(_labels(49), SplitPlan())


def test_split_stratification_keeps_common_patterns_balanced():
    recs = synth_dataset(300, seed=7)
    labels = label_matrix(recs)
    s = make_splits(labels, SplitPlan(0.15, 5, 0))
    overall = labels.mean(axis=0)
    for _, va in s.folds:
        assert np.abs(labels[va].mean(axis=0) - overall).max() < 0.1
