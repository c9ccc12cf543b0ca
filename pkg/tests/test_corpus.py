import csv
import io
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluematch.corpus import (DatasetItem, DatasetManifest, Prior, default_wav_name, generate_contrived,
                              generate_preset, ingest_wav, pitch_deviation_cents, regenerate_item, resample,
                              split_dataset, training_arrays)
from fluematch.errors import EmptyDataset, PitchSanityWarning, TooFewStops, UnreadableFile
from fluematch.features import AnalysisConfig
from fluematch.params import N_PARAMS, NAMES
from fluematch.tone import note_to_f0, write_wav

from conftest import sine


def small(n_stops=3, notes=(20, 30), seed=0, **kw):
    return generate_contrived(n_stops, notes, seed=seed, duration_s=0.5, **kw)


def fake_manifest(n_stops, notes=(10, 20)):
    items = [DatasetItem(f"s{s:03d}", n) for s in range(n_stops) for n in notes]
    return DatasetManifest(items)


def test_prior_validation():
    with pytest.raises(ValueError):
        Prior(family="trumpet")
    with pytest.raises(ValueError):
        Prior(ranges=(("h2_gain", -5.0, 0.1),))
    with pytest.raises(ValueError):
        Prior(jitter=-0.1)
    p = Prior("flauto", (("h2_gain", 0.0, 0.1),), 0.05)
    assert Prior.from_dict(p.to_dict()) == p


@given(st.integers(0, 10 ** 6), st.sampled_from(["principale", "bordone", "flauto"]))
def test_prior_samples_within_bounds(seed, family):
    prior = Prior(family, jitter=0.3)
    low, high = prior.bounds()
    r = np.random.default_rng(seed)
    theta = prior.jittered(prior.sample(r), r)
    assert np.all(theta.values >= low) and np.all(theta.values <= high)


def test_generate_shape_and_determinism():
    a = small()
    b = small()
    assert len(a) == 6 and a.stops() == ["principale_0000", "principale_0001", "principale_0002"]
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a.items, b.items))
    assert [x.to_record() for x in a.items] == [y.to_record() for y in b.items]
    assert all(it.samples.size == 16000 for it in a.items)
    c = small(seed=1)
    assert a.items[0].params != c.items[0].params


def test_generate_prefix_is_stable_when_adding_stops():
    a = small(2)
    b = small(4)
    assert [x.to_record() for x in a.items] == [y.to_record() for y in b.items[:4]]


def test_notes_share_stop_parameters_without_jitter():
    m = small(1, (10, 20, 30))
    assert len({it.params for it in m.items}) == 1
    assert len({it.render_seed for it in m.items}) == 3
    j = small(1, (10, 20, 30), prior=Prior(jitter=0.05))
    assert len({it.params for it in j.items}) == 3


def test_generate_errors():
    with pytest.raises(ValueError):
        small(0)
    with pytest.raises(ValueError):
        DatasetItem("a", 74)
    with pytest.raises(ValueError):
        DatasetManifest([DatasetItem("a", 3), DatasetItem("a", 3)])


def test_save_load_roundtrip_and_closure(tmp_path):
    m = small()
    path = tmp_path / "ds" / "manifest.jsonl"
    path.parent.mkdir()
    m.save(path)
    back = DatasetManifest.load(path)
    assert back == m
    for it in back.items:
        regen = regenerate_item(it, back)
        out = tmp_path / "regen.wav"
        write_wav(out, regen)
        assert out.read_bytes() == (path.parent / it.wav).read_bytes()
    assert back.items[0].wav == default_wav_name("principale_0000", 20)


def test_load_errors(tmp_path):
    with pytest.raises(UnreadableFile):
        DatasetManifest.load(tmp_path / "missing.jsonl")
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(UnreadableFile):
        DatasetManifest.load(tmp_path / "empty.jsonl")
    (tmp_path / "other.jsonl").write_text('{"schema": "x"}\n')
    with pytest.raises(UnreadableFile):
        DatasetManifest.load(tmp_path / "other.jsonl")
    m = small(1, (20,))
    m.save(tmp_path / "m.jsonl")
    (tmp_path / m.items[0].wav).unlink()
    with pytest.raises(UnreadableFile):
        DatasetManifest.load(tmp_path / "m.jsonl")
    assert len(DatasetManifest.load(tmp_path / "m.jsonl", check_files=False)) == 1


def test_regenerate_needs_params():
    with pytest.raises(ValueError):
        regenerate_item(DatasetItem("rec", 10), fake_manifest(1))


def test_param_table():
    m = small(2, (20,))
    rows = list(csv.reader(io.StringIO(m.param_table_csv())))
    assert rows[0] == ["stop", "note", "family", "footage", *NAMES]
    assert len(rows) == 3 and len(rows[1]) == 4 + N_PARAMS
    assert float(rows[1][4]) == m.items[0].params.values[0]


def test_presets_scale_and_footages():
    m = generate_preset("subset2", (20,), seed=1, scale=0.02, duration_s=0.25)
    assert len(m.stops()) == 6
    assert {it.footage for it in m.items} == {"4", "8", "16"}
    assert {it.family for it in m.items} == {"principale"}
    assert generate_preset("subset5", (20,), scale=0.01, duration_s=0.25).items[0].family == "bordone"


def test_split_examples():
    m = fake_manifest(10)
    tr, va, te = split_dataset(m, (0.8, 0.1, 0.1), seed=3)
    assert (len(tr.stops()), len(va.stops()), len(te.stops())) == (8, 1, 1)
    again = split_dataset(m, (0.8, 0.1, 0.1), seed=3)
    assert [s.stops() for s in again] == [tr.stops(), va.stops(), te.stops()]
    assert len(split_dataset(fake_manifest(3), (0.98, 0.01, 0.01))[2].stops()) == 1
    with pytest.raises(TooFewStops):
        split_dataset(fake_manifest(2), (0.8, 0.1, 0.1))
    with pytest.raises(ValueError):
        split_dataset(m, (0.5, 0.6))


@given(st.integers(0, 2 ** 32 - 1), st.integers(3, 40))
def test_split_partition_by_stop(seed, n_stops):
    m = fake_manifest(n_stops)
    parts = split_dataset(m, seed=seed)
    stops = [set(p.stops()) for p in parts]
    assert all(not (a & b) for i, a in enumerate(stops) for b in stops[i + 1:])
    keys = sorted(k for p in parts for k in (it.key for it in p.items))
    assert keys == sorted(it.key for it in m.items)


def test_training_arrays():
    m = generate_contrived(2, (20,), duration_s=1.5)
    X, Y = training_arrays(m, AnalysisConfig.for_duration(1.5))
    assert X.shape[0] == Y.shape[0] == 2 and Y.shape[1] == N_PARAMS
    assert np.array_equal(Y[0], m.items[0].params.normalized())
    with pytest.raises(EmptyDataset):
        training_arrays(fake_manifest(1), AnalysisConfig.for_duration(1.5))


def test_resample_lengths():
    x = np.random.default_rng(0).normal(size=44100)
    assert resample(x, 44100, 32000).size == 32000
    assert np.array_equal(resample(x, 32000, 32000), x)


def test_ingest_resamples_and_normalizes(tmp_path):
    note = 30
    write_wav(tmp_path / "a.wav", sine(note_to_f0(note), 5.0, 44100, 0.1), 44100)
    with warnings.catch_warnings():
        warnings.simplefilter("error", PitchSanityWarning)
        item = ingest_wav(tmp_path / "a.wav", note, family="flauto")
    assert item.samples.size == round(4.0 * 32000)
    assert np.max(np.abs(item.samples)) == pytest.approx(10 ** (-3 / 20))
    assert item.stop == "a" and not item.contrived and item.family == "flauto"


def test_ingest_pads_short_recordings(tmp_path):
    write_wav(tmp_path / "s.wav", sine(note_to_f0(30), 1.0, 32000, 0.5), 32000)
    item = ingest_wav(tmp_path / "s.wav", 30)
    assert item.samples.size == 128000 and not np.any(item.samples[32000:])


def test_ingest_semitone_off_warns(tmp_path):
    write_wav(tmp_path / "b.wav", sine(note_to_f0(31), 4.0, 32000, 0.5), 32000)
    with pytest.warns(PitchSanityWarning):
        ingest_wav(tmp_path / "b.wav", 30)


def test_pitch_deviation_accepts_overtones():
    fs = 32000
    f0 = note_to_f0(20)
    assert pitch_deviation_cents(sine(3 * f0, 2.0, fs, 0.5).samples, fs, 20) < 5
    assert pitch_deviation_cents(sine(f0 * 2 ** (1 / 12), 2.0, fs, 0.5).samples, fs, 20) > 90
