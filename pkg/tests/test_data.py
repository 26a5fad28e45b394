import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacda.data import (CMAPSSParseError, Dataset, DomainShift, IntegrityError, SynthConfig, UnitRecord,
                        load_cmapss, make_windows, preprocess, read_tensor, synth_generate, synth_units,
                        write_tensor)


def _line(unit, cycle, value=0.0):
    return " ".join([str(unit), str(cycle)] + ["0"] * 3 + [str(value + s) for s in range(21)])


def _unit(uid, values):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    t = len(values)
    return UnitRecord(uid, np.arange(1, t + 1), np.zeros((t, 3)), values)


# --- parsing -------------------------------------------------------------------

def test_two_line_file_gives_one_unit(tmp_path):
    path = tmp_path / "f.txt"
    path.write_text(_line(1, 1) + "\n" + _line(1, 2, 0.5) + "\n")
    units = load_cmapss(path)
    assert len(units) == 1 and units[0].total_cycles == 2
    assert units[0].sensors.shape == (2, 21)
    assert units[0].sensors[1, 0] == 0.5


def test_empty_file_has_no_records(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("")
    with pytest.raises(CMAPSSParseError, match="no records"):
        load_cmapss(path)


def test_wrong_field_count_names_the_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text(_line(1, 1) + "\n1 2 3\n")
    with pytest.raises(CMAPSSParseError, match=":2: expected 26 fields"):
        load_cmapss(path)


def test_non_numeric_field(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text(_line(1, 1).replace("0", "x", 1) + "\n")
    with pytest.raises(CMAPSSParseError, match="non-numeric"):
        load_cmapss(path)


def test_non_consecutive_cycles(tmp_path):
    path = tmp_path / "gap.txt"
    path.write_text(_line(1, 1) + "\n" + _line(1, 3) + "\n")
    with pytest.raises(IntegrityError, match="unit 1"):
        load_cmapss(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cmapss(tmp_path / "none.txt")


# --- preprocessing ---------------------------------------------------------------

def test_min_max_identity():
    series, manifest = preprocess([_unit(1, [10.0, 20.0, 30.0])], [1])
    np.testing.assert_allclose(series[0].values[:, 0], [0.0, 0.5, 1.0])
    assert manifest["sensor_min"] == [10.0] and manifest["sensor_max"] == [30.0]


def test_rul_label_is_capped():
    series, _ = preprocess([_unit(1, np.arange(200.0))], [1], rul_cap=125)
    assert series[0].rul[49] == 1.0  # cycle 50: min(150, 125) / 125
    assert series[0].rul[-1] == 0.0
    assert series[0].life_fraction[-1] == 1.0


def test_constant_sensor_is_zeroed_and_flagged():
    vals = np.column_stack([np.arange(5.0), np.full(5, 7.0)])
    series, manifest = preprocess([_unit(1, vals)], [1, 2])
    assert np.all(series[0].values[:, 1] == 0.0)
    assert manifest["constant_sensors"] == [2]


def test_manifest_statistics_are_reused():
    _, manifest = preprocess([_unit(1, [0.0, 10.0])], [1])
    series, _ = preprocess([_unit(2, [5.0, 20.0])], [1], manifest=manifest)
    np.testing.assert_allclose(series[0].values[:, 0], [0.5, 2.0])


def test_sensor_subset_sets_window_channels():
    units = [_unit(1, np.random.default_rng(0).normal(size=(40, 21)))]
    subset = (2, 3, 4, 7, 8, 9, 11, 12, 13, 14, 15, 17, 20, 21)
    series, _ = preprocess(units, subset)
    assert make_windows(series, 30).n_sensors == 14


def test_bad_subset_rejected():
    with pytest.raises(ValueError, match="sensor indices"):
        preprocess([_unit(1, [1.0, 2.0])], [2])


# --- windowing ------------------------------------------------------------------

@pytest.mark.parametrize("t,n", [(30, 1), (35, 6)])
def test_window_counts(t, n):
    series, _ = preprocess([_unit(1, np.arange(float(t)))], [1])
    assert len(make_windows(series, 30)) == n


def test_short_unit_is_skipped_with_warning(caplog):
    series, _ = preprocess([_unit(1, np.arange(20.0))], [1])
    with caplog.at_level(logging.WARNING):
        ds = make_windows(series, 30)
    assert len(ds) == 0 and ds.manifest["n_skipped"] == 1
    assert "skipped" in caplog.text


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 20), st.integers(1, 5))
def test_window_labels_come_from_last_cycle(t, window, stride):
    series, _ = preprocess([_unit(1, np.arange(float(t)) + np.random.default_rng(t).normal(size=t))], [1])
    ds = make_windows(series, window, stride)
    expected = len(range(0, t - window + 1, stride)) if t >= window else 0
    assert len(ds) == expected
    for i in range(len(ds)):
        end = ds.end_cycles[i]
        assert ds.rul[i] == series[0].rul[end - 1]
        assert ds.values[i, 0, -1] == series[0].values[end - 1, 0]


# --- binary tensors and dataset persistence -------------------------------------

def test_tensor_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 2, 4))
    write_tensor(tmp_path / "t.bin", arr)
    np.testing.assert_array_equal(read_tensor(tmp_path / "t.bin"), arr)


def test_truncated_tensor_rejected(tmp_path):
    write_tensor(tmp_path / "t.bin", np.zeros((4, 4)))
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="payload"):
        read_tensor(tmp_path / "t.bin")


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "t.bin").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        read_tensor(tmp_path / "t.bin")


def test_dataset_save_load_round_trip(tmp_path):
    source, target, _ = synth_generate(SynthConfig(units_per_domain=3, mean_life=40, seed=1))
    loaded = Dataset.load(source.save(tmp_path / "src"))
    np.testing.assert_array_equal(loaded.values, source.values)
    np.testing.assert_array_equal(loaded.rul, source.rul)
    np.testing.assert_array_equal(loaded.unit_ids, source.unit_ids)
    unl = Dataset.load(target.unlabeled().save(tmp_path / "tgt"))
    assert unl.rul is None and unl.life_fraction is None and unl.domain == "target"


def test_dataset_rejects_misaligned_metadata():
    with pytest.raises(ValueError, match="unit_ids has 2 entries"):
        Dataset(np.zeros((3, 1, 2)), np.zeros(2), np.zeros(3))


# --- synthetic generator ----------------------------------------------------------

def test_synth_is_deterministic():
    a = synth_generate(SynthConfig(units_per_domain=4, seed=3))
    b = synth_generate(SynthConfig(units_per_domain=4, seed=3))
    for x, y in zip(a[:2], b[:2]):
        np.testing.assert_array_equal(x.values, y.values)
        np.testing.assert_array_equal(x.rul, y.rul)
    np.testing.assert_array_equal(a[2]["target"], b[2]["target"])


def test_no_shift_no_noise_gives_identical_domains():
    cfg = SynthConfig(units_per_domain=5, noise_scale=0.0,
                      domain_shift=DomainShift(scale=1.0, offset=0.0, time_warp=1.0))
    src, tgt = synth_units(cfg)
    assert len(src) == len(tgt)
    for s, t in zip(src, tgt):
        np.testing.assert_array_equal(s.sensors, t.sensors)


def test_scale_shift_doubles_raw_sensor_means():
    cfg = SynthConfig(domain_shift=DomainShift(scale=2.0, offset=0.0, time_warp=1.0))
    src, tgt = synth_units(cfg)
    mean_s = np.concatenate([u.sensors for u in src]).mean(axis=0)
    mean_t = np.concatenate([u.sensors for u in tgt]).mean(axis=0)
    np.testing.assert_allclose(mean_t, 2.0 * mean_s, atol=0.05)


def test_default_shift_separates_normalized_domains():
    source, target, _ = synth_generate(SynthConfig())
    gap = np.abs(source.values.mean(axis=(0, 2)) - target.values.mean(axis=(0, 2)))
    assert gap.max() > 0.02


def test_true_stage_labels_follow_life_fraction():
    source, target, stages = synth_generate(SynthConfig(units_per_domain=4))
    assert len(stages["source"]) == len(source) and len(stages["target"]) == len(target)
    assert np.all(stages["source"][source.life_fraction <= 0.33] == 0)
    assert np.all(stages["source"][source.life_fraction > 0.85] == 2)


@pytest.mark.parametrize("kw,msg", [({"noise_scale": -1}, "noise_scale"), ({"life_spread": 1.0}, "life_spread"),
                                    ({"units_per_domain": 0}, "positive")])
def test_synth_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        SynthConfig(**kw)
