import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attxnet import dsp
from attxnet.dsp import FilterSpec, RawRecording
from attxnet.errors import ConfigurationError

# native rates used to exercise every modality filter
NATIVE = {"ECG": 700.0, "EDA": 700.0, "BVP": 64.0, "RESP": 700.0, "ST": 700.0}


def db(h):
    return 20 * np.log10(np.abs(h))


def sine(f, fs, seconds, phase=0.0):
    t = np.arange(int(seconds * fs)) / fs
    return np.sin(2 * np.pi * f * t + phase)


def lag_of(x, y, max_lag=50):
    """Lag (samples) maximising the cross-correlation of the middle halves."""
    n = len(x)
    mid = slice(n // 4, 3 * n // 4)
    best, arg = -np.inf, None
    for lag in range(-max_lag, max_lag + 1):
        c = float(np.dot(x[mid], np.roll(y, -lag)[mid]))
        if c > best:
            best, arg = c, lag
    return arg


# --------------------------------------------------------------------------
# design


def test_every_modality_filter_is_minus_3db_at_its_cutoffs():
    for modality, chain in dsp.MODALITY_FILTERS.items():
        fs = NATIVE[modality]
        for kind, cutoffs in chain:
            sos = dsp.design_butterworth(FilterSpec(kind, cutoffs, fs))
            for fc in cutoffs:
                gain = db(dsp.frequency_response(sos, [fc], fs))[0]
                assert abs(gain + 3.0103) <= 0.1, (modality, kind, fc, gain)
                assert abs(abs(dsp.frequency_response(sos, [fc], fs)[0]) - 2**-0.5) <= 1e-3


def test_lowpass_unit_dc_gain():
    sos = dsp.design_butterworth(FilterSpec("lowpass", 3.0, 700.0))
    assert abs(dsp.frequency_response(sos, [0.0], 700.0)[0]) == pytest.approx(1.0, abs=1e-12)


def test_bandpass_centre_gain():
    for lo, hi, fs in [(5.0, 15.0, 700.0), (0.5, 8.0, 64.0), (0.1, 0.35, 700.0)]:
        sos = dsp.design_butterworth(FilterSpec("bandpass", (lo, hi), fs))
        centre = math.sqrt(lo * hi)
        assert abs(abs(dsp.frequency_response(sos, [centre], fs)[0]) - 1.0) <= 0.01


def test_ecg_bandpass_pass_and_stop():
    sos = dsp.modality_filter("ECG", 700.0)
    h10, h05 = np.abs(dsp.frequency_response(sos, [10.0, 0.5], 700.0))
    assert h10 >= 0.95
    assert 20 * math.log10(h05) < -40


def test_cutoff_at_nyquist_names_nyquist():
    with pytest.raises(ConfigurationError, match="Nyquist = 32.0 Hz"):
        FilterSpec("lowpass", 32.0, 64.0).validate()
    with pytest.raises(ConfigurationError):
        FilterSpec("bandpass", (8.0, 5.0), 700.0).validate()
    with pytest.raises(ConfigurationError):
        dsp.design_butterworth(FilterSpec("lowpass", 40.0, 64.0))


def test_unknown_modality():
    with pytest.raises(ConfigurationError):
        dsp.modality_filter("EMG", 700.0)


def test_st_filter_keeps_highpass_in_double_precision():
    sos = dsp.modality_filter("ST", 700.0)
    assert len(sos) == 4  # 2 highpass + 2 lowpass sections
    assert dsp.max_pole_radius(sos) < dsp.POLE_RADIUS_LIMIT


# --------------------------------------------------------------------------
# application


def test_zero_input_zero_output():
    sos = dsp.modality_filter("ECG", 700.0)
    np.testing.assert_array_equal(dsp.filter_signal(sos, np.zeros(1000)), 0.0)


def test_dc_through_lowpass():
    sos = dsp.design_butterworth(FilterSpec("lowpass", 3.0, 700.0))
    y = dsp.filter_signal(sos, np.full(5000, 2.5))
    np.testing.assert_allclose(y, 2.5, atol=1e-6)


def test_too_short_input():
    sos = dsp.modality_filter("ECG", 700.0)
    with pytest.raises(ConfigurationError, match="need more than 24 samples"):
        dsp.filter_signal(sos, np.ones(24))


def test_output_length_preserved():
    sos = dsp.modality_filter("BVP", 64.0)
    assert dsp.filter_signal(sos, np.random.default_rng(0).standard_normal(777)).shape == (777,)


@pytest.mark.parametrize(
    "modality,f_in,f_out",
    [("ECG", 10.0, (2.5, 30.0)), ("EDA", 1.0, (6.0,)), ("BVP", 2.0, (0.25, 16.0)), ("RESP", 0.2, (0.05, 0.7)),
     ("ST", 1.0, (20.0,))],
)
def test_in_band_energy_and_zero_lag(modality, f_in, f_out):
    fs = NATIVE[modality]
    sos = dsp.modality_filter(modality, fs)
    seconds = max(60.0, 40.0 / f_in)
    x = sine(f_in, fs, seconds, 0.3)
    y = dsp.filter_signal(sos, x)
    core = slice(len(x) // 4, 3 * len(x) // 4)
    ratio = np.sqrt(np.mean(y[core] ** 2) / np.mean(x[core] ** 2))
    assert 0.9 <= ratio <= 1.1
    assert lag_of(x, y, max_lag=min(50, int(fs / f_in / 2) - 1)) == 0
    for f in f_out:
        z = sine(f, fs, max(seconds, 40.0 / f), 0.3)
        yz = dsp.filter_signal(sos, z)
        c = slice(len(z) // 4, 3 * len(z) // 4)
        assert np.sqrt(np.mean(yz[c] ** 2) / np.mean(z[c] ** 2)) <= 0.05


def test_st_highpass_leaves_no_edge_offset():
    fs = 700.0
    sos = dsp.modality_filter("ST", fs)
    x = sine(1.0, fs, 30.0, 1.2)
    core = slice(700, len(x) - 700)  # skip the ordinary lowpass edge transient
    np.testing.assert_allclose(dsp.filter_signal(sos, x)[core], x[core], atol=1e-6)


def test_ecg_sine_amplitude_and_phase():
    fs = 700.0
    x = sine(10.0, fs, 20.0)
    y = dsp.filter_signal(dsp.modality_filter("ECG", fs), x)
    t = np.arange(len(x)) / fs
    core = slice(len(x) // 4, 3 * len(x) // 4)
    # least-squares sine fit: y = a sin + b cos
    basis = np.stack([np.sin(2 * np.pi * 10 * t[core]), np.cos(2 * np.pi * 10 * t[core])], axis=1)
    (a, b), *_ = np.linalg.lstsq(basis, y[core], rcond=None)
    assert abs(math.hypot(a, b) - 1.0) <= 0.05
    assert abs(math.atan2(b, a)) < 1e-3


# --------------------------------------------------------------------------
# z-score, resample, EDA


def test_zscore_examples(rng):
    np.testing.assert_allclose(dsp.zscore([1.0, 2.0, 3.0]), [-1.2247448713915890, 0.0, 1.2247448713915890])
    np.testing.assert_array_equal(dsp.zscore(np.full(10, 4.2)), 0.0)
    x = rng.standard_normal(100)
    np.testing.assert_allclose(dsp.zscore(3.0 * x + 7.0), dsp.zscore(x), atol=1e-12)
    z = dsp.zscore(x)
    np.testing.assert_allclose(dsp.zscore(z), z, atol=1e-9)


def test_resample_identity_and_lengths(rng):
    x = rng.standard_normal(500)
    np.testing.assert_allclose(dsp.resample(x, 256.0, 256.0), x, atol=1e-9)
    assert dsp.resample(rng.standard_normal(2048), 2048.0, 256.0).shape == (256,)
    for n, fs_in, fs_out in [(7000, 700.0, 256.0), (640, 64.0, 256.0), (123, 4.0, 256.0)]:
        assert dsp.resample(rng.standard_normal(n), fs_in, fs_out).shape == (round(n * fs_out / fs_in),)


def test_resample_preserves_sine():
    x = sine(5.0, 2048.0, 4.0)
    y = dsp.resample(x, 2048.0, 256.0)
    core = y[len(y) // 4 : 3 * len(y) // 4]
    assert abs(np.sqrt(2 * np.mean(core**2)) - 1.0) <= 0.02
    spectrum = np.abs(np.fft.rfft(y))
    assert np.fft.rfftfreq(len(y), 1 / 256.0)[spectrum.argmax()] == pytest.approx(5.0)


def test_eda_decomposition_of_constant():
    tonic, phasic = dsp.decompose_eda(np.full(4000, 3.0), 256.0)
    np.testing.assert_allclose(phasic, 0.0, atol=1e-9)
    np.testing.assert_allclose(tonic, 3.0, atol=1e-9)


def test_preprocess_modality_outputs(rng):
    n = 700 * 30
    ecg = RawRecording("S1", "ECG", 700.0, rng.standard_normal(n) + sine(8.0, 700.0, 30.0))
    out = dsp.preprocess_modality(ecg)
    assert out.shape == (1, round(n * 256 / 700))
    assert abs(out.mean()) < 1e-9 and abs(out.std() - 1) < 1e-9
    eda = RawRecording("S1", "EDA", 700.0, np.cumsum(rng.standard_normal(n)) * 0.01)
    assert dsp.preprocess_modality(eda).shape[0] == 2
    st_const = RawRecording("S1", "ST", 700.0, np.full(n, 33.0))
    np.testing.assert_array_equal(dsp.preprocess_modality(st_const), 0.0)


# --------------------------------------------------------------------------
# windows and labels


def test_sixty_seconds_gives_thirteen_windows():
    assert len(dsp.window_segments(np.zeros(60 * 256), 256.0)) == 13


def test_window_edge_cases():
    assert len(dsp.window_segments(np.zeros(2560), 256.0)) == 1
    assert len(dsp.window_segments(np.zeros(2560 * 5), 256.0, overlap=0.0)) == 5
    with pytest.warns(UserWarning):
        assert dsp.window_segments(np.zeros(2559), 256.0) == []


@settings(max_examples=50, deadline=None)
@given(seconds=st.integers(10, 400))
def test_window_count_and_overlap(seconds):
    n = seconds * 256
    w = dsp.window_segments(np.zeros(n), 256.0)
    assert len(w) == (n - 2560) // 1024 + 1
    for a, b in zip(w, w[1:]):
        assert b.start - a.start == 1024
        assert a.stop - b.start == 1536  # 60 % of 2560
    assert w[-1].stop <= n


def test_majority_labelling():
    labels = np.array([0] * 1500 + [1] * 1060)
    assert dsp.window_segments(np.zeros(2560), 256.0, labels=labels)[0].label == 0
    tie = np.array([0] * 1280 + [1] * 1280)
    assert dsp.window_segments(np.zeros(2560), 256.0, labels=tie) == []
    excluded = np.array([-1] * 2000 + [1] * 560)
    assert dsp.window_segments(np.zeros(2560), 256.0, labels=excluded) == []


def test_resample_labels_nearest():
    lab = np.array([0, 0, 1, 1, 2, 2, 2, 2])
    out = dsp.resample_labels(lab, 8.0, 4.0)
    np.testing.assert_array_equal(out, [0, 1, 2, 2])


# --------------------------------------------------------------------------
# recording files


def test_recording_intervals_validated():
    with pytest.raises(ConfigurationError):
        RawRecording("S1", "ECG", 700.0, np.zeros(10), [(0, 11, "stress")])
    with pytest.raises(ConfigurationError):
        RawRecording("S1", "ECG", 700.0, np.zeros(10), [(0, 5, "a"), (4, 8, "b")])


def test_csv_and_binary_round_trip(tmp_path, rng):
    rec = RawRecording("S7", "BVP", 64.0, rng.standard_normal(300), [(10, 100, "stress"), (150, 300, "neutral")])
    for name, writer in (("r.csv", dsp.write_recording_csv), ("r.rec", dsp.write_recording_bin)):
        writer(rec, tmp_path / name)
        back = dsp.read_recording(tmp_path / name)
        assert (back.subject_id, back.modality, back.sample_rate) == ("S7", "BVP", 64.0)
        np.testing.assert_array_equal(back.samples, rec.samples)
        assert back.labels == rec.labels


def test_csv_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(dsp.RecordingFormatError, match="no records"):
        dsp.read_recording(empty)
    bad = tmp_path / "bad.csv"
    bad.write_text("subject_id,modality,sample_rate\nS1,EMG,700\n1.0\n")
    with pytest.raises(dsp.RecordingFormatError, match="EMG"):
        dsp.read_recording(bad)
    bad.write_text("subject_id,modality,sample_rate\nS1,ECG,700\n1.0\nabc\n")
    with pytest.raises(dsp.RecordingFormatError, match=":4"):
        dsp.read_recording(bad)
