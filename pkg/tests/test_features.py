import numpy as np
import pytest

from speechsql.errors import EmptyInput, FeatureFormatError, InputTooShort
from speechsql.features import (
    LOG_FLOOR,
    PseudoTTSConfig,
    SpeechFeatures,
    Waveform,
    extract_logmel,
    mel_center_frequencies,
    pad_or_resample,
    read_features,
    read_wav,
    synth_pseudo_speech,
    write_features,
    write_wav,
)


def _frame_count_oracle(n, win=1024, hop=512):
    # count window start positions directly
    count, start = 0, 0
    while start + win <= n:
        count += 1
        start += hop
    return count


@pytest.mark.parametrize("n", [1024, 1025, 1535, 1536, 16000, 22050])
def test_frame_count_matches_oracle(n):
    f = extract_logmel(Waveform(np.zeros(n)))
    assert f.n_frames == _frame_count_oracle(n)
    assert f.data.shape[1] == 96


def test_silence_gives_log_floor():
    f = extract_logmel(Waveform(np.zeros(16000)))
    assert f.data.shape == (30, 96)
    np.testing.assert_allclose(f.data, np.float32(np.log(LOG_FLOOR)))


def test_short_waveform_rejected():
    with pytest.raises(InputTooShort):
        extract_logmel(Waveform(np.zeros(500)))


def test_sine_peaks_at_band_nearest_tone():
    sr, hz = 16000, 440.0
    t = np.arange(sr) / sr
    f = extract_logmel(Waveform(0.5 * np.sin(2 * np.pi * hz * t), sr))
    peaks = f.data[1:-1].argmax(axis=1)
    assert len(set(peaks.tolist())) == 1
    # DFT oracle: the strongest bin of a plain FFT, mapped to the closest mel centre
    spec = np.abs(np.fft.rfft(0.5 * np.sin(2 * np.pi * hz * t[:1024]) * np.hamming(1024)))
    peak_hz = spec.argmax() * sr / 1024
    centres = mel_center_frequencies(sr)
    assert abs(int(peaks[0]) - int(np.abs(centres - peak_hz).argmin())) <= 1


def test_logmel_deterministic():
    w = Waveform(np.random.default_rng(0).uniform(-1, 1, 4096))
    assert extract_logmel(w) == extract_logmel(w)


def test_mean_centering_flag():
    w = Waveform(np.random.default_rng(1).uniform(-1, 1, 8192))
    f = extract_logmel(w, mean_center=True)
    np.testing.assert_allclose(f.data.mean(axis=0), 0.0, atol=1e-4)


def test_pad_rows_are_zero():
    x = SpeechFeatures(np.random.default_rng(0).normal(size=(10, 96)))
    y = pad_or_resample(x, 16)
    assert np.array_equal(y.data[:10], x.data)
    assert not y.data[10:].any()


def test_pad_identity():
    x = SpeechFeatures(np.random.default_rng(0).normal(size=(16, 96)))
    assert np.array_equal(pad_or_resample(x, 16).data, x.data)


def test_resample_rows_match_uniform_selection():
    x = SpeechFeatures(np.arange(20 * 96, dtype=np.float32).reshape(20, 96))
    y = pad_or_resample(x, 10)
    for i in range(10):
        exact = i * 19 / 9
        j = int(exact) + (exact - int(exact) >= 0.5)
        assert np.array_equal(y.data[i], x.data[j])


def test_resample_to_single_row():
    x = SpeechFeatures(np.arange(5 * 96, dtype=np.float32).reshape(5, 96))
    assert np.array_equal(pad_or_resample(x, 1).data, x.data[:1])


def test_pseudo_speech_blocks():
    a = synth_pseudo_speech(["min", "draws"])
    b = synth_pseudo_speech(["min", "byes"])
    assert a.data.shape == (8, 96)
    assert np.array_equal(a.data[:4], b.data[:4])
    assert not np.array_equal(a.data[4:], b.data[4:])
    assert a == synth_pseudo_speech(["min", "draws"])


def test_pseudo_speech_concatenates():
    ab = synth_pseudo_speech(["what", "is", "the"])
    parts = np.concatenate([synth_pseudo_speech(["what"]).data, synth_pseudo_speech(["is", "the"]).data])
    assert np.array_equal(ab.data, parts)


def test_pseudo_speech_seed_and_frames():
    cfg = PseudoTTSConfig(frames_per_token=3, seed=5)
    f = synth_pseudo_speech(["a", "b"], cfg)
    assert f.n_frames == 6
    assert not np.array_equal(f.data, synth_pseudo_speech(["a", "b"], PseudoTTSConfig(3, seed=6)).data)
    assert f.data.min() >= -4 and f.data.max() <= 4


def test_pseudo_speech_no_collisions():
    blocks = {synth_pseudo_speech([f"w{i}"]).data.tobytes() for i in range(1000)}
    assert len(blocks) == 1000


def test_pseudo_speech_empty():
    with pytest.raises(EmptyInput):
        synth_pseudo_speech([])


def test_feature_file_round_trip(tmp_path):
    f = synth_pseudo_speech(["show", "the", "wins"])
    write_features(tmp_path / "x.sqlf", f)
    raw = (tmp_path / "x.sqlf").read_bytes()
    assert raw[:5] == b"SQLF1"
    assert len(raw) == 5 + 8 + 12 * 96 * 4
    assert read_features(tmp_path / "x.sqlf") == f


def test_feature_file_bad_magic(tmp_path):
    (tmp_path / "bad.sqlf").write_bytes(b"NOPE!" + b"\0" * 8)
    with pytest.raises(FeatureFormatError):
        read_features(tmp_path / "bad.sqlf")


def test_wav_round_trip(tmp_path):
    w = Waveform(0.3 * np.sin(np.linspace(0, 200, 4000)))
    write_wav(tmp_path / "a.wav", w)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, w.samples, atol=1e-4)


def test_wrong_column_count():
    with pytest.raises(FeatureFormatError):
        SpeechFeatures(np.zeros((3, 40)))
