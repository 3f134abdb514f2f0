import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dehubert.audio import (ChannelCountError, EmptyPayloadError, NoiseBank,
                            NoiseEntry, SampleRateMismatchError, UnsupportedFormatError,
                            WavHeaderError, Waveform, ZeroPowerError, load_corpus, load_wav,
                            make_augmented_pair, mix_at_snr, read_noise_manifest, save_wav,
                            utterance_rng, write_corpus_manifest, write_noise_manifest)


def wav_bytes(pcm, channels=1, rate=16000, bits=16, fmt_code=1):
    data = np.asarray(pcm, dtype="<i2").tobytes()
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_code, channels, rate, rate * block, block, bits)
    return (b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE" + b"fmt " + struct.pack("<I", 16)
            + fmt + b"data" + struct.pack("<I", len(data)) + data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(n=16000, amp=0.3, f=440.0, rate=16000):
    t = np.arange(n) / rate
    return Waveform(amp * np.sin(2 * np.pi * f * t), rate)


def test_load_wav_header_round_trip(tmp_path, rng):
    pcm = rng.integers(-32768, 32767, size=16000)
    p = tmp_path / "a.wav"
    p.write_bytes(wav_bytes(pcm))
    w = load_wav(p)
    assert len(w) == 16000
    assert w.sample_rate == 16000


def test_load_wav_scaling(tmp_path):
    p = tmp_path / "a.wav"
    p.write_bytes(wav_bytes([-32768, 16384, 0]))
    np.testing.assert_array_equal(load_wav(p).samples, [-1.0, 0.5, 0.0])


@pytest.mark.parametrize("kwargs, err", [
    ({"channels": 2}, ChannelCountError),
    ({"bits": 8}, UnsupportedFormatError),
    ({"fmt_code": 3}, UnsupportedFormatError),
])
def test_load_wav_rejects_formats(tmp_path, kwargs, err):
    p = tmp_path / "bad.wav"
    p.write_bytes(wav_bytes([0, 1, 2, 3], **kwargs))
    with pytest.raises(err):
        load_wav(p)


def test_load_wav_errors_are_distinct(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(b"not a wav at all")
    with pytest.raises(WavHeaderError):
        load_wav(p)
    p.write_bytes(wav_bytes([]))
    with pytest.raises(EmptyPayloadError):
        load_wav(p)
    assert not issubclass(EmptyPayloadError, WavHeaderError)


def test_save_load_round_trip(tmp_path):
    w = tone()
    save_wav(tmp_path / "t.wav", w)
    back = load_wav(tmp_path / "t.wav")
    assert np.max(np.abs(back.samples - w.samples)) <= 0.5 / 32768 + 1e-12


def test_equal_power_zero_db_gain_is_one(rng):
    speech = Waveform(rng.choice([-0.5, 0.5], size=4000))
    noise = Waveform(rng.choice([-0.5, 0.5], size=4000))
    _, comp = mix_at_snr(speech, noise, 0.0, rng, return_components=True)
    assert comp.gain == pytest.approx(1.0, abs=1e-12)


def test_twenty_db_gain_and_measured_snr(rng):
    speech = Waveform(rng.choice([-0.3, 0.3], size=8000))
    noise = Waveform(rng.choice([-0.3, 0.3], size=8000))
    _, comp = mix_at_snr(speech, noise, 20.0, rng, return_components=True)
    assert comp.gain == pytest.approx(0.1, rel=1e-12)
    # oracle: recompute the power of the scaled noise directly
    measured = 10 * np.log10(np.mean(comp.speech ** 2) / np.mean(comp.noise ** 2))
    assert abs(measured - 20.0) < 0.1


def test_zero_power_and_rate_errors(rng):
    speech = tone(1000)
    with pytest.raises(ZeroPowerError):
        mix_at_snr(speech, Waveform(np.zeros(1000)), 5.0, rng)
    with pytest.raises(ZeroPowerError):
        mix_at_snr(Waveform(np.zeros(1000)), tone(1000), 5.0, rng)
    with pytest.raises(SampleRateMismatchError):
        mix_at_snr(speech, tone(1000, rate=8000), 5.0, rng)


def test_short_noise_is_tiled_and_length_preserved(rng):
    speech = tone(5000)
    noise = Waveform(rng.normal(0, 0.1, size=333))
    out = mix_at_snr(speech, noise, 3.0, rng)
    assert len(out) == len(speech)


def test_peak_normalisation_keeps_snr(rng):
    speech = Waveform(np.full(2000, 0.9) * np.sign(rng.normal(size=2000)))
    noise = Waveform(rng.normal(0, 0.5, size=3000).clip(-1, 1))
    mixed, comp = mix_at_snr(speech, noise, 0.0, rng, return_components=True)
    assert np.max(np.abs(mixed.samples)) <= 1.0
    assert abs(comp.snr_db) < 1e-9
    np.testing.assert_allclose(mixed.samples, comp.speech + comp.noise, atol=1e-15)


def make_bank(rng, n=3):
    return NoiseBank([NoiseEntry(f"n{i}", Waveform(rng.normal(0, 0.1, size=7000).clip(-1, 1)),
                                 "TypeA" if i % 2 else "TypeB") for i in range(n)])


def test_pair_with_two_noise_bank_always_distinct(rng):
    bank = make_bank(rng, 2)
    speech = tone(3000)
    for seed in range(25):
        pair = make_augmented_pair(speech, bank, (0, 25), np.random.default_rng(seed))
        assert pair.noise_a_id != pair.noise_b_id


def test_pair_snrs_in_range_and_lengths(rng):
    bank = make_bank(rng)
    speech = tone(3000)
    for seed in range(25):
        pair = make_augmented_pair(speech, bank, (0, 25), np.random.default_rng(seed))
        assert 0 <= pair.snr_a_db <= 25 and 0 <= pair.snr_b_db <= 25
        assert len(pair.clean) == len(pair.noisy_a) == len(pair.noisy_b)


def test_pair_determinism(rng):
    bank = make_bank(rng)
    speech = tone(3000)
    p1 = make_augmented_pair(speech, bank, (0, 25), np.random.default_rng(7))
    p2 = make_augmented_pair(speech, bank, (0, 25), np.random.default_rng(7))
    assert p1.noisy_a.samples.tobytes() == p2.noisy_a.samples.tobytes()
    assert p1.noisy_b.samples.tobytes() == p2.noisy_b.samples.tobytes()
    assert (p1.snr_a_db, p1.noise_a_id) == (p2.snr_a_db, p2.noise_a_id)


def test_pair_errors(rng):
    with pytest.raises(ValueError):
        NoiseBank([NoiseEntry("only", tone(100))])
    bank = make_bank(rng)
    with pytest.raises(ValueError):
        make_augmented_pair(tone(100), bank, (10, 5), rng)


@settings(max_examples=40, deadline=None)
@given(snr=st.floats(0.0, 25.0), seed=st.integers(0, 2 ** 32 - 1),
       n_speech=st.integers(400, 3000), n_noise=st.integers(50, 5000))
def test_measured_snr_property(snr, seed, n_speech, n_noise):
    rng = np.random.default_rng(seed)
    speech = Waveform(rng.uniform(-0.8, 0.8, size=n_speech))
    noise = Waveform(rng.uniform(-0.8, 0.8, size=n_noise))
    mixed, comp = mix_at_snr(speech, noise, snr, rng, return_components=True)
    assert len(mixed) == n_speech
    assert abs(comp.snr_db - snr) < 0.1
    assert np.max(np.abs(mixed.samples)) <= 1.0


def test_utterance_rng_streams_independent():
    a = utterance_rng(1, "utt1").random(4)
    b = utterance_rng(1, "utt2").random(4)
    c = utterance_rng(1, "utt1").random(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_manifests(tmp_path, rng):
    save_wav(tmp_path / "u.wav", tone(1600))
    write_corpus_manifest(tmp_path / "corpus.tsv", [("u0", "u.wav", 1600)])
    corpus = load_corpus(tmp_path / "corpus.tsv")
    assert corpus[0][0] == "u0" and len(corpus[0][1]) == 1600
    for i in range(2):
        save_wav(tmp_path / f"n{i}.wav", Waveform(rng.normal(0, 0.1, 800)))
    write_noise_manifest(tmp_path / "noise.tsv", [("n0", "n0.wav", "TypeA"), ("n1", "n1.wav", "TypeB")])
    bank = read_noise_manifest(tmp_path / "noise.tsv")
    assert bank.ids == ["n0", "n1"] and bank["n1"].category == "TypeB"
