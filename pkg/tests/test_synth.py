import json
import math

import numpy as np
import pytest

from tec.corpus import data_dir, load_manifest
from tec.dsp import Waveform, convolve, write_wav
from tec.synth import (DEFAULT_ROOMS, MIX_PEAK, RoomConfig, Rir, apply_echo_path, assign, build_dataset,
                       generate_rir, load_records, load_rooms, mix_at_snr, pad_to_equal_length, sample_room,
                       synthesize_mixture)

SR = 16000
ROOM = dict(dimensions_m=(4.0, 5.0, 3.0), source_pos_m=(1.0, 1.5, 1.2), mic_pos_m=(2.5, 3.0, 1.6))


def image_oracle(cfg, fs=SR):
    """Triple loop over image indices and wall parities."""
    taps = {}
    n = cfg.max_order
    L, src, mic = cfg.dimensions_m, cfg.source_pos_m, cfg.mic_pos_m
    for nx in range(-n, n + 1):
        for ny in range(-n, n + 1):
            for nz in range(-n, n + 1):
                for u in (0, 1):
                    for v in (0, 1):
                        for w in (0, 1):
                            refl = (abs(nx - u) + abs(nx) + abs(ny - v) + abs(ny)
                                    + abs(nz - w) + abs(nz))
                            if refl > n:
                                continue
                            img = ((1 - 2 * u) * src[0] + 2 * nx * L[0],
                                   (1 - 2 * v) * src[1] + 2 * ny * L[1],
                                   (1 - 2 * w) * src[2] + 2 * nz * L[2])
                            d = math.dist(img, mic)
                            k = round(d / cfg.speed_of_sound_mps * fs)
                            taps[k] = taps.get(k, 0.0) + (1 - cfg.absorption) ** refl / d
    last = max(k for k, a in taps.items() if a != 0.0)
    out = np.zeros(last + 1)
    for k, a in taps.items():
        if k > last:
            continue
        out[k] = a
    return out


def noise(rng, n):
    return rng.uniform(-0.4, 0.4, size=n)


# -- RIR ----------------------------------------------------------------------------

@pytest.mark.parametrize("order", [0, 1, 3])
def test_full_absorption_leaves_direct_path_only(order):
    cfg = RoomConfig(**ROOM, absorption=1.0, max_order=order)
    rir = generate_rir(cfg)
    d = math.dist(cfg.source_pos_m, cfg.mic_pos_m)
    nz = np.flatnonzero(rir.taps)
    assert list(nz) == [round(d / 343.0 * SR)]
    assert rir.taps[nz[0]] == pytest.approx(1.0 / d)


def test_order_zero_equals_full_absorption():
    a = generate_rir(RoomConfig(**ROOM, absorption=0.4, max_order=0))
    b = generate_rir(RoomConfig(**ROOM, absorption=1.0, max_order=5))
    np.testing.assert_array_equal(a.taps, b.taps)


@pytest.mark.parametrize("absorption", [0.3, 0.7])
def test_rir_matches_image_enumeration(absorption):
    cfg = RoomConfig(**ROOM, absorption=absorption, max_order=2)
    np.testing.assert_allclose(generate_rir(cfg).taps, image_oracle(cfg), atol=1e-12)


def test_rir_is_deterministic():
    cfg = RoomConfig(**ROOM, absorption=0.5, max_order=3)
    assert generate_rir(cfg, 1).taps.tobytes() == generate_rir(cfg, 1).taps.tobytes()


def test_rir_energy_decreases_with_absorption():
    energies = [float(np.sum(generate_rir(RoomConfig(**ROOM, absorption=a, max_order=3)).taps ** 2))
                for a in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)]
    assert all(e1 > e2 for e1, e2 in zip(energies, energies[1:]))


@pytest.mark.parametrize("bad", [
    dict(dimensions_m=(0.0, 5.0, 3.0), source_pos_m=(1, 1, 1), mic_pos_m=(2, 2, 2)),
    dict(dimensions_m=(4.0, 5.0, 3.0), source_pos_m=(5, 1, 1), mic_pos_m=(2, 2, 2)),
    dict(dimensions_m=(4.0, 5.0, 3.0), source_pos_m=(1, 1, 1), mic_pos_m=(2, 2, 2), absorption=0.0),
    dict(dimensions_m=(4.0, 5.0, 3.0), source_pos_m=(1, 1, 1), mic_pos_m=(2, 2, 2), max_order=-1),
])
def test_room_validation(bad):
    with pytest.raises(ValueError):
        RoomConfig(**bad)


def test_rir_requires_energy():
    with pytest.raises(ValueError):
        Rir(np.zeros(10))


# -- echo path, padding, mixing --------------------------------------------------------

def test_unit_impulse_echo_is_identity(rng):
    y = Waveform(noise(rng, 300))
    np.testing.assert_allclose(apply_echo_path(y, Rir([1.0])).samples, y.samples, atol=1e-15)


def test_delayed_half_impulse(rng):
    y = Waveform(noise(rng, 300))
    h = np.zeros(101)
    h[100] = 0.5
    out = apply_echo_path(y, Rir(h)).samples
    assert len(out) == 400
    np.testing.assert_allclose(out[100:], 0.5 * y.samples, atol=1e-15)
    np.testing.assert_allclose(out[:100], 0.0, atol=1e-15)


def test_echo_path_matches_direct_convolution(rng):
    y, h = noise(rng, 500), rng.normal(size=32)
    direct = np.array([sum(y[i - j] * h[j] for j in range(32) if 0 <= i - j < 500) for i in range(531)])
    np.testing.assert_allclose(apply_echo_path(Waveform(y), Rir(h)).samples, direct, atol=1e-9)


def test_echo_path_rate_mismatch():
    with pytest.raises(ValueError):
        apply_echo_path(Waveform(np.ones(10), 8000), Rir([1.0], 16000))


def test_padding_cases(rng):
    a, b = Waveform(noise(rng, 100)), Waveform(noise(rng, 150))
    pa, pb = pad_to_equal_length(a, b)
    assert len(pa) == len(pb) == 150
    np.testing.assert_array_equal(pa.samples[100:], 0.0)
    np.testing.assert_array_equal(pb.samples, b.samples)
    same = pad_to_equal_length(a, a)
    np.testing.assert_array_equal(same[0].samples, a.samples)


def test_padding_preserves_longer_prefix(rng):
    a, b = Waveform(noise(rng, 100)), Waveform(noise(rng, 150))
    mix, _ = mix_at_snr(a, b, normalize=False)
    g = math.sqrt(np.sum(a.samples ** 2) / np.sum(b.samples ** 2))
    np.testing.assert_allclose(mix.samples[100:], g * b.samples[100:], atol=1e-15)


def test_equal_energy_gives_unit_gain(rng):
    z = noise(rng, 400)
    _, g = mix_at_snr(Waveform(z), Waveform(-z[::-1]))
    assert g == pytest.approx(1.0, abs=1e-12)


def test_quadruple_energy_gives_half_gain(rng):
    z = noise(rng, 400)
    _, g = mix_at_snr(Waveform(z), Waveform(2.0 * rng.permutation(z)))
    assert g == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("snr", [0.0, 5.0, -3.0])
def test_measured_snr(rng, snr):
    z, e = Waveform(noise(rng, 700)), Waveform(0.1 * noise(rng, 900))
    mix, g = mix_at_snr(z, e, snr, normalize=False)
    zp, ep = pad_to_equal_length(z, e)
    measured = 10 * np.log10(np.sum(zp.samples ** 2) / np.sum((g * ep.samples) ** 2))
    assert measured == pytest.approx(snr, abs=0.01)
    np.testing.assert_allclose(mix.samples, zp.samples + g * ep.samples)


def test_mix_peak_normalizes(rng):
    z = Waveform(np.full(100, 0.9))
    mix, _ = mix_at_snr(z, Waveform(np.full(100, 0.5)))
    assert np.max(np.abs(mix.samples)) == pytest.approx(1.0)


def test_mix_rejects_silence():
    with pytest.raises(ValueError):
        mix_at_snr(Waveform(np.zeros(10)), Waveform(np.ones(10)))


def test_mixture_reconstruction_over_random_scenes():
    """mixture / norm - g * (y * h) equals the padded clean signal."""
    spec = {"dimensions_m": [[3, 7], [3, 7], [2.4, 3.6]], "absorption": [0.2, 0.9], "max_order": 2}
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        room = sample_room(spec, r)
        rir = generate_rir(room, seed)
        clean = Waveform(noise(r, int(r.integers(2000, 6000))))
        play = Waveform(noise(r, int(r.integers(2000, 6000))))
        parts = synthesize_mixture(clean, play, rir)
        echo = convolve(play.samples, rir.taps)
        n = max(len(echo), len(clean))
        assert len(parts.mixture) == n
        recon = parts.mixture / parts.norm - parts.gain * np.pad(echo, (0, n - len(echo)))
        padded = np.pad(clean.samples, (0, n - len(clean)))
        worst = max(worst, float(np.max(np.abs(recon - padded))))
        assert np.max(np.abs(parts.mixture)) <= MIX_PEAK + 1e-12
    assert worst < 1e-6


# -- dataset building -----------------------------------------------------------------

@pytest.fixture
def tiny_manifests(tmp_path, rng):
    src = tmp_path / "src"
    (src / "wav").mkdir(parents=True)
    clean, play = [], []
    for i in range(5):
        write_wav(src / "wav" / f"c{i}.wav", Waveform(noise(rng, 3000 + 200 * i)))
        clean.append({"id": f"c{i}", "path": f"wav/c{i}.wav", "text": f"query {i}", "split": "train"})
    for i in range(3):
        write_wav(src / "wav" / f"p{i}.wav", Waveform(noise(rng, 4000)))
        play.append({"id": f"p{i}", "path": f"wav/p{i}.wav", "text": "the lights are on"})
    (src / "clean.jsonl").write_text("".join(json.dumps(r) + "\n" for r in clean))
    (src / "playback.jsonl").write_text("".join(json.dumps(r) + "\n" for r in play))
    return load_manifest(src / "clean.jsonl"), load_manifest(src / "playback.jsonl")


def test_one_record_per_clean_utterance(tmp_path, tiny_manifests):
    clean, play = tiny_manifests
    recs, failures = build_dataset(clean, play, load_rooms(DEFAULT_ROOMS, 0), 3, tmp_path / "out")
    assert len(recs) == 5 and failures == []
    loaded = load_records(tmp_path / "out" / "manifest.jsonl")
    assert [r.id for r in loaded] == sorted(r.id for r in recs)
    for r in loaded:
        for p in (r.mixture_path, r.clean_path, r.playback_path):
            assert (tmp_path / "out" / p).exists()
        assert r.snr_db == 0.0 and r.phonemes and r.rir_id.startswith("room")


def test_manifest_fields(tmp_path, tiny_manifests):
    clean, play = tiny_manifests
    build_dataset(clean, play, load_rooms(DEFAULT_ROOMS, 0), 3, tmp_path / "out")
    row = json.loads((tmp_path / "out" / "manifest.jsonl").read_text().splitlines()[0])
    for key in ("id", "mixture_path", "clean_path", "playback_path", "text", "phonemes", "snr_db",
                "rir_id", "seed"):
        assert key in row
    assert not row["mixture_path"].startswith("/")


def test_same_seed_is_byte_identical_across_threads(tmp_path, tiny_manifests):
    clean, play = tiny_manifests
    rirs = load_rooms(DEFAULT_ROOMS, 0)
    build_dataset(clean, play, rirs, 11, tmp_path / "a", threads=1)
    build_dataset(clean, play, rirs, 11, tmp_path / "b", threads=4)
    for rel in ["manifest.jsonl"] + [f"{d}/mix_c{i}.wav" for d in ("mixture", "clean") for i in range(5)]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_different_seeds_change_assignments():
    ids = [f"c{i}" for i in range(5)]
    changed = 0
    for seed in range(100):
        a = [assign(i, 3, 3, seed) for i in ids]
        b = [assign(i, 3, 3, seed + 1000) for i in ids]
        changed += a != b
    assert changed == 100


def test_missing_transcript_is_reported_not_fatal(tmp_path, tiny_manifests):
    clean, play = tiny_manifests
    play = [dict(play[0], text="")]
    recs, failures = build_dataset(clean, play + play, load_rooms(DEFAULT_ROOMS, 0), 0, tmp_path / "o")
    assert recs == [] and len(failures) == 5


def test_rooms_config_variants(tmp_path):
    write_wav(tmp_path / "r.wav", Waveform(np.r_[0.0, 0.5, 0.25]))
    rirs = load_rooms({"rir_wavs": [str(tmp_path / "r.wav")],
                       "sample": {"count": 2, "max_order": 1}}, seed=4)
    assert [r.rir_id for r in rirs] == ["r", "sampled000", "sampled001"]
    with pytest.raises(ValueError):
        load_rooms({}, 0)


def test_bundled_corpus_is_present():
    rows = load_manifest(data_dir() / "clean.jsonl")
    assert len(rows) <= 11 and all(r["text"] for r in rows)
