"""Tiny bundled speech corpus.

The utterances are produced by a small formant synthesizer driven by the
phone sequence of each transcript, so the playback audio is a deterministic
function of its text. Two user voices (one for train, one for test) and one
playback voice mirror the train/test speaker split of the full-size setup.

``python -m tec.corpus <dir>`` regenerates the bundled files.
"""

from __future__ import annotations

import json
import os
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .dsp import Waveform, write_wav
from .phonemes import g2p

SAMPLE_RATE = 16000

# (F1, F2, F3) in Hz; diphthongs glide to a second triple
_VOWELS: Dict[str, Tuple[Tuple[float, float, float], ...]] = {
    "AA": ((730, 1090, 2440),), "AE": ((660, 1720, 2410),), "AH": ((640, 1190, 2390),),
    "AO": ((570, 840, 2410),), "EH": ((530, 1840, 2480),), "ER": ((490, 1350, 1690),),
    "IH": ((390, 1990, 2550),), "IY": ((270, 2290, 3010),), "UH": ((440, 1020, 2240),),
    "UW": ((300, 870, 2240),), "AW": ((730, 1090, 2440), (440, 1020, 2240)),
    "AY": ((730, 1090, 2440), (390, 1990, 2550)), "EY": ((530, 1840, 2480), (270, 2290, 3010)),
    "OW": ((570, 840, 2410), (300, 870, 2240)), "OY": ((570, 840, 2410), (390, 1990, 2550)),
}
_SONORANTS = {
    "W": (300, 610, 2200), "Y": (280, 2200, 2950), "R": (420, 1300, 1600),
    "L": (360, 1000, 2700), "M": (280, 1000, 2200), "N": (280, 1700, 2600),
    "NG": (280, 2000, 2700),
}
# noise band centre (Hz), voiced flag
_FRICATIVES = {
    "S": (5500, False), "Z": (5500, True), "SH": (3000, False), "ZH": (3000, True),
    "F": (6500, False), "V": (6500, True), "TH": (6000, False), "DH": (6000, True),
    "HH": (1800, False),
}
_STOPS = {
    "P": (1000, False), "B": (1000, True), "T": (4500, False), "D": (4500, True),
    "K": (2500, False), "G": (2500, True), "CH": (3200, False), "JH": (3200, True),
}
_NOISE_BANDS = (1000.0, 1800.0, 2500.0, 3000.0, 3200.0, 4500.0, 5500.0, 6000.0, 6500.0)


@dataclass(frozen=True)
class Voice:
    name: str
    f0_hz: float
    formant_scale: float
    rate: float = 1.0


VOICES = {
    "user_a": Voice("user_a", 205.0, 1.12, 1.35),
    "user_b": Voice("user_b", 165.0, 1.06, 1.3),
    "tts": Voice("tts", 115.0, 1.0, 1.0),
}

CLEAN_UTTERANCES = [
    ("train", "user_a", "what time is it"),
    ("train", "user_a", "turn on the lights"),
    ("train", "user_a", "play some music"),
    ("train", "user_a", "stop"),
    ("train", "user_a", "call mom"),
    ("train", "user_a", "next song"),
    ("train", "user_a", "turn it down"),
    ("train", "user_a", "cancel that"),
    ("test", "user_b", "set a timer"),
    ("test", "user_b", "what is the weather"),
    ("test", "user_b", "pause the music"),
]
PLAYBACK_UTTERANCES = [
    ("train", "tts", "it is three o clock"),
    ("train", "tts", "okay playing music"),
    ("train", "tts", "the lights are on"),
    ("train", "tts", "calling mom now"),
    ("test", "tts", "the weather today is sunny with a high of seventy degrees"),
    ("test", "tts", "here is your timer for ten minutes starting now"),
    ("test", "tts", "sure i will pause the music and resume it later for you"),
]


def _durations(phone: str) -> float:
    if phone in _VOWELS:
        return 0.13 if len(_VOWELS[phone]) > 1 else 0.105
    if phone in _SONORANTS:
        return 0.07
    if phone in _FRICATIVES:
        return 0.095
    if phone in _STOPS:
        return 0.085
    return 0.06  # letter fallback tokens


def _smooth(track: np.ndarray, width: int) -> np.ndarray:
    kernel = np.ones(width) / width
    padded = np.pad(track, (width // 2, width - 1 - width // 2), mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def _band_noise(n: int, centre: float, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    bw = 0.35 * centre
    spec *= np.exp(-0.5 * ((f - centre) / bw) ** 2)
    out = np.fft.irfft(spec, n)
    return out / (np.std(out) + 1e-12)


def synthesize(text: str, voice: Voice) -> np.ndarray:
    """Formant-synthesize a transcript; returns float samples at 16 kHz."""
    phones = g2p(text)
    word_breaks = set(np.cumsum([len(g2p(w)) for w in text.split()])[:-1])
    rng = np.random.default_rng(zlib.crc32(f"{voice.name}|{text}".encode()))
    segs = []
    for i, ph in enumerate(phones):
        if i in word_breaks:
            segs.append(("pause", 0.03))
        segs.append((ph, _durations(ph) / voice.rate))
    lead = int(0.05 * SAMPLE_RATE)
    total = lead + sum(int(d * SAMPLE_RATE) for _, d in segs) + lead
    formants = np.zeros((total, 3)) + np.array([500.0, 1500.0, 2500.0])
    voicing = np.zeros(total)
    noise = np.zeros((total, len(_NOISE_BANDS)))
    pos = lead
    for ph, dur in segs:
        n = int(dur * SAMPLE_RATE)
        sl = slice(pos, pos + n)
        if ph in _VOWELS:
            tracks = _VOWELS[ph]
            a = np.array(tracks[0]) * voice.formant_scale
            b = np.array(tracks[-1]) * voice.formant_scale
            ramp = np.linspace(0.0, 1.0, n)[:, None]
            formants[sl] = a + (b - a) * ramp
            voicing[sl] = 1.0
        elif ph in _SONORANTS:
            formants[sl] = np.array(_SONORANTS[ph]) * voice.formant_scale
            voicing[sl] = 0.45 if ph in ("M", "N", "NG") else 0.6
        elif ph in _FRICATIVES:
            centre, voiced = _FRICATIVES[ph]
            noise[sl, _NOISE_BANDS.index(centre)] = 0.35
            voicing[sl] = 0.25 if voiced else 0.0
        elif ph in _STOPS:
            centre, voiced = _STOPS[ph]
            closure = int(0.5 * n)
            burst = slice(pos + closure, pos + n)
            noise[burst, _NOISE_BANDS.index(centre)] = 0.5
            voicing[pos:pos + closure] = 0.15 if voiced else 0.0
        elif ph != "pause":
            formants[sl] = np.array([500.0, 1500.0, 2500.0]) * voice.formant_scale
            voicing[sl] = 0.5
        pos += n
    w = int(0.012 * SAMPLE_RATE)
    for k in range(3):
        formants[:, k] = _smooth(formants[:, k], w)
    voicing = _smooth(voicing, w)
    for k in range(noise.shape[1]):
        noise[:, k] = _smooth(noise[:, k], w // 2)

    t = np.arange(total) / SAMPLE_RATE
    f0 = voice.f0_hz * (1.1 - 0.2 * t / t[-1]) * (1.0 + 0.02 * np.sin(2 * np.pi * 4.5 * t))
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    voiced = np.zeros(total)
    bws = np.array([90.0, 110.0, 170.0])
    gains = np.array([1.0, 0.6, 0.3])
    for k in range(1, int(7000 / voice.f0_hz) + 1):
        fk = k * f0
        env = np.zeros(total)
        for j in range(3):
            env += gains[j] / (1.0 + ((fk - formants[:, j]) / bws[j]) ** 2)
        env *= fk < 7500
        voiced += env * np.sin(k * phase) / np.sqrt(k)
    out = voicing * voiced / 3.0
    for k, centre in enumerate(_NOISE_BANDS):
        if np.any(noise[:, k] > 0):
            out += noise[:, k] * _band_noise(total, centre, rng)
    out += 1e-3 * rng.standard_normal(total)
    return 0.5 * out / np.max(np.abs(out))


def data_dir() -> Path:
    """Bundled corpus location, overridable with TEC_DATA_DIR."""
    env = os.environ.get("TEC_DATA_DIR")
    if env:
        return Path(env)
    return Path(__file__).resolve().parent / "data" / "corpus"


def load_manifest(path) -> List[dict]:
    """Read a JSON-lines manifest; relative paths resolve against its folder."""
    path = Path(path)
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        for key in list(row):
            if key == "path" or key.endswith("_path"):
                row[key] = str((path.parent / row[key]).resolve())
        rows.append(row)
    return rows


def write_corpus(out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    for manifest, utts, prefix in (("clean.jsonl", CLEAN_UTTERANCES, "clean"),
                                   ("playback.jsonl", PLAYBACK_UTTERANCES, "playback")):
        lines = []
        for i, (split, voice, text) in enumerate(utts):
            uid = f"{prefix}{i:02d}"
            rel = f"wav/{uid}.wav"
            write_wav(out_dir / rel, Waveform(synthesize(text, VOICES[voice]), SAMPLE_RATE))
            lines.append(json.dumps({"id": uid, "path": rel, "text": text, "split": split,
                                     "speaker": voice}, sort_keys=True))
        (out_dir / manifest).write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    write_corpus(sys.argv[1] if len(sys.argv) > 1 else data_dir())
