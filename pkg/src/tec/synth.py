"""Synthetic microphone mixtures: x(n) = z(n) + g * (y * h)(n).

A shoebox image-source simulator provides h; user-supplied RIR WAV files can
be listed in the rooms config instead.
"""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import phonemes
from .dsp import Waveform, convolve, read_wav, write_wav

log = logging.getLogger(__name__)

MIX_PEAK = 0.95


@dataclass(frozen=True)
class RoomConfig:
    dimensions_m: Tuple[float, float, float]
    source_pos_m: Tuple[float, float, float]
    mic_pos_m: Tuple[float, float, float]
    absorption: float = 0.5
    max_order: int = 3
    speed_of_sound_mps: float = 343.0

    def __post_init__(self):
        dims = np.asarray(self.dimensions_m, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise ValueError(f"degenerate room dimensions {self.dimensions_m}")
        for label, pos in (("source", self.source_pos_m), ("mic", self.mic_pos_m)):
            p = np.asarray(pos, dtype=float)
            if p.shape != (3,) or np.any(p <= 0) or np.any(p >= dims):
                raise ValueError(f"{label} position {pos} not strictly inside room {self.dimensions_m}")
        if not 0 < self.absorption <= 1:
            raise ValueError("absorption must be in (0, 1]")
        if self.max_order < 0:
            raise ValueError("max_order must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "RoomConfig":
        return cls(tuple(d["dimensions_m"]), tuple(d["source_pos_m"]), tuple(d["mic_pos_m"]),
                   float(d.get("absorption", 0.5)), int(d.get("max_order", 3)),
                   float(d.get("speed_of_sound_mps", 343.0)))


@dataclass
class Rir:
    taps: np.ndarray
    sample_rate_hz: int = 16000
    rir_id: str = ""

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        energy = float(np.sum(self.taps ** 2))
        if not np.isfinite(energy) or energy <= 0:
            raise ValueError("RIR energy must be finite and positive")


def image_sources(cfg: RoomConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Image positions (M, 3) and their reflection counts (M,) up to max_order."""
    n = cfg.max_order
    idx = np.arange(-n, n + 1)
    dims = np.asarray(cfg.dimensions_m, dtype=float)
    src = np.asarray(cfg.source_pos_m, dtype=float)
    per_axis_pos, per_axis_refl = [], []
    for a in range(3):
        pos, refl = [], []
        for q in idx:
            for u in (0, 1):
                pos.append((1 - 2 * u) * src[a] + 2 * q * dims[a])
                refl.append(abs(q - u) + abs(q))
        per_axis_pos.append(np.array(pos))
        per_axis_refl.append(np.array(refl))
    px, py, pz = np.meshgrid(*per_axis_pos, indexing="ij")
    rx, ry, rz = np.meshgrid(*per_axis_refl, indexing="ij")
    order = (rx + ry + rz).ravel()
    keep = order <= n
    positions = np.stack([px.ravel(), py.ravel(), pz.ravel()], axis=1)[keep]
    return positions, order[keep]


def generate_rir(cfg: RoomConfig, seed: int = 0, sample_rate_hz: int = 16000) -> Rir:
    """Shoebox image-source RIR.

    Each image contributes (1 - absorption) ** reflections / distance at
    sample round(distance / c * fs). The model is deterministic; ``seed`` is
    accepted so sampled room distributions can pass their stream through.
    """
    del seed
    positions, order = image_sources(cfg)
    dist = np.linalg.norm(positions - np.asarray(cfg.mic_pos_m, dtype=float), axis=1)
    delays = np.round(dist / cfg.speed_of_sound_mps * sample_rate_hz).astype(np.int64)
    amps = (1.0 - cfg.absorption) ** order / dist
    taps = np.zeros(int(delays.max()) + 1)
    np.add.at(taps, delays, amps)
    # fully absorbed images leave zero taps at the tail
    return Rir(taps[:np.flatnonzero(taps)[-1] + 1], sample_rate_hz)


def load_rir(path) -> Rir:
    w = read_wav(path)
    return Rir(w.samples, w.sample_rate_hz, Path(path).stem)


def apply_echo_path(y: Waveform, h: Rir) -> Waveform:
    if y.sample_rate_hz != h.sample_rate_hz:
        raise ValueError(f"sample rate mismatch: playback {y.sample_rate_hz} vs RIR {h.sample_rate_hz}")
    return Waveform(convolve(y.samples, h.taps), y.sample_rate_hz)


def pad_to_equal_length(a: Waveform, b: Waveform) -> Tuple[Waveform, Waveform]:
    if a.sample_rate_hz != b.sample_rate_hz:
        raise ValueError("sample rate mismatch")
    n = max(len(a), len(b))
    return (Waveform(np.pad(a.samples, (0, n - len(a))), a.sample_rate_hz),
            Waveform(np.pad(b.samples, (0, n - len(b))), b.sample_rate_hz))


def echo_gain(z: np.ndarray, echo: np.ndarray, snr_db: float) -> float:
    ez = float(np.dot(z, z))
    ee = float(np.dot(echo, echo))
    if ez <= 0 or ee <= 0:
        raise ValueError("mixing needs nonzero energy in both signals")
    return float(np.sqrt(ez / (ee * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(z: Waveform, echo: Waveform, snr_db: float = 0.0,
               normalize: bool = True) -> Tuple[Waveform, float]:
    """Scale ``echo`` by g to reach ``snr_db`` against ``z`` and add.

    Energies are measured over the padded signals, i.e. on the echo as it
    reaches the microphone. When ``normalize`` is set and the sum would clip,
    the whole mixture is divided by its peak; g is returned unscaled.
    """
    zp, ep = pad_to_equal_length(z, echo)
    g = echo_gain(zp.samples, ep.samples, snr_db)
    mix = zp.samples + g * ep.samples
    peak = np.max(np.abs(mix))
    if normalize and peak > 1.0:
        mix = mix / peak
    return Waveform(mix, z.sample_rate_hz), g


class MixtureParts(NamedTuple):
    mixture: np.ndarray     # after peak normalization
    clean: np.ndarray       # padded clean, same normalization
    echo: np.ndarray        # y * h, unscaled
    gain: float             # g before normalization
    norm: float             # normalization factor applied to everything


def synthesize_mixture(clean: Waveform, playback: Waveform, rir: Rir, snr_db: float = 0.0) -> MixtureParts:
    echo = apply_echo_path(playback, rir)
    raw, g = mix_at_snr(clean, echo, snr_db, normalize=False)
    zp, _ = pad_to_equal_length(clean, echo)
    peak = float(np.max(np.abs(raw.samples)))
    norm = MIX_PEAK / peak if peak > MIX_PEAK else 1.0
    return MixtureParts(raw.samples * norm, zp.samples * norm, echo.samples, g, norm)


# -- datasets ------------------------------------------------------------------

@dataclass
class MixtureRecord:
    id: str
    mixture_path: str
    clean_path: str
    playback_path: str
    text: str
    phonemes: str
    snr_db: float = 0.0
    rir_id: str = ""
    seed: int = 0
    clean_text: str = ""
    echo_gain: float = 1.0
    split: str = "train"
    extra: Dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("extra")
        d.update(self.extra)
        return json.dumps(d, sort_keys=True)


def load_records(manifest_path) -> List[MixtureRecord]:
    from .corpus import load_manifest

    known = set(MixtureRecord.__dataclass_fields__) - {"extra"}
    out = []
    for row in load_manifest(manifest_path):
        base = {k: v for k, v in row.items() if k in known}
        extra = {k: v for k, v in row.items() if k not in known}
        out.append(MixtureRecord(**base, extra=extra))
    return out


def load_rooms(spec: dict, seed: int, sample_rate_hz: int = 16000) -> List[Rir]:
    """Build the RIR pool described by a rooms config document.

    Keys: ``rooms`` (explicit RoomConfig dicts), ``rir_wavs`` (paths), and
    ``sample`` (``count`` rooms drawn from dimension/absorption ranges).
    """
    rirs: List[Rir] = []
    for i, room in enumerate(spec.get("rooms", [])):
        rir = generate_rir(RoomConfig.from_dict(room), seed, sample_rate_hz)
        rir.rir_id = f"room{i:03d}"
        rirs.append(rir)
    for path in spec.get("rir_wavs", []):
        rirs.append(load_rir(path))
    sample = spec.get("sample")
    if sample:
        rng = np.random.default_rng([seed, zlib.crc32(b"rooms")])
        for i in range(int(sample["count"])):
            room = sample_room(sample, rng)
            rir = generate_rir(room, seed, sample_rate_hz)
            rir.rir_id = f"sampled{i:03d}"
            rirs.append(rir)
    if not rirs:
        raise ValueError("rooms config yields no RIRs")
    return rirs


def sample_room(sample: dict, rng: np.random.Generator) -> RoomConfig:
    dims = np.array([rng.uniform(lo, hi) for lo, hi in sample.get("dimensions_m", [[3, 6], [3, 6], [2.5, 3.5]])])
    margin = 0.5
    src = rng.uniform(margin, dims - margin)
    mic = rng.uniform(margin, dims - margin)
    lo, hi = sample.get("absorption", [0.3, 0.8])
    return RoomConfig(tuple(dims), tuple(src), tuple(mic), float(rng.uniform(lo, hi)),
                      int(sample.get("max_order", 3)))


DEFAULT_ROOMS = {
    "rooms": [
        {"dimensions_m": [4.0, 5.0, 3.0], "source_pos_m": [1.0, 1.5, 1.2],
         "mic_pos_m": [1.4, 1.8, 1.1], "absorption": 0.6, "max_order": 3},
        {"dimensions_m": [6.0, 4.0, 2.8], "source_pos_m": [2.0, 1.0, 1.0],
         "mic_pos_m": [2.3, 1.5, 1.0], "absorption": 0.45, "max_order": 3},
        {"dimensions_m": [3.5, 3.5, 2.6], "source_pos_m": [0.8, 0.8, 1.5],
         "mic_pos_m": [1.0, 1.2, 1.4], "absorption": 0.7, "max_order": 2},
    ]
}


def assign(clean_id: str, n_playback: int, n_rirs: int, seed: int) -> Tuple[int, int]:
    """Uniform (interferer, RIR) indices drawn from the record's own stream."""
    rng = np.random.default_rng([seed, zlib.crc32(clean_id.encode())])
    return int(rng.integers(n_playback)), int(rng.integers(n_rirs))


def _build_one(i: int, clean: dict, playbacks: List[dict], rirs: List[Rir], seed: int,
               snr_db: float, out_dir: Path) -> MixtureRecord:
    pi, ri = assign(clean["id"], len(playbacks), len(rirs), seed)
    pb, rir = playbacks[pi], rirs[ri]
    text = pb.get("text")
    if not text:
        raise ValueError(f"playback {pb.get('id')} has no transcript")
    clean_w = read_wav(clean["path"])
    play_w = read_wav(pb["path"])
    parts = synthesize_mixture(clean_w, play_w, rir, snr_db)
    rid = f"mix_{clean['id']}"
    rate = clean_w.sample_rate_hz
    for sub in ("mixture", "clean", "playback"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    n_clean = len(clean_w)
    write_wav(out_dir / "mixture" / f"{rid}.wav", Waveform(parts.mixture, rate))
    write_wav(out_dir / "clean" / f"{rid}.wav", Waveform(parts.clean[:n_clean], rate))
    write_wav(out_dir / "playback" / f"{rid}.wav", play_w)
    return MixtureRecord(
        id=rid, mixture_path=f"mixture/{rid}.wav", clean_path=f"clean/{rid}.wav",
        playback_path=f"playback/{rid}.wav", text=text,
        phonemes=" ".join(phonemes.g2p(text)), snr_db=snr_db, rir_id=rir.rir_id, seed=seed,
        clean_text=clean.get("text", ""), echo_gain=round(parts.gain * parts.norm, 12),
        split=clean.get("split", "train"),
    )


def build_dataset(clean_rows: Sequence[dict], playback_rows: Sequence[dict], rirs: Sequence[Rir],
                  seed: int, out_dir, snr_db: float = 0.0, threads: int = 1
                  ) -> Tuple[List[MixtureRecord], List[Tuple[str, str]]]:
    """Write one mixture per clean utterance plus ``manifest.jsonl``.

    Each record draws its interferer and RIR from a stream keyed by
    (seed, clean id), so results do not depend on thread count. Returns the
    records and (id, error) pairs for records that failed.
    """
    if not clean_rows or not playback_rows:
        raise ValueError("clean and playback manifests must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    playbacks = list(playback_rows)
    rirs = list(rirs)

    def job(args):
        i, row = args
        try:
            return _build_one(i, row, playbacks, rirs, seed, snr_db, out_dir), None
        except (ValueError, OSError) as exc:
            return None, (row.get("id", str(i)), str(exc))

    items = list(enumerate(clean_rows))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, items))
    else:
        results = [job(it) for it in items]
    records = sorted((r for r, _ in results if r is not None), key=lambda r: r.id)
    failures = [f for _, f in results if f is not None]
    for rid, err in failures:
        log.warning("record %s failed: %s", rid, err)
    (out_dir / "manifest.jsonl").write_text("".join(r.to_json() + "\n" for r in records))
    return records, failures
