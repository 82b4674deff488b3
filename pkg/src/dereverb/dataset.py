"""Paired clean/reverberant corpora and their JSON-lines manifests."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from . import SAMPLE_RATE
from .dsp import Waveform, convolve, read_wav, write_wav
from .rir import ROOM_SETS, ROOMS, RT60_RANGES, Rir, RoomSpec, estimate_rt60, sample_scene, simulate_rir

log = logging.getLogger(__name__)

PEAK = 0.9


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DEREVERB_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


@dataclass
class ManifestEntry:
    utt_id: str
    clean_path: str
    reverb_path: str
    rir_path: str | None
    room_id: str
    rt60_target: float
    rt60_measured: float | None
    source_pos: list | None = None
    rt60_flag: bool = False

    def to_json(self, base: Path) -> str:
        d = asdict(self)
        for k in ("clean_path", "reverb_path", "rir_path"):
            if d[k] is not None:
                d[k] = os.path.relpath(d[k], base)
        return json.dumps(d, sort_keys=True)


def write_manifest(entries, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(e.to_json(base) + "\n" for e in entries), encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_manifest(path) -> list[ManifestEntry]:
    """Read a manifest, resolving paths against the manifest's directory."""
    path = Path(path)
    base = path.parent.resolve()
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        d = json.loads(line)
        for k in ("clean_path", "reverb_path", "rir_path"):
            if d.get(k) is not None:
                d[k] = str(base / d[k])
        out.append(ManifestEntry(**d))
    return out


# --- synthetic speech-like clean signals ---------------------------------------

_VOWELS = np.array([
    # F1, F2, F3 (Hz)
    (730, 1090, 2440), (270, 2290, 3010), (530, 1840, 2480), (300, 870, 2240),
    (660, 1720, 2410), (490, 1350, 1690), (570, 840, 2410), (440, 1020, 2240),
])


def _smooth_noise(rng, n, fs, max_hz, scale):
    # sum of a few slow sinusoids
    t = np.arange(n) / fs
    out = np.zeros(n)
    for _ in range(4):
        out += np.sin(2 * np.pi * rng.uniform(0.1, max_hz) * t + rng.uniform(0, 2 * np.pi))
    return scale * out / 4


def _syllable(rng, n, fs, f0_base):
    t = np.arange(n) / fs
    # pitch: declining contour plus jitter-free vibrato-like drift
    f0 = f0_base * (1.0 + rng.uniform(-0.1, 0.15) - 0.15 * t / max(t[-1], 1e-3)) * (1.0 + _smooth_noise(rng, n, fs, 6.0, 0.03))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    a, b = _VOWELS[rng.integers(len(_VOWELS))], _VOWELS[rng.integers(len(_VOWELS))]
    w = np.linspace(0, 1, n)[:, None]
    formants = (1 - w) * a + w * b  # [n, 3] glide between two vowel targets
    bandwidths = np.array([80.0, 110.0, 160.0])
    gains = np.array([1.0, 0.6, 0.35])
    y = np.zeros(n)
    k = 1
    while k * f0.min() < 0.45 * fs and k <= 80:
        fk = k * f0
        amp = np.sum(gains / (1 + ((fk[:, None] - formants) / bandwidths) ** 2), axis=1)
        amp *= (fk < 0.45 * fs) / np.sqrt(k)
        y += amp * np.sin(k * phase)
        k += 1
    attack = min(n // 4, int(0.03 * fs))
    env = np.ones(n)
    env[:attack] = 0.5 - 0.5 * np.cos(np.pi * np.arange(attack) / attack)
    decay = n // 3
    env[-decay:] *= 0.5 + 0.5 * np.cos(np.pi * np.arange(decay) / decay)
    return y * env


def _fricative(rng, n, fs):
    sos = butter(4, rng.uniform(2500, 4500), "highpass", fs=fs, output="sos")
    y = sosfilt(sos, rng.standard_normal(n))
    return 0.3 * y * np.hanning(n)


def synth_utterance(rng, duration, fs=SAMPLE_RATE) -> np.ndarray:
    n_total = int(round(duration * fs))
    out = np.zeros(n_total)
    f0_base = rng.uniform(95, 230)
    pos = int(rng.uniform(0.05, 0.2) * fs)
    while pos < n_total:
        r = rng.random()
        if r < 0.15:
            n = int(rng.uniform(0.06, 0.15) * fs)
            seg = _fricative(rng, n, fs)
        else:
            n = int(rng.uniform(0.12, 0.35) * fs)
            seg = _syllable(rng, n, fs, f0_base) * rng.uniform(0.4, 1.0)
        seg = seg[:n_total - pos]
        out[pos:pos + len(seg)] += seg
        pos += len(seg)
        # inter-syllable gap, sometimes a longer pause
        pos += int((rng.uniform(0.25, 0.6) if rng.random() < 0.2 else rng.uniform(0.03, 0.12)) * fs)
    peak = np.max(np.abs(out))
    return out * (0.7 / peak) if peak > 0 else out


def make_synthetic_clean(count: int, duration: float = 3.0, seed: int = 0, out_dir=None,
                         sample_rate: int = SAMPLE_RATE) -> list:
    """Speech-like test signals: formant-shaped harmonic syllables, fricative
    noise bursts and pauses. Returns waveforms, or file paths if ``out_dir``
    is given."""
    waves = [Waveform(synth_utterance(np.random.default_rng([seed, i]), duration, sample_rate), sample_rate)
             for i in range(count)]
    if out_dir is None:
        return waves
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, w in enumerate(waves):
        p = out_dir / f"synth_{i:05d}.wav"
        write_wav(p, w, "float32")
        paths.append(p)
    return paths


# --- corpus ------------------------------------------------------------------------


@dataclass
class CorpusSpec:
    clean_dir: str
    rooms: dict = field(default_factory=lambda: {k: ROOMS[k] for k in ROOM_SETS["default_train"]})
    rt60_range: tuple = RT60_RANGES["train"]
    pairs_per_clean: int = 1
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if not self.rooms:
            raise ValueError("corpus needs at least one room")
        lo, hi = self.rt60_range
        if lo < 0 or hi < lo:
            raise ValueError("invalid rt60 range")
        if self.split not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {self.split!r}")


def rooms_from_names(names) -> dict:
    if isinstance(names, str):
        names = ROOM_SETS.get(names) or [n.strip() for n in names.split(",")]
    unknown = [n for n in names if n not in ROOMS]
    if unknown:
        raise ValueError(f"unknown rooms {unknown}; choose from {sorted(ROOMS)} or {sorted(ROOM_SETS)}")
    return {n: ROOMS[n] for n in names}


def reverberate(clean: Waveform, rir: Rir) -> tuple[Waveform, Waveform]:
    """Convolve and align one pair.

    The RIR is scaled so its direct path has unit gain, the output is
    advanced by the direct-path delay and trimmed to the clean length, and
    both members are then scaled by the factor that brings the reverberant
    peak to 0.9.
    """
    k0 = rir.direct_index()
    gain = rir.taps[k0]
    if gain == 0:
        k0 = int(np.argmax(np.abs(rir.taps)))
        gain = rir.taps[k0]
    y = convolve(clean, rir).samples[k0:k0 + len(clean)] / gain
    peak = np.max(np.abs(y))
    scale = PEAK / peak if peak > 0 else 1.0
    return (Waveform(np.asarray(clean.samples, dtype=np.float64) * scale, clean.sample_rate),
            Waveform(y * scale, clean.sample_rate))


def _build_one(job):
    (idx, clean_path, room_id, room, pair, spec, out_dir) = job
    clean = read_wav(clean_path)
    if clean.sample_rate != room.sample_rate:
        raise ValueError(f"{clean_path}: sample rate {clean.sample_rate} != {room.sample_rate}")
    rng = np.random.default_rng([spec.seed, idx, list(spec.rooms).index(room_id), pair])
    scene = sample_scene(room, spec.rt60_range, rng)
    rir = simulate_rir(scene)
    clean_out, reverb = reverberate(clean, rir)
    utt = f"{spec.split}_{Path(clean_path).stem}_{room_id}_{pair}"
    paths = {k: out_dir / f"{utt}_{k}.wav" for k in ("clean", "reverb", "rir")}
    write_wav(paths["clean"], clean_out)
    write_wav(paths["reverb"], reverb)
    write_wav(paths["rir"], Waveform(rir.taps, rir.sample_rate))
    try:
        measured = estimate_rt60(rir)
    except ValueError:
        measured = None
    flag = scene.rt60_target >= 0.15 and (measured is None or abs(measured / scene.rt60_target - 1) > 0.25)
    return ManifestEntry(utt, str(paths["clean"]), str(paths["reverb"]), str(paths["rir"]), room_id,
                         scene.rt60_target, measured, list(scene.source), bool(flag))


def build_corpus(spec: CorpusSpec, out_dir) -> tuple[Path, list[ManifestEntry]]:
    """Simulate every clean file in every room; writes audio and ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    cleans = sorted(Path(spec.clean_dir).glob("*.wav"))
    jobs = [(i, p, rid, room, k, spec, audio_dir)
            for i, p in enumerate(cleans)
            for rid, room in spec.rooms.items()
            for k in range(spec.pairs_per_clean)]

    def run(job):
        try:
            return _build_one(job)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s in room %s: %s", job[1], job[2], exc)
            return None

    with ThreadPoolExecutor(worker_count()) as pool:
        results = list(pool.map(run, jobs))
    entries = sorted((e for e in results if e is not None), key=lambda e: e.utt_id)
    skipped = len(jobs) - len(entries)
    if skipped:
        log.warning("skipped %d of %d pairs", skipped, len(jobs))
    if not entries:
        raise ValueError("corpus is empty: no readable clean files")
    return write_manifest(entries, out_dir / "manifest.jsonl"), entries


def augment_clean_identity(entries, fraction: float, seed: int = 0) -> list[ManifestEntry]:
    """Append identity pairs (reverberant = clean) for ``fraction`` of entries."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    entries = list(entries)
    k = int(round(fraction * len(entries)))
    if k == 0:
        return entries
    picks = np.sort(np.random.default_rng(seed).choice(len(entries), size=k, replace=False))
    extra = []
    for i in picks:
        e = entries[i]
        extra.append(ManifestEntry(f"{e.utt_id}_identity", e.clean_path, e.clean_path, None,
                                   "identity", 0.0, None, None, False))
    return entries + extra
