"""Offline and chunked online dereverberation with a frozen generator."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dsp import (
    ComplexSpectrogram,
    StftConfig,
    Waveform,
    frames_to_spectrum,
    istft,
    spectrum_to_frames,
    stft,
    to_mag_phase,
)
from .masks import apply_mask

CHUNK_PRESETS = (10, 20, 40)


@dataclass(frozen=True)
class ChunkConfig:
    chunk_frames: int = 40
    carry_state: bool = False

    def __post_init__(self):
        if self.chunk_frames < 1:
            raise ValueError("chunk_frames must be >= 1")

    def latency_s(self, stft_cfg: StftConfig | None = None, sample_rate: int = 16000) -> float:
        hop = (stft_cfg or StftConfig()).hop
        return self.chunk_frames * hop / sample_rate


def _check_bins(generator, cfg: StftConfig):
    if generator.spec.freq_bins != cfg.bins:
        raise ValueError(f"bin mismatch: model has {generator.spec.freq_bins} bins, STFT gives {cfg.bins}")


def dereverb_offline(wave: Waveform, generator, stft_cfg: StftConfig | None = None) -> Waveform:
    """Whole-utterance mask estimation; output trimmed to the input length."""
    cfg = stft_cfg or StftConfig()
    _check_bins(generator, cfg)
    x = np.asarray(wave.samples, dtype=np.float64)
    n = len(x)
    if n < cfg.frame_len:
        x = np.pad(x, (0, cfg.frame_len - n))
    Y = to_mag_phase(stft(Waveform(x, wave.sample_rate), cfg))
    mask = generator.forward(Y.mag)
    out = istft(apply_mask(mask, Y))
    return Waveform(out.samples[:n], wave.sample_rate)


class OnlineSession:
    """Streaming dereverberation in blocks of ``chunk_frames`` STFT frames.

    Samples go in through :meth:`push` in blocks of any size; every time a
    chunk of frames is complete it is masked and overlap-added, and all
    samples no later frame can touch are returned. :meth:`flush` zero-pads
    the tail like the offline STFT does and returns the rest, trimmed to
    the number of samples pushed.
    """

    def __init__(self, generator, cfg: ChunkConfig = ChunkConfig(), stft_cfg: StftConfig | None = None,
                 sample_rate: int = 16000):
        self.gen = generator
        self.cfg = cfg
        self.stft_cfg = stft_cfg or StftConfig()
        _check_bins(generator, self.stft_cfg)
        self.sample_rate = sample_rate
        self._in = np.zeros(0)
        self._in_start = 0  # absolute index of self._in[0]
        self._n_pushed = 0
        self._pending = []  # time-domain frames awaiting a full chunk
        self._next_frame = 0
        self._acc = np.zeros(0)
        self._norm = np.zeros(0)
        self._acc_start = 0  # absolute index of self._acc[0]
        self._state = None
        self.frames_in = 0
        self.frames_out = 0
        self.processed = []  # frame indices in the order they were synthesized
        self.chunk_times = []
        self.closed = False

    def push(self, block) -> np.ndarray:
        if self.closed:
            raise RuntimeError("session already flushed")
        block = np.asarray(block, dtype=np.float64).reshape(-1)
        self._n_pushed += len(block)
        self._in = np.concatenate([self._in, block])
        self._collect_frames()
        return self._emit(final=False)

    def flush(self) -> np.ndarray:
        if self.closed:
            raise RuntimeError("session already flushed")
        cfg = self.stft_cfg
        n = max(self._n_pushed, cfg.frame_len)
        total = (cfg.n_frames(n) - 1) * cfg.hop + cfg.frame_len
        have = self._in_start + len(self._in)
        self._in = np.concatenate([self._in, np.zeros(total - have)])
        self._collect_frames()
        if self._pending:
            self._run_chunk()
        self.closed = True
        return self._emit(final=True)

    def _collect_frames(self):
        cfg = self.stft_cfg
        while True:
            start = self._next_frame * cfg.hop - self._in_start
            if start + cfg.frame_len > len(self._in):
                break
            self._pending.append(self._in[start:start + cfg.frame_len].copy())
            self._next_frame += 1
            self.frames_in += 1
            if len(self._pending) == self.cfg.chunk_frames:
                self._run_chunk()
        drop = self._next_frame * cfg.hop - self._in_start
        if drop > 0:
            self._in = self._in[drop:]
            self._in_start += drop

    def _run_chunk(self):
        cfg = self.stft_cfg
        frames = np.stack(self._pending)
        first = self._next_frame - len(frames)
        self._pending = []
        Y = to_mag_phase(ComplexSpectrogram(frames_to_spectrum(frames, cfg), cfg, self.sample_rate))
        t0 = time.perf_counter()
        mask = self.gen.forward(Y.mag, self._state if self.cfg.carry_state else None)
        self.chunk_times.append(time.perf_counter() - t0)
        if self.cfg.carry_state:
            self._state = self.gen.final_state()
        synth = spectrum_to_frames(apply_mask(mask, Y).data, cfg)
        end = (first + len(frames) - 1) * cfg.hop + cfg.frame_len - self._acc_start
        if end > len(self._acc):
            grow = end - len(self._acc)
            self._acc = np.concatenate([self._acc, np.zeros(grow)])
            self._norm = np.concatenate([self._norm, np.zeros(grow)])
        w2 = cfg.window_array() ** 2
        for j, fr in enumerate(synth):
            s = (first + j) * cfg.hop - self._acc_start
            self._acc[s:s + cfg.frame_len] += fr
            self._norm[s:s + cfg.frame_len] += w2
            self.processed.append(first + j)
        self.frames_out += len(frames)

    def _emit(self, final: bool) -> np.ndarray:
        if final:
            ready = len(self._acc)
        else:
            # samples before the start of the next unsynthesized frame are final
            ready = self.frames_out * self.stft_cfg.hop - self._acc_start
        acc, norm = self._acc[:ready], self._norm[:ready]
        out = np.zeros(ready)
        ok = norm > 1e-10
        out[ok] = acc[ok] / norm[ok]
        start = self._acc_start
        self._acc, self._norm = self._acc[ready:], self._norm[ready:]
        self._acc_start += ready
        return out[:max(0, self._n_pushed - start)]


def dereverb_online(blocks, generator, cfg: ChunkConfig = ChunkConfig(), stft_cfg: StftConfig | None = None,
                    sample_rate: int = 16000):
    """Yield dereverberated sample blocks for an iterable of input blocks."""
    session = OnlineSession(generator, cfg, stft_cfg, sample_rate)
    for block in blocks:
        out = session.push(block)
        if len(out):
            yield out
    out = session.flush()
    if len(out):
        yield out


def dereverb_stream(wave: Waveform, generator, cfg: ChunkConfig = ChunkConfig(),
                    stft_cfg: StftConfig | None = None, block=1024) -> Waveform:
    x = np.asarray(wave.samples, dtype=np.float64)
    blocks = (x[i:i + block] for i in range(0, len(x), block))
    parts = list(dereverb_online(blocks, generator, cfg, stft_cfg, wave.sample_rate))
    return Waveform(np.concatenate(parts) if parts else np.zeros(0), wave.sample_rate)


def latency_report(cfg: ChunkConfig, generator, probe_chunks: int = 20, stft_cfg: StftConfig | None = None,
                   sample_rate: int = 16000, seed: int = 0) -> dict:
    """Algorithmic delay of one chunk plus measured feed-forward time per chunk."""
    stft_cfg = stft_cfg or StftConfig()
    rng = np.random.default_rng(seed)
    times = []
    for _ in range(probe_chunks):
        mag = np.abs(rng.standard_normal((cfg.chunk_frames, stft_cfg.bins)))
        t0 = time.perf_counter()
        generator.forward(mag)
        times.append(time.perf_counter() - t0)
    times_ms = np.array(times) * 1e3
    algo_ms = cfg.chunk_frames * stft_cfg.hop * 1000 / sample_rate
    return {
        "chunk_frames": cfg.chunk_frames,
        "algorithmic_delay_ms": algo_ms,
        "feedforward_median_ms": float(np.median(times_ms)),
        "feedforward_p95_ms": float(np.percentile(times_ms, 95)),
        "total_median_ms": algo_ms + float(np.median(times_ms)),
    }


def params_digest(generator) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(generator.store.params):
        h.update(k.encode())
        h.update(generator.store.params[k].tobytes())
    return h.hexdigest()
