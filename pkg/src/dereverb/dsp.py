"""Time/frequency transforms, convolution and WAV I/O."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import SAMPLE_RATE


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D samples)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 512
    hop: int = 256
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop <= self.frame_len) or self.frame_len % 2:
            raise ValueError("bad stft config")
        if self.window != "hann":
            raise ValueError("bad stft config")

    @property
    def fft_size(self) -> int:
        return self.frame_len

    @property
    def bins(self) -> int:
        return self.frame_len // 2 + 1

    @classmethod
    def from_ms(cls, frame_ms=32.0, hop_ms=16.0, sample_rate=SAMPLE_RATE):
        return cls(int(round(frame_ms * sample_rate / 1000)),
                   int(round(hop_ms * sample_rate / 1000)))

    def window_array(self, dtype=np.float64) -> np.ndarray:
        # periodic Hann
        n = np.arange(self.frame_len)
        return (0.5 - 0.5 * np.cos(2 * np.pi * n / self.frame_len)).astype(dtype)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            raise ValueError("input too short")
        return 1 + math.ceil((n_samples - self.frame_len) / self.hop)


@dataclass
class ComplexSpectrogram:
    data: np.ndarray  # [T, F] complex
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = SAMPLE_RATE

    @property
    def shape(self):
        return self.data.shape


@dataclass
class MagPhase:
    mag: np.ndarray
    phase: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = SAMPLE_RATE

    @property
    def shape(self):
        return self.mag.shape


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Split ``x`` into overlapping frames, zero-padding the last partial one."""
    n = cfg.n_frames(len(x))
    total = (n - 1) * cfg.hop + cfg.frame_len
    padded = np.zeros(total, dtype=np.result_type(x.dtype, np.float64))
    padded[:len(x)] = x
    view = np.lib.stride_tricks.sliding_window_view(padded, cfg.frame_len)
    return view[::cfg.hop][:n]


def frames_to_spectrum(frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    return np.fft.rfft(frames * cfg.window_array(), n=cfg.fft_size, axis=-1)


def stft(wave: Waveform, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    """One-sided STFT with a periodic Hann window.

    The frame count is ``1 + ceil((len - frame_len) / hop)``; the final
    partial frame is zero-padded rather than dropped.
    """
    cfg = cfg or StftConfig()
    frames = frame_signal(np.asarray(wave.samples, dtype=np.float64), cfg)
    return ComplexSpectrogram(frames_to_spectrum(frames, cfg), cfg, wave.sample_rate)


def spectrum_to_frames(data: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Inverse FFT of each row, multiplied by the synthesis window."""
    return np.fft.irfft(data, n=cfg.fft_size, axis=-1) * cfg.window_array()


def overlap_add(frames: np.ndarray, cfg: StftConfig) -> tuple[np.ndarray, np.ndarray]:
    """Sum windowed frames and squared windows into output-length buffers."""
    n = frames.shape[0]
    length = (n - 1) * cfg.hop + cfg.frame_len
    out = np.zeros(length)
    norm = np.zeros(length)
    w2 = cfg.window_array() ** 2
    for t in range(n):
        s = t * cfg.hop
        out[s:s + cfg.frame_len] += frames[t]
        norm[s:s + cfg.frame_len] += w2
    return out, norm


def normalize_overlap(out: np.ndarray, norm: np.ndarray, cfg: StftConfig) -> np.ndarray:
    # the Hann window is zero at its first sample, so the very edges of the
    # signal are allowed a vanishing denominator; anything inside is not
    tiny = 1e-10
    interior = norm[cfg.hop:len(norm) - cfg.hop] if len(norm) > 2 * cfg.hop else norm[:0]
    if np.any(interior < tiny):
        raise ValueError("unsupported overlap")
    res = np.zeros_like(out)
    ok = norm > tiny
    res[ok] = out[ok] / norm[ok]
    return res


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Output length is ``(T - 1) * hop + frame_len``.
    """
    cfg = spec.config
    data = np.asarray(spec.data)
    if data.ndim != 2 or data.shape[1] != cfg.bins:
        raise ValueError("spectrogram does not match its config")
    out, norm = overlap_add(spectrum_to_frames(data, cfg), cfg)
    return Waveform(normalize_overlap(out, norm, cfg), spec.sample_rate)


def to_mag_phase(spec: ComplexSpectrogram) -> MagPhase:
    data = np.asarray(spec.data)
    mag = np.abs(data)
    phase = np.where(mag > 0, np.angle(data), 0.0)
    return MagPhase(mag, phase, spec.config, spec.sample_rate)


def from_mag_phase(mp: MagPhase) -> ComplexSpectrogram:
    return ComplexSpectrogram(mp.mag * np.exp(1j * mp.phase), mp.config, mp.sample_rate)


def convolve(x: Waveform, h) -> Waveform:
    """Full linear convolution of a waveform with an impulse response.

    ``h`` may be a :class:`~dereverb.rir.Rir` or a :class:`Waveform`.
    """
    taps = h.taps if hasattr(h, "taps") else h.samples
    if x.sample_rate != h.sample_rate:
        raise ValueError("rate mismatch")
    a = np.asarray(x.samples, dtype=np.float64)
    b = np.asarray(taps, dtype=np.float64)
    if min(len(a), len(b)) <= 64:
        y = np.convolve(a, b)
    else:
        n = len(a) + len(b) - 1
        nfft = 1 << (n - 1).bit_length()
        y = np.fft.irfft(np.fft.rfft(a, nfft) * np.fft.rfft(b, nfft), nfft)[:n]
    return Waveform(y, x.sample_rate)


# --- WAV I/O -----------------------------------------------------------------

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavFormatError(ValueError):
    pass


def read_wav(path) -> Waveform:
    """Read a mono PCM16 or IEEE float32 RIFF/WAVE file."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise WavFormatError(f"{path}: only mono is supported, got {channels} channels")
    if tag == _PCM and bits == 16:
        samples = np.frombuffer(data[:len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FLOAT and bits == 32:
        samples = np.frombuffer(data[:len(data) // 4 * 4], dtype="<f4").copy()
    else:
        raise WavFormatError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")
    return Waveform(samples, rate)


def write_wav(path, wave: Waveform, encoding: str = "float32") -> None:
    """Write a mono WAV file; ``encoding`` is ``"float32"`` or ``"pcm16"``."""
    x = np.asarray(wave.samples, dtype=np.float64)
    if encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    elif encoding == "pcm16":
        q = np.round(np.clip(x, -1.0, 1.0) * 32768.0)
        payload = np.clip(q, -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    else:
        raise WavFormatError(f"unsupported encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, wave.sample_rate, wave.sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    if tag == _FLOAT:
        fact = struct.pack("<I", len(x))
        chunks += b"fact" + struct.pack("<I", 4) + fact
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\x00"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)
    os.replace(tmp, path)
