"""Objective quality measures: SRMR, log-spectral distance and SI-SDR."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve, gammatone, hilbert, lfilter

from .dsp import StftConfig, Waveform, stft

log = logging.getLogger(__name__)

SI_SDR_CAP = 100.0
LSD_FLOOR_DB = -80.0


@dataclass(frozen=True)
class SrmrConfig:
    acoustic_bands: int = 23
    low_freq: float = 125.0
    mod_bands: int = 8
    min_mod_freq: float = 4.0
    max_mod_freq: float = 128.0
    mod_q: float = 2.0
    frame_s: float = 0.256
    shift_s: float = 0.032

    def __post_init__(self):
        if self.mod_bands % 2:
            raise ValueError("mod_bands must be even")
        if not (0 < self.min_mod_freq < self.max_mod_freq):
            raise ValueError("modulation band edges must increase")


def erb_centre_freqs(fs, n, low_freq):
    """ERB-spaced centre frequencies from just under ``fs / 2`` down to
    ``low_freq`` (Glasberg & Moore constants), returned ascending."""
    ear_q, min_bw = 9.26449, 24.7
    hi = fs / 2
    i = np.arange(1, n + 1)
    cf = -(ear_q * min_bw) + np.exp(i * (np.log(low_freq + ear_q * min_bw) - np.log(hi + ear_q * min_bw)) / n) \
        * (hi + ear_q * min_bw)
    return cf[::-1]


def modulation_centre_freqs(cfg: SrmrConfig):
    return cfg.min_mod_freq * (cfg.max_mod_freq / cfg.min_mod_freq) ** (np.arange(cfg.mod_bands) / (cfg.mod_bands - 1))


def _modulation_filter(fc, fs, q):
    # second-order band-pass, bilinear transform with prewarping
    w0 = np.tan(np.pi * fc / fs)
    b0 = w0 / q
    den = 1 + b0 + w0 * w0
    b = np.array([b0, 0.0, -b0]) / den
    a = np.array([1.0, (2 * w0 * w0 - 2) / den, (1 - b0 + w0 * w0) / den])
    return b, a


def modulation_energies(wave: Waveform, cfg: SrmrConfig | None = None) -> np.ndarray:
    """Average modulation energy per (acoustic band, modulation band)."""
    cfg = cfg or SrmrConfig()
    fs = wave.sample_rate
    x = np.asarray(wave.samples, dtype=np.float64)
    win = int(round(cfg.frame_s * fs))
    hop = int(round(cfg.shift_s * fs))
    if len(x) < fs:
        log.warning("SRMR on %.2f s of audio; at least 1 s is recommended", len(x) / fs)
    w2 = (0.54 - 0.46 * np.cos(2 * np.pi * np.arange(win) / win)) ** 2  # periodic Hamming
    mods = [_modulation_filter(fc, fs, cfg.mod_q) for fc in modulation_centre_freqs(cfg)]
    out = np.zeros((cfg.acoustic_bands, cfg.mod_bands))
    for i, cf in enumerate(erb_centre_freqs(fs, cfg.acoustic_bands, cfg.low_freq)):
        b, a = gammatone(cf, "iir", fs=fs)
        env = np.abs(hilbert(lfilter(b, a, x)))
        bands = np.stack([lfilter(mb, ma, env) for mb, ma in mods])
        if bands.shape[1] < win:
            bands = np.pad(bands, ((0, 0), (0, win - bands.shape[1])))
        energy = fftconvolve(bands * bands, w2[None, ::-1], mode="valid", axes=1)[:, ::hop]
        out[i] = np.maximum(energy, 0).mean(axis=1)
    return out


def srmr(wave: Waveform, cfg: SrmrConfig | None = None) -> float:
    """Ratio of low (first half) to high (second half) modulation-band energy."""
    cfg = cfg or SrmrConfig()
    e = modulation_energies(wave, cfg)
    half = cfg.mod_bands // 2
    low, high = e[:, :half].sum(), e[:, half:].sum()
    if high <= 0 or not np.isfinite(low + high):
        raise ValueError("undefined SRMR (silent input)")
    return float(low / high)


def log_spectral_distance(ref: Waveform, est: Waveform, cfg: StftConfig | None = None) -> float:
    """Frame-averaged RMS difference of dB magnitude spectra (floored at -80 dB)."""
    n = min(len(ref), len(est))
    cfg = cfg or StftConfig()
    if n < cfg.frame_len:
        pad = cfg.frame_len - n
        a = np.pad(np.asarray(ref.samples[:n], dtype=np.float64), (0, pad))
        b = np.pad(np.asarray(est.samples[:n], dtype=np.float64), (0, pad))
    else:
        a, b = ref.samples[:n], est.samples[:n]
    floor = 10 ** (LSD_FLOOR_DB / 20)
    A = 20 * np.log10(np.maximum(np.abs(stft(Waveform(a, ref.sample_rate), cfg).data), floor))
    B = 20 * np.log10(np.maximum(np.abs(stft(Waveform(b, est.sample_rate), cfg).data), floor))
    return float(np.mean(np.sqrt(np.mean((A - B) ** 2, axis=1))))


def si_sdr(ref: Waveform, est: Waveform) -> float:
    """Scale-invariant SDR in dB, capped at 100 dB."""
    n = min(len(ref), len(est))
    r = np.asarray(ref.samples[:n], dtype=np.float64)
    e = np.asarray(est.samples[:n], dtype=np.float64)
    rr = r @ r
    if rr <= 0:
        raise ValueError("zero reference signal")
    target = (e @ r) / rr * r
    noise = e - target
    tt, nn = target @ target, noise @ noise
    if nn <= tt * 10 ** (-SI_SDR_CAP / 10):
        return SI_SDR_CAP
    return float(10 * math.log10(tt / nn)) if tt > 0 else -SI_SDR_CAP


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # dicts: utterance_id, srmr, lsd, si_sdr
    metrics = ("srmr", "lsd", "si_sdr")

    def add(self, utterance_id, **values):
        self.rows.append({"utterance_id": utterance_id, **{k: float(values[k]) for k in self.metrics}})

    def mean(self, name) -> float:
        return float(np.mean([r[name] for r in self.rows]))

    def std(self, name) -> float:
        return float(np.std([r[name] for r in self.rows]))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["utterance_id", *self.metrics])
            for r in self.rows:
                w.writerow([r["utterance_id"], *(f"{r[k]:.6f}" for k in self.metrics)])
            w.writerow(["__mean__", *(f"{self.mean(k):.6f}" for k in self.metrics)])

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        rep = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                if row["utterance_id"] == "__mean__":
                    continue
                rep.add(row["utterance_id"], **{k: float(row[k]) for k in cls.metrics})
        return rep


def score(utterance_id, clean: Waveform, est: Waveform, report: MetricReport | None = None):
    report = report if report is not None else MetricReport()
    report.add(utterance_id, srmr=srmr(est), lsd=log_spectral_distance(clean, est), si_sdr=si_sdr(clean, est))
    return report
