"""Image-source room impulse responses and reverberation-time analysis."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import butter, sosfilt

from . import SAMPLE_RATE

log = logging.getLogger(__name__)

# Eyring/Sabine constant 24 ln(10) / c at c = 343 m/s
EYRING_K = 0.161


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple[float, float, float]
    absorption: float = 0.5
    sample_rate: int = SAMPLE_RATE
    speed_of_sound: float = 343.0

    def __post_init__(self):
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ValueError("room dims must be three positive lengths")
        if not 0.0 <= self.absorption <= 1.0:
            raise ValueError("absorption must lie in [0, 1]")

    @property
    def volume(self) -> float:
        x, y, z = self.dims
        return x * y * z

    @property
    def surface(self) -> float:
        x, y, z = self.dims
        return 2 * (x * y + x * z + y * z)

    @property
    def centre(self) -> tuple[float, float, float]:
        return tuple(d / 2 for d in self.dims)


# Training rooms (A-C) and test rooms (D-E).
ROOMS = {
    "A": RoomSpec((3.0, 3.0, 3.0)),
    "B": RoomSpec((6.0, 6.0, 4.0)),
    "C": RoomSpec((9.0, 9.0, 5.0)),
    "D": RoomSpec((4.0, 5.0, 3.0)),
    "E": RoomSpec((10.0, 12.0, 6.0)),
}
ROOM_SETS = {
    "default_train": ("A", "B", "C"),
    "default_dev": ("A", "B", "C"),
    "default_test": ("D", "E"),
}
RT60_RANGES = {"train": (0.0, 0.7), "dev": (0.0, 0.7), "test": (0.07, 0.6)}


@dataclass(frozen=True)
class Scene:
    room: RoomSpec
    source: tuple[float, float, float]
    mic: tuple[float, float, float]
    rt60_target: float

    def validate(self):
        for p in (self.source, self.mic):
            if any(not (0.0 < c < d) for c, d in zip(p, self.room.dims)):
                raise ValueError("invalid scene: position outside room")
        if np.allclose(self.source, self.mic):
            raise ValueError("invalid scene: source coincides with mic")

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.source, self.mic)))


@dataclass
class Rir:
    taps: np.ndarray
    sample_rate: int = SAMPLE_RATE
    scene: Scene | None = None

    def __len__(self):
        return len(self.taps)

    def direct_index(self) -> int:
        if self.scene is None:
            return int(np.argmax(np.abs(self.taps)))
        return int(round(self.scene.distance / self.scene.room.speed_of_sound * self.sample_rate))


def absorption_for_rt60(dims, rt60: float) -> float:
    """Uniform wall absorption that gives ``rt60`` under Eyring's formula.

    ``alpha = 1 - exp(-0.161 V / (S rt60))``. Non-positive reverberation
    times clamp to a fully absorbing (anechoic) room.
    """
    x, y, z = dims
    if min(dims) <= 0:
        raise ValueError("room dims must be positive")
    if rt60 <= 0:
        log.debug("anechoic clamp for rt60=%g", rt60)
        return 1.0
    volume = x * y * z
    surface = 2 * (x * y + x * z + y * z)
    alpha = -np.expm1(-EYRING_K * volume / (surface * rt60))
    return float(min(max(alpha, np.finfo(float).tiny), 1.0))


def _sphere_directions(n=20000):
    # Fibonacci lattice, folded into the positive octant
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5 ** 0.5) * i
    return np.abs(np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1))


_DIRECTIONS = _sphere_directions()


@lru_cache(maxsize=64)
def _image_decay_slope(dims, fit_range):
    # dB per unit of (-ln(1 - alpha)) * c * t; depends only on room shape
    g = _DIRECTIONS @ (1.0 / np.asarray(dims))
    s = np.linspace(0.0, 60.0 / g.min(), 4000)
    edc = (np.exp(-np.outer(s, g)) / g).mean(axis=1)
    db = 10 * np.log10(edc / edc[0])
    i0 = int(np.argmax(db <= fit_range[0]))
    i1 = int(np.argmax(db <= fit_range[1]))
    return float(np.polyfit(s[i0:i1 + 1], db[i0:i1 + 1], 1)[0])


def image_absorption_for_rt60(dims, rt60: float, speed_of_sound: float = 343.0,
                              fit_range=(-5.0, -35.0)) -> float:
    """Absorption for which a shoebox image-source field decays with ``rt60``.

    Eyring assumes a diffuse field. In a shoebox the images along direction
    ``u`` at distance ``d`` have undergone about ``d * sum(|u_i| / L_i)``
    reflections, so the squared response decays as a direction-average of
    exponentials and lingers along the axis-near paths. The decay curve of
    that average is fitted over ``fit_range`` (the same segment used by
    :func:`estimate_rt60`) and inverted for the per-reflection loss.
    """
    if min(dims) <= 0:
        raise ValueError("room dims must be positive")
    if rt60 <= 0:
        return 1.0
    slope = _image_decay_slope(tuple(float(d) for d in dims), tuple(fit_range))
    loss = -60.0 / (slope * speed_of_sound * rt60)
    return float(min(-np.expm1(-loss), 1.0))


def simulate_rir(scene: Scene, duration: float | None = None, highpass_hz: float | None = 100.0) -> Rir:
    """Shoebox image-source RIR with nearest-sample delays.

    Each image contributes ``beta**k / (4 pi d)`` at delay ``d / c`` where
    ``k`` is its wall-reflection count and ``beta = sqrt(1 - alpha)`` is the
    pressure reflection coefficient matching the energy absorption
    ``alpha`` of the room. All image amplitudes are positive, so images
    rounded onto the same tap pile up energy near DC; the result is
    high-passed at ``highpass_hz`` (causal, so the direct path stays put).
    """
    scene.validate()
    room = scene.room
    fs = room.sample_rate
    c = room.speed_of_sound
    if duration is None:
        duration = max(scene.rt60_target, 0.0) + 0.1
    n_taps = int(np.ceil(duration * fs))
    if scene.distance / c * fs >= n_taps:
        raise ValueError("duration shorter than direct-path delay")
    taps = np.zeros(n_taps)
    beta = np.sqrt(max(0.0, 1.0 - room.absorption))
    max_dist = n_taps / fs * c
    L = np.asarray(room.dims, dtype=np.float64)
    src = np.asarray(scene.source, dtype=np.float64)
    mic = np.asarray(scene.mic, dtype=np.float64)

    # Per axis: image coordinate 2nL + (1-2q)s, reflection count |2n-q|.
    if beta == 0.0:
        orders = [np.array([0])] * 3
    else:
        orders = [np.arange(-int(max_dist // (2 * l)) - 1, int(max_dist // (2 * l)) + 2) for l in L]
    axis_off = []
    axis_refl = []
    for ax in range(3):
        n = orders[ax]
        offs = []
        refl = []
        for q in (0, 1):
            offs.append(2 * n * L[ax] + (1 - 2 * q) * src[ax] - mic[ax])
            refl.append(np.abs(2 * n - q))
        axis_off.append(np.concatenate(offs))
        axis_refl.append(np.concatenate(refl))
    if beta == 0.0:
        # only the direct path survives
        axis_off = [a[:1] for a in axis_off]
        axis_refl = [a[:1] for a in axis_refl]

    dy2 = axis_off[1][:, None] ** 2 + axis_off[2][None, :] ** 2
    ryz = axis_refl[1][:, None] + axis_refl[2][None, :]
    for dx, rx in zip(axis_off[0], axis_refl[0]):
        d2 = dx * dx + dy2
        sel = d2 < max_dist * max_dist
        if not sel.any():
            continue
        d = np.sqrt(d2[sel])
        k = rx + ryz[sel]
        idx = np.rint(d / c * fs).astype(np.int64)
        ok = idx < n_taps
        amp = beta ** k[ok] / (4 * np.pi * d[ok])
        np.add.at(taps, idx[ok], amp)
    if highpass_hz:
        taps = sosfilt(butter(2, highpass_hz, "highpass", fs=fs, output="sos"), taps)
    return Rir(taps, fs, scene)


def schroeder_curve(taps: np.ndarray) -> np.ndarray:
    """Energy decay curve in dB, normalized to 0 dB at t = 0."""
    energy = np.cumsum(np.asarray(taps, dtype=np.float64)[::-1] ** 2)[::-1]
    if energy[0] <= 0:
        raise ValueError("insufficient decay")
    with np.errstate(divide="ignore"):
        return 10 * np.log10(energy / energy[0])


def estimate_rt60(rir: Rir, fit_range=(-5.0, -35.0)) -> float:
    """Estimate RT60 from a T30 line fit on the Schroeder decay curve."""
    edc = schroeder_curve(rir.taps)
    hi, lo = fit_range
    above = np.nonzero(edc <= hi)[0]
    below = np.nonzero(edc <= lo)[0]
    if len(above) == 0 or len(below) == 0:
        raise ValueError("insufficient decay")
    i0, i1 = above[0], below[0]
    if i1 - i0 < 3:
        raise ValueError("insufficient decay")
    t = np.arange(i0, i1 + 1) / rir.sample_rate
    slope, _ = np.polyfit(t, edc[i0:i1 + 1], 1)
    if slope >= 0:
        raise ValueError("insufficient decay")
    return float(-60.0 / slope)


def sample_scene(room: RoomSpec, rt60_range, rng_seed, wall_margin=0.3, mic_margin=0.5,
                 absorption="image") -> Scene:
    """Random source in ``room`` with the mic at the room centre.

    ``rng_seed`` may be an int, a seed sequence or a ``numpy`` Generator.
    ``absorption`` picks the RT60 inversion: ``"image"`` (matches what
    :func:`simulate_rir` produces) or ``"eyring"``.
    """
    lo, hi = rt60_range
    if lo < 0 or hi < lo:
        raise ValueError("invalid rt60 range")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    L = np.asarray(room.dims, dtype=np.float64)
    if np.any(L <= 2 * wall_margin):
        raise ValueError("room too small")
    mic = L / 2
    reach = np.linalg.norm(np.maximum(L / 2 - wall_margin, 0))
    if reach <= mic_margin:
        raise ValueError("room too small")
    rt60 = float(rng.uniform(lo, hi))
    for _ in range(10000):
        src = rng.uniform(wall_margin, L - wall_margin)
        if np.linalg.norm(src - mic) >= mic_margin:
            break
    else:
        raise ValueError("room too small")
    if absorption == "image":
        alpha = image_absorption_for_rt60(room.dims, rt60, room.speed_of_sound)
    elif absorption == "eyring":
        alpha = absorption_for_rt60(room.dims, rt60)
    else:
        raise ValueError(f"unknown absorption model {absorption!r}")
    sized = RoomSpec(room.dims, alpha, room.sample_rate, room.speed_of_sound)
    return Scene(sized, tuple(float(v) for v in src), tuple(float(v) for v in mic), rt60)
