"""Phase-sensitive mask targets, mask application and the PSM losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import ComplexSpectrogram, MagPhase

EPS = 1e-8


@dataclass
class Mask:
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def _check(*grids):
    shapes = {np.shape(g) for g in grids}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def psm_product(clean: MagPhase, reverb: MagPhase) -> np.ndarray:
    """The phase-sensitive target magnitude ``|X| cos(theta_y - theta_x)``."""
    _check(clean.mag, reverb.mag)
    return clean.mag * np.cos(reverb.phase - clean.phase)


def psm_target(clean: MagPhase, reverb: MagPhase, clip=(0.0, 1.0), eps=EPS) -> Mask:
    """``|X| cos(theta_y - theta_x) / |Y|``, clipped to ``clip``.

    Bins where ``|Y| < eps`` take the lower clip value. Pass ``clip=None``
    for the raw (unbounded) mask; such bins are then 0.
    """
    target = psm_product(clean, reverb)
    ok = reverb.mag >= eps
    raw = np.divide(target, reverb.mag, out=np.zeros_like(target), where=ok)
    if clip is None:
        return Mask(raw)
    lo, hi = clip
    return Mask(np.where(ok, np.clip(raw, lo, hi), lo))


def apply_mask(mask: Mask, reverb: MagPhase) -> ComplexSpectrogram:
    values = mask.values if isinstance(mask, Mask) else np.asarray(mask)
    _check(values, reverb.mag)
    return ComplexSpectrogram(values * reverb.mag * np.exp(1j * reverb.phase),
                              reverb.config, reverb.sample_rate)


def _values(mask):
    return mask.values if isinstance(mask, Mask) else np.asarray(mask)


def psm_residual(mask, reverb: MagPhase, clean: MagPhase) -> np.ndarray:
    m = _values(mask)
    _check(m, reverb.mag, clean.mag)
    return m * reverb.mag - psm_product(clean, reverb)


def psm_mse_loss(mask, reverb: MagPhase, clean: MagPhase) -> float:
    """Mean squared error between ``M |Y|`` and the phase-sensitive target."""
    r = psm_residual(mask, reverb, clean)
    return float(np.sum(r * r) / r.size)


def psm_l1_loss(mask, reverb: MagPhase, clean: MagPhase) -> float:
    """Mean absolute error counterpart of :func:`psm_mse_loss`."""
    r = psm_residual(mask, reverb, clean)
    return float(np.sum(np.abs(r)) / r.size)
