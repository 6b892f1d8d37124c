"""Deterministic synthetic multimodal scenes for desk-scale experiments.

Seven gridded modalities (LST, NDVI, soil moisture, wind speed, humidity,
elevation, land cover) are generated over three months as smooth value
noise; elevation and land cover stay fixed across months, the others
drift month to month. A latent rainfall field is the documented smooth
combination

    r = humidity_mean + 0.7*wind_mean - 0.8*lst_mean - 0.6*elevation
        + noise_level * independent_noise

(each *_mean is the across-month average of that modality's latent noise
field). The field is mapped through a monotone piecewise-linear transform
that pins its empirical quantiles to the emitted scheme's class bounds,
so quantization realizes the requested class balance. Everything is a
pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .datagrid import LpaScheme, RasterGrid

MODALITIES = ("lst", "ndvi", "soil_moisture", "wind_speed", "humidity",
              "elevation", "lulc")
STATIC_MODALITIES = frozenset({"elevation", "lulc"})
MONTHS = (6, 7, 8)

# display scaling per modality: value = offset + scale * latent
_PHYSICAL = {
    "lst": (300.0, 8.0),
    "ndvi": (0.5, 0.25),
    "soil_moisture": (0.25, 0.1),
    "wind_speed": (4.0, 1.5),
    "humidity": (70.0, 12.0),
    "elevation": (500.0, 350.0),
}

SYNTH_SCHEME = LpaScheme("Synthetic", 250.0, (0.0, 100.0, 200.0, 300.0, 400.0))

_BALANCE_TOL = 0.02


@dataclass(frozen=True)
class SynthSpec:
    height: int = 256
    width: int = 256
    noise_level: float = 0.05
    class_balance: tuple = (0.15, 0.25, 0.30, 0.20, 0.10)

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ValueError(f"scene extents must be >= 8, got "
                             f"{self.height}x{self.width}")
        if self.noise_level < 0:
            raise ValueError("noise level must be >= 0")
        bal = self.class_balance
        if len(bal) != 5 or any(b < 0 for b in bal):
            raise ValueError("class balance needs five non-negative fractions")
        if abs(sum(bal) - 1.0) > 1e-9:
            raise ValueError(f"class balance must sum to 1, got {sum(bal)}")


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise(height: int, width: int, seed: int, cell: int = 64,
                octaves: int = 3, persistence: float = 0.5) -> np.ndarray:
    """Multi-octave bilinear value noise, roughly in [-1, 1]."""
    out = np.zeros((height, width), dtype=np.float64)
    amp, total = 1.0, 0.0
    for octave in range(octaves):
        spacing = max(2, cell >> octave)
        gh = height // spacing + 2
        gw = width // spacing + 2
        lattice = (rng.uniforms(seed, octave, gh * gw) * 2.0 - 1.0).reshape(gh, gw)
        ys = np.arange(height) / spacing
        xs = np.arange(width) / spacing
        y0 = ys.astype(int)
        x0 = xs.astype(int)
        ty = _smoothstep(ys - y0)[:, None]
        tx = _smoothstep(xs - x0)[None, :]
        v00 = lattice[y0][:, x0]
        v01 = lattice[y0][:, x0 + 1]
        v10 = lattice[y0 + 1][:, x0]
        v11 = lattice[y0 + 1][:, x0 + 1]
        top = v00 * (1 - tx) + v01 * tx
        bot = v10 * (1 - tx) + v11 * tx
        out += amp * (top * (1 - ty) + bot * ty)
        total += amp
        amp *= persistence
    return out / total


def _latent_fields(spec: SynthSpec, seed: int) -> dict:
    """Per (modality, month) latent noise fields; static modalities repeat."""
    h, w = spec.height, spec.width
    fields = {}
    for mi, modality in enumerate(MODALITIES):
        base = value_noise(h, w, rng.derive(seed, 101, mi))
        if modality in STATIC_MODALITIES:
            for month in MONTHS:
                fields[(modality, month)] = base
            continue
        for month in MONTHS:
            drift = value_noise(h, w, rng.derive(seed, 202, mi, month))
            fields[(modality, month)] = 0.75 * base + 0.35 * drift
    return fields


def _to_physical(modality: str, latent: np.ndarray) -> np.ndarray:
    if modality == "lulc":
        codes = np.clip(np.floor((latent + 1.0) * 3.0), 0, 5)
        return codes
    offset, scale = _PHYSICAL[modality]
    return offset + scale * latent


def _month_mean(fields: dict, modality: str) -> np.ndarray:
    return sum(fields[(modality, m)] for m in MONTHS) / len(MONTHS)


def _quantile_map(raw: np.ndarray, balance: Sequence[float],
                  scheme: LpaScheme) -> np.ndarray:
    """Monotone map of the latent rain field onto mm so that class
    proportions under ``scheme`` match ``balance``."""
    cum = np.cumsum(balance)[:-1]
    qs = np.quantile(raw, cum)
    lo, hi = float(raw.min()), float(raw.max())
    xs = np.concatenate(([lo - 1e-9], qs, [hi + 1e-9]))
    if np.any(np.diff(xs) <= 0):
        raise ValueError("unattainable class balance: latent rainfall "
                         "quantiles are not distinct at this noise level")
    bounds = np.asarray(scheme.lower_bounds[1:])
    span = bounds[-1] - bounds[0]
    ys = np.concatenate(([0.0], bounds, [bounds[-1] + 0.5 * span]))
    mm = np.interp(raw, xs, ys)

    achieved = np.bincount(scheme.classify(mm), minlength=scheme.num_classes)
    achieved = achieved / mm.size
    if np.abs(achieved - np.asarray(balance)).max() > _BALANCE_TOL:
        raise ValueError(f"unattainable class balance: requested {tuple(balance)}, "
                         f"achieved {tuple(round(float(a), 4) for a in achieved)}")
    return mm


def synth_generate(spec: SynthSpec, seed: int):
    """Build one scene: 21 modality grids, the rainfall grid, and the scheme.

    Returns (modality_grids, rain, scheme) where modality_grids is the
    modality-major, month-minor list of (modality, month, RasterGrid).
    """
    spec.validate()
    fields = _latent_fields(spec, seed)

    grids = []
    for modality in MODALITIES:
        for month in MONTHS:
            phys = _to_physical(modality, fields[(modality, month)])
            grids.append((modality, month,
                          RasterGrid(phys.astype(np.float32)[None])))

    raw = (_month_mean(fields, "humidity")
           + 0.7 * _month_mean(fields, "wind_speed")
           - 0.8 * _month_mean(fields, "lst")
           - 0.6 * fields[("elevation", MONTHS[0])])
    if spec.noise_level > 0:
        raw = raw + spec.noise_level * value_noise(
            spec.height, spec.width, rng.derive(seed, 303), cell=16)

    mm = _quantile_map(raw, spec.class_balance, SYNTH_SCHEME)
    rain = RasterGrid(mm.astype(np.float32)[None])
    return grids, rain, SYNTH_SCHEME
