"""Synthetic panoramas and segmentation maps for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ErpGrid


@dataclass(frozen=True)
class PanoramaTerm:
    """``amplitude * cos(wavenumber * (lon + pi)) * exp(-(lat - center)^2 / (2 width^2))``.

    Angles in radians. Measuring longitude from the seam makes each term even
    about it, so the first and last pixel columns agree.
    """

    channel: int
    amplitude: float
    wavenumber: int
    center: float
    width: float


def panorama_terms(channels: int, budget: int, rng, max_wavenumber: int = 4) -> list[PanoramaTerm]:
    if budget < 1:
        raise ValueError("wavenumber budget must be at least 1")
    terms = []
    for c in range(channels):
        for _ in range(budget):
            terms.append(PanoramaTerm(
                channel=c,
                amplitude=float(rng.normal(0.0, 1.5 / np.sqrt(budget))),
                wavenumber=int(rng.integers(0, max_wavenumber + 1)),
                center=float(np.radians(rng.uniform(-60.0, 60.0))),
                width=float(np.radians(rng.uniform(20.0, 60.0))),
            ))
    return terms


def render_terms(grid: ErpGrid, channels: int, terms) -> np.ndarray:
    lon = np.radians(grid.longitudes())
    lat = np.radians(grid.latitudes())
    img = np.zeros((channels, grid.height, grid.width))
    for t in terms:
        env = np.exp(-((lat - t.center) ** 2) / (2.0 * t.width ** 2))
        img[t.channel] += t.amplitude * env[:, None] * np.cos(t.wavenumber * (lon + np.pi))[None, :]
    return img


def synth_panorama(grid: ErpGrid, channels: int = 1, budget: int = 3, seed=None,
                   max_wavenumber: int = 4) -> np.ndarray:
    """Smooth, exactly seamless ``(channels, H, W)`` field.

    Each channel sums ``budget`` integer-wavenumber cosines in longitude with
    Gaussian latitude envelopes.
    """
    rng = np.random.default_rng(seed)
    return render_terms(grid, channels, panorama_terms(channels, budget, rng, max_wavenumber))


def synth_segmap(grid: ErpGrid, num_classes: int, seed=None, band_fractions=None,
                 n_rects: int = 2) -> np.ndarray:
    """Class-id map of longitude bands and rectangles over a background class.

    Bands are full-height column ranges covering ``round(f * W)`` columns for
    each requested fraction ``f``, placed consecutively from a random column
    and wrapping across the seam. Rectangles are drawn on top. Ids come from
    ``[0, num_classes - 1)``; the last id is reserved for Unknown.
    """
    if num_classes < 2:
        raise ValueError("need at least one real class plus Unknown")
    rng = np.random.default_rng(seed)
    h, w = grid.shape
    real = num_classes - 1
    if band_fractions is None:
        n_bands = int(rng.integers(1, 4))
        band_fractions = rng.dirichlet(np.ones(n_bands + 1))[:n_bands]
    band_fractions = [float(f) for f in band_fractions]
    if any(f < 0 for f in band_fractions) or sum(band_fractions) > 1.0 + 1e-12:
        raise ValueError("band fractions must be non-negative and sum to at most 1")
    n_bands = len(band_fractions)
    if real >= n_bands + 1:
        classes = rng.permutation(real)[: n_bands + 1]
    else:
        classes = rng.integers(0, real, n_bands + 1)
    ids = np.full((h, w), classes[0], dtype=np.int64)
    start = int(rng.integers(0, w))
    for f, cls in zip(band_fractions, classes[1:]):
        n = int(round(f * w))
        ids[:, (start + np.arange(n)) % w] = cls
        start += n
    for _ in range(n_rects):
        rh = int(rng.integers(1, max(2, h // 2)))
        rw = int(rng.integers(1, max(2, w // 4)))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w))
        ids[r0:r0 + rh, (c0 + np.arange(rw)) % w] = int(rng.integers(0, real))
    return ids


def synth_corpus(grid: ErpGrid, count: int, channels: int, num_classes: int, seed=None,
                 budget: int = 3):
    """``count`` (panorama, segmap) pairs drawn from one generator."""
    rng = np.random.default_rng(seed)
    panos = np.stack([synth_panorama(grid, channels, budget, rng) for _ in range(count)])
    segs = np.stack([synth_segmap(grid, num_classes, rng) for _ in range(count)])
    return panos, segs
