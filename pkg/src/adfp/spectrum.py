"""Azimuthally averaged 1-D power spectra of (recursively) transformed image sets."""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
from pathlib import Path

import numpy as np


class SpectrumError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class PowerSpectrum1D:
    radius: np.ndarray  # 0 .. r_max
    power: np.ndarray  # mean power per radial bin
    counts: np.ndarray  # frequency coordinates per bin

    def __len__(self) -> int:
        return len(self.radius)


def _check_grid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise SpectrumError(f"need at least a 2 x 2 grid, got shape {x.shape}")
    bad = ~np.isfinite(x)
    if bad.any():
        raise SpectrumError(f"non-finite pixel at index {tuple(int(i) for i in np.argwhere(bad)[0])}")
    return x


def dft2_power(channel) -> np.ndarray:
    """Squared magnitude of the 2-D DFT with DC moved to ``(H // 2, W // 2)``. Leading axes are batched."""
    x = _check_grid(channel)
    f = np.fft.fftshift(np.fft.fft2(x), axes=(-2, -1))
    return f.real ** 2 + f.imag ** 2


def radial_bins(h: int, w: int) -> tuple[np.ndarray, int]:
    """Integer radius of every coordinate of a centred ``h x w`` grid and the largest kept radius."""
    v, u = np.mgrid[0:h, 0:w]
    # np.rint rounds halves to even
    radius = np.rint(np.hypot(v - h // 2, u - w // 2)).astype(np.int64)
    return radius, min(h, w) // 2


def azimuthal_average(power) -> PowerSpectrum1D:
    """Mean power per integer radius around the centre; radii above ``min(H, W) // 2`` are dropped.

    Leading axes are averaged after binning, so a stack of grids yields the mean of their curves.
    """
    p = np.asarray(power, dtype=np.float64)
    h, w = p.shape[-2:]
    radius, r_max = radial_bins(h, w)
    keep = radius.reshape(-1) <= r_max
    flat_r = radius.reshape(-1)[keep]
    counts = np.bincount(flat_r, minlength=r_max + 1)
    values = p.reshape(-1, h * w)[:, keep]
    sums = np.zeros((len(values), r_max + 1))
    # unbuffered row-major accumulation, so each bin sums in scan order
    np.add.at(sums, (np.arange(len(values))[:, None], flat_r[None, :]), values)
    curves = sums / counts
    return PowerSpectrum1D(np.arange(r_max + 1), curves.mean(axis=0), counts)


def mean_spectrum(images) -> PowerSpectrum1D:
    """Average of per-image, per-channel curves for an ``N x C x H x W`` stack."""
    images = np.asarray(images)
    if images.ndim != 4 or not len(images):
        raise SpectrumError(f"expected a non-empty N x C x H x W stack, got shape {images.shape}")
    return azimuthal_average(dft2_power(images))


@dataclasses.dataclass
class SpectrumReport:
    depths: list
    curves: dict  # depth -> set name -> PowerSpectrum1D
    distances: dict  # depth -> (name_a, name_b) -> L1 distance

    def mean_distance(self, depth: int) -> float:
        d = self.distances[depth]
        return float(np.mean(list(d.values()))) if d else 0.0

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["depth", "set", "radius", "power"])
        for depth in self.depths:
            for name, curve in self.curves[depth].items():
                for r, p in zip(curve.radius, curve.power):
                    writer.writerow([depth, name, int(r), f"{p:.9g}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_dict(self) -> dict:
        return {"depths": list(self.depths),
                "mean_distance": {str(k): self.mean_distance(k) for k in self.depths},
                "distances": {str(k): {f"{a}|{b}": v for (a, b), v in self.distances[k].items()}
                              for k in self.depths}}


def curve_distance(a: PowerSpectrum1D, b: PowerSpectrum1D) -> float:
    return float(np.abs(a.power - b.power).sum())


def spectrum_report(sets: dict, transform_fn, n_recursions: int) -> SpectrumReport:
    """Curves of every set after 1..n applications of ``transform_fn`` plus pairwise L1 distances."""
    if n_recursions < 1:
        raise SpectrumError(f"recursion depth must be >= 1, got {n_recursions}")
    shapes = {name: s.image_shape for name, s in sets.items()}
    if len(set(shapes.values())) > 1:
        raise SpectrumError(f"sets differ in image shape: {shapes}")
    current = {name: s.images for name, s in sets.items()}
    curves, distances = {}, {}
    for depth in range(1, n_recursions + 1):
        current = {name: transform_fn(x) for name, x in current.items()}
        curves[depth] = {name: mean_spectrum(x) for name, x in current.items()}
        distances[depth] = {(a, b): curve_distance(curves[depth][a], curves[depth][b])
                            for a, b in itertools.combinations(sorted(curves[depth]), 2)}
    return SpectrumReport(list(range(1, n_recursions + 1)), curves, distances)
