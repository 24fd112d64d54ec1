"""Porosity, void statistics and surface roughness from label masks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .voxelcore import Label, LabelMask, SliceImage, PLANES, extract_slice


class EmptySampleError(ValueError):
    pass


class NoSurfaceError(ValueError):
    pass


class SkewnessUndefined(ValueError):
    """Raised when R_q is zero. ``report`` still carries R_a and R_q."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class PorosityReport:
    v_pore: float
    v_bulk: float
    phi: float
    pore_voxels: int
    bulk_voxels: int


def porosity(mask):
    """Pore volume over sample volume, in percent.

    The sample is every non-background voxel, so the scan's empty
    surroundings do not dilute the result.
    """
    pores = mask.count(Label.PORE)
    bulk = pores + mask.count(Label.MATERIAL)
    if bulk == 0:
        raise EmptySampleError("mask contains no sample voxels")
    vv = mask.voxel_volume
    return PorosityReport(pores * vv, bulk * vv, 100.0 * pores / bulk, pores, bulk)


@dataclass(frozen=True)
class Component:
    id: int
    voxels: int
    volume: float
    diameter: float
    centroid: tuple


@dataclass(frozen=True)
class VoidStats:
    components: tuple
    connectivity: int

    @property
    def total_volume(self):
        return sum(c.volume for c in self.components)


def equivalent_diameter(volume):
    """Diameter of the sphere with the given volume."""
    return (6.0 * volume / math.pi) ** (1.0 / 3.0)


def _structure(connectivity):
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def label_pores(mask, connectivity=26):
    """Label array of PORE components with the canonical numbering.

    Component 1 is the largest; equal sizes are ordered by their first
    voxel in (z, y, x) scan order. Background and material are 0.
    """
    pores = np.asarray(mask.labels if isinstance(mask, LabelMask) else mask) == Label.PORE
    raw, n = ndimage.label(pores, structure=_structure(connectivity))
    if n == 0:
        return raw, np.zeros(0, dtype=np.int64)
    flat = raw.reshape(-1, order="F")  # x fastest: index order is (z, y, x) lexicographic
    ids, first = np.unique(flat, return_index=True)
    first = first[ids > 0]
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    order = np.lexsort((first, -sizes))
    remap = np.zeros(n + 1, dtype=raw.dtype)
    remap[order + 1] = np.arange(1, n + 1)
    return remap[raw], sizes[order]


def connected_components(mask, connectivity=26):
    """Split the PORE voxels of ``mask`` into connected voids."""
    labels, sizes = label_pores(mask, connectivity)
    pitch = np.asarray(mask.pitch)
    vv = float(np.prod(pitch))
    comps = []
    if sizes.size:
        idx = np.arange(1, sizes.size + 1)
        cents = ndimage.center_of_mass(np.ones(labels.shape), labels, idx)
        for k, (n, c) in enumerate(zip(sizes, cents), start=1):
            vol = int(n) * vv
            centroid = tuple(float(v) for v in (np.asarray(c) + 0.5) * pitch)
            comps.append(Component(k, int(n), vol, equivalent_diameter(vol), centroid))
    return VoidStats(tuple(comps), connectivity)


def size_histogram(stats, edges):
    """Count components per equivalent-diameter bin.

    Returns ``counts`` of length ``len(edges) + 1``: ``counts[0]`` is the
    underflow (d < edges[0]), ``counts[-1]`` the overflow (d >= edges[-1]),
    and ``counts[i]`` covers ``[edges[i-1], edges[i])``.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be a strictly increasing sequence of at least two values")
    d = np.array([c.diameter for c in stats.components], dtype=float)
    return np.bincount(np.searchsorted(edges, d, side="right"), minlength=edges.size + 1)


@dataclass(frozen=True)
class RoughnessProfile:
    z: np.ndarray
    spacing: float

    @property
    def sampling_length(self):
        return (self.z.size - 1) * self.spacing


@dataclass(frozen=True)
class RoughnessReport:
    ra: float
    rq: float
    rsk: float
    plane: str | None = None


def _section(source, plane, index, level):
    if isinstance(source, LabelMask):
        sec = extract_slice(source, plane, index)
        return sec.values == Label.MATERIAL, sec.pitch
    if isinstance(source, SliceImage):
        solid = source.values == Label.MATERIAL if source.values.dtype == np.uint8 else source.values >= level
        return solid, source.pitch
    raise TypeError(f"cannot take a profile from {type(source).__name__}")


def extract_profile(source, plane, index=0, level=0.5):
    """Surface height profile of one section, in micrometres about its mean line.

    For the XY plane the section is the slice z = ``index``; the profile
    runs along x and the height is the distance from y = 0 to the first
    MATERIAL voxel. For XZ the section is y = ``index``; the profile runs
    along z and the height is measured along x from x = 0, so it crosses
    the printed layers. Lines holding less than half the material of the
    fullest line (those grazing a side face) are dropped.
    ``source`` may be a 3-D mask or a ready slice (``index`` is then
    ignored); intensity slices count pixels at or above ``level`` as
    material.
    """
    if plane not in PLANES:
        raise ValueError(f"plane must be 'XY' or 'XZ', got {plane!r}")
    solid, (pa, pb) = _section(source, plane, index, level)
    if plane == "XY":
        # rows run along x, height along y
        lines, spacing, step = solid, pa, pb
    else:
        # rows run along z, height along x
        lines, spacing, step = solid.T, pb, pa
    counts = lines.sum(axis=1)
    if counts.max() == 0:
        raise NoSurfaceError(f"{plane} section {index} never meets the sample")
    # lines that merely graze a side face would read as deep pits
    hit = counts >= 0.5 * counts.max()
    first = np.argmax(lines, axis=1)[hit]
    heights = first.astype(float) * step * 1000.0
    return RoughnessProfile(heights - heights.mean(), float(spacing))


def roughness(profile, plane=None):
    """R_a, R_q (same unit as the profile) and the dimensionless skewness R_sk.

    Raises :class:`SkewnessUndefined` for a flat profile; its ``report``
    attribute holds R_a = R_q = 0.
    """
    z = np.asarray(profile.z if isinstance(profile, RoughnessProfile) else profile, dtype=float)
    if z.size < 2:
        raise ValueError("roughness needs at least two samples")
    ra = float(np.mean(np.abs(z)))
    rq = float(np.sqrt(np.mean(z**2)))
    if rq == 0.0:
        raise SkewnessUndefined("R_q is zero; skewness is undefined", RoughnessReport(ra, rq, math.nan, plane))
    rsk = float(np.mean(z**3) / rq**3)
    return RoughnessReport(ra, rq, rsk, plane)


@dataclass(frozen=True)
class RoughnessSummary:
    plane: str
    n: int
    ra: dict
    rsk: dict


def _five(values):
    if len(values) == 0:
        return {k: math.nan for k in ("min", "q1", "median", "q3", "max")}
    q = np.percentile(values, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))


def roughness_summary(mask, plane):
    """Box-plot statistics of R_a and R_sk over every section of ``plane``.

    Sections that miss the sample are skipped; flat sections contribute
    R_a = 0 and no skewness.
    """
    axis = 2 if plane == "XY" else 1
    ra, rsk = [], []
    for k in range(mask.dims[axis]):
        try:
            prof = extract_profile(mask, plane, k)
        except NoSurfaceError:
            continue
        try:
            rep = roughness(prof, plane)
            rsk.append(rep.rsk)
        except SkewnessUndefined as exc:
            rep = exc.report
        ra.append(rep.ra)
    if not ra:
        raise NoSurfaceError(f"no {plane} section meets the sample")
    return RoughnessSummary(plane, len(ra), _five(ra), _five(rsk))
