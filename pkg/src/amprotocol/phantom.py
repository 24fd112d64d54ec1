"""Synthetic printed-and-scanned samples with known ground truth.

A :class:`DesignSpec` is a rectangular solid with designed cuboid and
spherical voids. :func:`build_design` rasterizes it, and
:func:`simulate_print` adds the process-dependent defects that a real
printer would introduce: extra pores, distorted void and outer surfaces,
and scanner blur and noise.

Coordinates inside a design are in mm with the solid occupying
``[0, L]`` on each axis; the rasterized grid pads the solid with a band
of background voxels.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .voxelcore import Label, LabelMask, VoxelGrid

MIN_VOID_MM = 0.20
PRINTERS = (11, 21, 31)
NOZZLE_SPEEDS = (30.0, 35.0)
LAYER_HEIGHT_RANGE = (50.0, 70.0)
DEFAULT_PITCH = 0.05
DEFAULT_MARGIN = 4

MATERIAL_LEVEL = 0.9
PORE_LEVEL = 0.1
BACKGROUND_LEVEL = 0.0

_EPS = 1e-9


class InvalidSpec(ValueError):
    pass


class InvalidModel(ValueError):
    pass


@dataclass(frozen=True)
class Void:
    """A designed cavity. ``size`` is (l, w, h) for a cuboid, (d,) for a sphere."""

    shape: str
    size: tuple
    center: tuple

    def __post_init__(self):
        if self.shape not in ("cuboid", "sphere"):
            raise InvalidSpec(f"unknown void shape {self.shape!r}")
        size = tuple(float(s) for s in self.size)
        if len(size) != (3 if self.shape == "cuboid" else 1):
            raise InvalidSpec(f"{self.shape} void needs {3 if self.shape == 'cuboid' else 1} size values")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def volume(self):
        if self.shape == "cuboid":
            return self.size[0] * self.size[1] * self.size[2]
        return math.pi * self.size[0] ** 3 / 6.0

    @property
    def half_extent(self):
        if self.shape == "cuboid":
            return tuple(s / 2.0 for s in self.size)
        return (self.size[0] / 2.0,) * 3

    @property
    def bounds(self):
        h = self.half_extent
        return tuple(c - e for c, e in zip(self.center, h)), tuple(c + e for c, e in zip(self.center, h))


def cuboid(l, w, h, center):
    return Void("cuboid", (l, w, h), center)


def sphere(d, center):
    return Void("sphere", (d,), center)


def _voids_overlap(a, b):
    if a.shape == "cuboid" and b.shape == "cuboid":
        (alo, ahi), (blo, bhi) = a.bounds, b.bounds
        return all(min(ah, bh) - max(al, bl) > _EPS for al, ah, bl, bh in zip(alo, ahi, blo, bhi))
    if a.shape == "sphere" and b.shape == "sphere":
        gap = math.dist(a.center, b.center)
        return gap < (a.size[0] + b.size[0]) / 2.0 - _EPS
    box, ball = (a, b) if a.shape == "cuboid" else (b, a)
    lo, hi = box.bounds
    nearest = [min(max(c, l), h) for c, l, h in zip(ball.center, lo, hi)]
    return math.dist(nearest, ball.center) < ball.size[0] / 2.0 - _EPS


@dataclass(frozen=True)
class DesignSpec:
    outer: tuple
    voids: tuple = ()
    name: str = "design"

    def __post_init__(self):
        outer = tuple(float(v) for v in self.outer)
        if len(outer) != 3 or any(v <= 0 for v in outer):
            raise InvalidSpec(f"outer dims must be three positive lengths, got {outer}")
        object.__setattr__(self, "outer", outer)
        object.__setattr__(self, "voids", tuple(self.voids))
        self.validate()

    def validate(self):
        for k, v in enumerate(self.voids):
            if min(v.size) < MIN_VOID_MM - _EPS:
                raise InvalidSpec(f"void {k} is smaller than the {MIN_VOID_MM} mm minimum")
            lo, hi = v.bounds
            if any(l <= _EPS or h >= o - _EPS for l, h, o in zip(lo, hi, self.outer)):
                raise InvalidSpec(f"void {k} crosses the outer boundary")
        for (i, a), (j, b) in itertools.combinations(enumerate(self.voids), 2):
            if _voids_overlap(a, b):
                raise InvalidSpec(f"voids {i} and {j} overlap")

    @property
    def volume(self):
        return self.outer[0] * self.outer[1] * self.outer[2]


def designed_porosity(spec):
    """Analytic porosity in percent: total void volume over the outer volume."""
    return 100.0 * sum(v.volume for v in spec.voids) / spec.volume


def procedural_design(name, outer, target, shapes=("cuboid",), sizes=(1.0, 0.5, 0.3, 0.2), cell=None, shell=0.5):
    """Lay voids on a regular lattice until the analytic porosity reaches ``target``.

    Lattice cells are visited in a strided order so that the voids spread
    over the whole solid. The first cells get one void of every
    (shape, size) kind; later cells get the largest kind that still fits
    under the target volume, alternating shapes. The result undershoots
    ``target`` by less than the smallest void.
    """
    outer = tuple(float(v) for v in outer)
    cell = cell if cell is not None else max(sizes) + 0.5
    counts = [int((L - 2 * shell) // cell + _EPS) for L in outer]
    if min(counts) < 1:
        raise InvalidSpec(f"outer dims {outer} leave no room for {cell} mm lattice cells")
    offsets = [(L - n * cell) / 2.0 for L, n in zip(outer, counts)]
    cells = list(itertools.product(range(counts[2]), range(counts[1]), range(counts[0])))
    # coprime stride scatters consecutive picks through the lattice
    stride = next(s for s in range(len(cells) // 2 + 1, 2 * len(cells) + 2) if math.gcd(s, len(cells)) == 1)
    order = [cells[(k * stride) % len(cells)] for k in range(len(cells))]
    cycle = [(sh, sz) for sz in sorted(sizes, reverse=True) for sh in shapes]
    goal = target / 100.0 * outer[0] * outer[1] * outer[2]

    def volume(shape, size):
        return size**3 if shape == "cuboid" else math.pi * size**3 / 6.0

    smallest = min(volume(sh, sz) for sh, sz in itertools.product(shapes, sizes))

    # one void of every kind first, then the largest kind that still fits
    queue = list(cycle)
    voids, total = [], 0.0
    for n, (kz, ky, kx) in enumerate(order):
        if goal - total < smallest - _EPS:
            break
        if queue:
            candidates = [queue.pop(0)]
        else:
            rot = n % len(shapes)
            candidates = [(shapes[(i + rot) % len(shapes)], sz) for sz in sorted(sizes, reverse=True) for i in range(len(shapes))]
        for shape, size in candidates:
            vol = volume(shape, size)
            if total + vol <= goal + _EPS:
                center = tuple(round(off + (idx + 0.5) * cell, 9) for off, idx in zip(offsets, (kx, ky, kz)))
                voids.append(cuboid(size, size, size, center) if shape == "cuboid" else sphere(size, center))
                total += vol
                break
    if goal - total >= smallest - _EPS:
        raise InvalidSpec(f"{outer} mm solid cannot hold {target}% porosity on a {cell} mm lattice")
    return DesignSpec(outer, tuple(voids), name)


def design_d1(height=26.0):
    """Cuboid-only analog of the 8 x 8 x 26 mm design at ~1.45 % porosity."""
    sizes = (1.0, 0.5, 0.3, 0.2) if height >= 5.0 else (0.5, 0.3, 0.2)
    return procedural_design("D1", (8.0, 8.0, height), 1.45, ("cuboid",), sizes)


def design_d2(height=17.5):
    """Mixed cuboid/sphere analog of the 6 x 6 x 17.5 mm design at 2.48 %."""
    sizes = (1.0, 0.5, 0.3, 0.2) if height >= 5.0 else (0.5, 0.3, 0.2)
    return procedural_design("D2", (6.0, 6.0, height), 2.48, ("cuboid", "sphere"), sizes)


def _index_range(lo, hi, pitch, margin):
    """Voxel indices whose centres fall in ``[lo, hi)`` mm."""
    start = math.ceil(round(lo / pitch + margin - 0.5, 9))
    stop = math.ceil(round(hi / pitch + margin - 0.5, 9))
    return start, stop


def _grid_dims(spec, pitch, margin):
    return tuple(_index_range(0.0, L, pitch, margin)[1] + margin for L in spec.outer)


def _carve_void(labels, void, pitch, margin, jitter=None):
    """Mark a void as PORE. ``jitter`` perturbs its extent, in voxels."""
    shape = labels.shape
    if void.shape == "cuboid":
        lo, hi = void.bounds
        sl = []
        for axis, (l, h) in enumerate(zip(lo, hi)):
            a, b = _index_range(l, h, pitch, margin)
            if jitter is not None:
                a, b = a - jitter[axis, 0], b + jitter[axis, 1]
            sl.append(slice(max(a, 0), min(max(b, a), shape[axis])))
        labels[tuple(sl)] = Label.PORE
        return
    radius = np.full(3, void.size[0] / 2.0)
    if jitter is not None:
        radius = np.maximum(radius + jitter[:, 0] * pitch, 0.0)
    if not np.all(radius > 0):
        return
    sl, axes = [], []
    for axis in range(3):
        a, b = _index_range(void.center[axis] - radius[axis], void.center[axis] + radius[axis], pitch, margin)
        a, b = max(a, 0), min(b, shape[axis])
        sl.append(slice(a, b))
        axes.append(((np.arange(a, b) - margin + 0.5) * pitch - void.center[axis]) / radius[axis])
    gx, gy, gz = np.meshgrid(*axes, indexing="ij", sparse=True)
    inside = gx**2 + gy**2 + gz**2 <= 1.0
    region = labels[tuple(sl)]
    region[inside] = Label.PORE


def _intensity(labels):
    levels = np.array([BACKGROUND_LEVEL, MATERIAL_LEVEL, PORE_LEVEL], dtype=np.float32)
    return levels[labels]


def build_design(spec, pitch=DEFAULT_PITCH, margin=DEFAULT_MARGIN):
    """Rasterize a design into an intensity grid and its ground-truth mask.

    A voxel belongs to a region when its centre does. Material reads 0.9,
    pores 0.1 and background 0.0.
    """
    if not 0 < pitch <= 0.05 + _EPS:
        raise ValueError(f"pitch must be in (0, 0.05] mm so the smallest void spans 4 voxels, got {pitch}")
    labels = _solid_labels(spec, pitch, margin)
    for v in spec.voids:
        _carve_void(labels, v, pitch, margin)
    p = (float(pitch),) * 3
    return VoxelGrid(_intensity(labels), p), LabelMask(labels, p)


def _solid_labels(spec, pitch, margin, surface=None):
    dims = _grid_dims(spec, pitch, margin)
    ranges = [_index_range(0.0, L, pitch, margin) for L in spec.outer]
    if surface is None:
        labels = np.zeros(dims, dtype=np.uint8)
        labels[tuple(slice(a, b) for a, b in ranges)] = Label.MATERIAL
        return labels
    # surface[axis] holds (low-face, high-face) offset maps over the other two axes
    idx = [np.arange(n) for n in dims]
    inside = np.ones(dims, dtype=bool)
    for axis in range(3):
        lo_map, hi_map = surface[axis]
        other = [a for a in range(3) if a != axis]
        shape = [1, 1, 1]
        shape[axis] = dims[axis]
        coord = idx[axis].reshape(shape)
        bshape = [dims[a] if a in other else 1 for a in range(3)]
        lo = (ranges[axis][0] - lo_map).reshape(bshape)
        hi = (ranges[axis][1] + hi_map).reshape(bshape)
        inside &= (coord >= lo) & (coord < hi)
    return np.where(inside, np.uint8(Label.MATERIAL), np.uint8(Label.BACKGROUND))


def _void_distance(void, pts):
    """Signed distance (mm) from points to the void surface, negative inside."""
    c = np.asarray(void.center)
    if void.shape == "sphere":
        return np.linalg.norm(pts - c, axis=-1) - void.size[0] / 2.0
    q = np.abs(pts - c) - np.asarray(void.half_extent)
    return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)


def surface_voxel_bound(spec, pitch=DEFAULT_PITCH):
    """Largest porosity error (percentage points) rasterization can make.

    Counts the voxels whose cube can straddle a void surface (centre within
    half a voxel diagonal of it); only those can be misclassified. Assumes
    the outer faces fall on voxel faces, as they do for mm dimensions that
    are multiples of ``pitch``.
    """
    reach = math.sqrt(3.0) / 2.0 * pitch
    n = 0
    for v in spec.voids:
        lo, hi = v.bounds
        axes = []
        for a, b in zip(lo, hi):
            k0 = math.floor((a - reach) / pitch - 0.5)
            k1 = math.ceil((b + reach) / pitch - 0.5)
            axes.append((np.arange(k0, k1 + 1) + 0.5) * pitch)
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        n += int(np.count_nonzero(np.abs(_void_distance(v, pts)) <= reach))
    return 100.0 * n * pitch**3 / spec.volume


@dataclass(frozen=True)
class ProcessParams:
    """One printer setting: layer height (um), nozzle speed (mm/s), infill (%), printer code."""

    layer_height: float
    nozzle_speed: float
    infill_density: float = 100.0
    printer: int = 31

    def __post_init__(self):
        lo, hi = LAYER_HEIGHT_RANGE
        if not lo <= self.layer_height <= hi:
            raise ValueError(f"layer_height {self.layer_height} um outside [{lo}, {hi}]")
        if self.nozzle_speed not in NOZZLE_SPEEDS:
            raise ValueError(f"nozzle_speed must be one of {NOZZLE_SPEEDS}, got {self.nozzle_speed}")
        if not 0 < self.infill_density <= 100:
            raise ValueError(f"infill_density must be in (0, 100], got {self.infill_density}")
        if self.printer not in PRINTERS:
            raise ValueError(f"printer must be one of {PRINTERS}, got {self.printer}")

    def as_tuple(self):
        return (float(self.layer_height), float(self.nozzle_speed), float(self.infill_density), int(self.printer))


def reference_params(printers=PRINTERS):
    """The six (layer height, speed) settings of the experiment, for each printer."""
    settings = [(50, 30), (55, 30), (60, 30), (65, 30), (70, 30), (50, 35)]
    return [ProcessParams(h, s, 100.0, p) for p in printers for h, s in settings]


def _per_printer(value, name):
    if isinstance(value, dict):
        out = {int(k): float(v) for k, v in value.items()}
        missing = set(PRINTERS) - set(out)
        if missing:
            raise InvalidModel(f"{name} missing printers {sorted(missing)}")
        return out
    return {p: float(value) for p in PRINTERS}


@dataclass(frozen=True)
class DefectModel:
    """Printer defect model.

    Extra porosity (percent of bulk) for a setting is
    ``baseline[printer] + height_slope * |h - optimal_height[printer]|
    + speed_slope * max(0, speed - 30)``. ``baseline`` may be a single
    number or a per-printer mapping; the default ranks printer 31 best
    and 11 worst.
    """

    optimal_height: dict = field(default_factory=lambda: {11: 50.0, 21: 55.0, 31: 60.0})
    height_slope: float = 0.025
    speed_slope: float = 0.1
    baseline: object = field(default_factory=lambda: {11: 0.6, 21: 0.3, 31: 0.0})
    distortion: int = 1
    noise_sigma: float = 0.03
    blur_radius: int = 0

    def __post_init__(self):
        object.__setattr__(self, "optimal_height", _per_printer(self.optimal_height, "optimal_height"))
        object.__setattr__(self, "baseline", _per_printer(self.baseline, "baseline"))
        scalars = {
            "height_slope": self.height_slope,
            "speed_slope": self.speed_slope,
            "distortion": self.distortion,
            "noise_sigma": self.noise_sigma,
            "blur_radius": self.blur_radius,
        }
        negative = [k for k, v in {**scalars, **{f"baseline[{p}]": c for p, c in self.baseline.items()}}.items() if v < 0]
        if negative:
            raise InvalidModel(f"defect magnitudes must be >= 0: {', '.join(negative)}")
        if int(self.distortion) != self.distortion or int(self.blur_radius) != self.blur_radius:
            raise InvalidModel("distortion and blur_radius are whole voxel counts")

    @classmethod
    def zero(cls):
        return cls(baseline=0.0, height_slope=0.0, speed_slope=0.0, distortion=0, noise_sigma=0.0, blur_radius=0)

    def error(self, params):
        """Extra porosity in percentage points for ``params``."""
        h, s, _, printer = params.as_tuple()
        return (
            self.baseline[printer]
            + self.height_slope * abs(h - self.optimal_height[printer])
            + self.speed_slope * max(0.0, s - 30.0)
        )


def true_porosity(design, params, model):
    """The porosity the simulator targets: designed plus process error."""
    return designed_porosity(design) + model.error(params)


def _blob_offsets(radius):
    r = int(math.ceil(radius))
    g = np.arange(-r, r + 1)
    d = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    d = d[(d**2).sum(axis=1) <= radius**2 + _EPS]
    # carve order: centre outward, so truncated blobs stay compact
    return d[np.lexsort(((d**2).sum(axis=1),))]


_BLOB_SHAPES = [_blob_offsets(r) for r in (1.0, 1.5, 2.0, 2.5)]


def _inject_pores(labels, n_new, rng):
    """Turn ``n_new`` MATERIAL voxels into PORE as small random blobs.

    Only material at least one voxel away from the outside is eligible, so
    every injected pore stays closed.
    """
    if n_new <= 0:
        return
    dims = np.array(labels.shape)
    flat = labels.reshape(-1)
    inner = ndimage.binary_erosion(labels != Label.BACKGROUND, structure=np.ones((3, 3, 3), bool))
    eligible = inner.reshape(-1) & (flat == Label.MATERIAL)
    candidates = np.flatnonzero(eligible)
    if candidates.size < n_new:
        raise InvalidModel("process error exceeds the available material")
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    remaining = n_new
    while remaining > 0:
        seed = candidates[rng.integers(candidates.size)]
        centre = np.array(np.unravel_index(seed, labels.shape))
        pts = centre + _BLOB_SHAPES[rng.integers(len(_BLOB_SHAPES))]
        pts = pts[np.all((pts >= 0) & (pts < dims), axis=1)]
        lin = pts @ strides
        lin = lin[eligible[lin]][:remaining]
        flat[lin] = Label.PORE
        eligible[lin] = False
        remaining -= lin.size


def _surface_jitter(dims, amplitude, rng):
    maps = []
    for axis in range(3):
        shape = tuple(dims[a] for a in range(3) if a != axis)
        maps.append(tuple(rng.integers(-amplitude, amplitude + 1, size=shape) for _ in range(2)))
    return maps


def simulate_print(design, params, model, pitch=DEFAULT_PITCH, seed=0, margin=None):
    """Synthesize a scanned print of ``design`` made with ``params``.

    The mask is the ground truth after void/surface distortion and defect
    injection; the grid additionally carries blur and noise. The number of
    injected pore voxels is ``model.error(params)`` percent of the sample's
    voxel count, so mask porosity exceeds the (distorted) design porosity
    by that amount up to one voxel. Same inputs and seed give identical
    output.
    """
    err = model.error(params)
    if designed_porosity(design) + err > 100.0:
        raise InvalidModel(f"process error {err:.3f}% drives porosity above 100%")
    amp = int(model.distortion)
    margin = max(DEFAULT_MARGIN, amp + 1) if margin is None else margin
    if not 0 < pitch <= 0.05 + _EPS:
        raise ValueError(f"pitch must be in (0, 0.05] mm, got {pitch}")
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1))
    rng_shape, rng_pores, rng_noise = (np.random.default_rng(s) for s in ss.spawn(3))

    dims = _grid_dims(design, pitch, margin)
    surface = _surface_jitter(dims, amp, rng_shape) if amp else None
    labels = _solid_labels(design, pitch, margin, surface)
    for v in design.voids:
        jitter = rng_shape.integers(-amp, amp + 1, size=(3, 2)) if amp else None
        _carve_void(labels, v, pitch, margin, jitter)

    bulk = int(np.count_nonzero(labels))
    _inject_pores(labels, int(round(err / 100.0 * bulk)), rng_pores)

    values = _intensity(labels)
    if model.blur_radius:
        values = ndimage.uniform_filter(values, size=2 * int(model.blur_radius) + 1, mode="nearest")
    if model.noise_sigma:
        values = values + rng_noise.normal(0.0, model.noise_sigma, size=values.shape).astype(np.float32)
    values = np.clip(values, 0.0, 1.0)
    p = (float(pitch),) * 3
    return VoxelGrid(values, p), LabelMask(labels, p)
