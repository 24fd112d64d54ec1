import math
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from amprotocol.metrology import (
    Component,
    EmptySampleError,
    NoSurfaceError,
    RoughnessProfile,
    SkewnessUndefined,
    VoidStats,
    connected_components,
    equivalent_diameter,
    extract_profile,
    porosity,
    roughness,
    roughness_summary,
    size_histogram,
)
from amprotocol.phantom import DefectModel, ProcessParams, build_design, design_d1, designed_porosity, simulate_print, surface_voxel_bound
from amprotocol.voxelcore import Label, LabelMask, SliceImage

from oracles import flood_fill_partition, labelled_partition, random_spec

PITCH = (0.05, 0.05, 0.05)


def _mask(labels, pitch=PITCH):
    return LabelMask(np.asarray(labels, dtype=np.uint8), pitch)


def test_all_material_is_dense():
    assert porosity(_mask(np.ones((3, 3, 3)))).phi == 0.0


def test_all_pore_is_fully_porous():
    assert porosity(_mask(np.full((3, 3, 3), 2))).phi == 100.0


def test_block_in_cube():
    labels = np.ones((100, 100, 100), np.uint8)
    labels[40:60, 40:60, 40:60] = Label.PORE
    rep = porosity(_mask(labels))
    assert rep.phi == pytest.approx(0.8, abs=1e-12)
    assert (rep.pore_voxels, rep.bulk_voxels) == (8000, 10**6)
    assert rep.v_pore == pytest.approx(1.0, rel=1e-6)
    assert rep.v_bulk == pytest.approx(125.0, rel=1e-6)


def test_background_is_not_bulk():
    labels = np.zeros((4, 4, 4), np.uint8)
    labels[1:3, 1:3, 1:3] = Label.MATERIAL
    labels[1, 1, 1] = Label.PORE
    assert porosity(_mask(labels)).phi == pytest.approx(100 / 8)


def test_empty_sample_rejected():
    with pytest.raises(EmptySampleError):
        porosity(_mask(np.zeros((2, 2, 2))))


def test_zero_defect_d1_within_bound():
    spec = design_d1()
    phi = porosity(build_design(spec)[1]).phi
    assert abs(phi - 1.45) <= surface_voxel_bound(spec)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_designs_within_bound(seed):
    spec = random_spec(np.random.default_rng(seed))
    assert abs(porosity(build_design(spec)[1]).phi - designed_porosity(spec)) <= surface_voxel_bound(spec)


def test_single_voxel_component():
    labels = np.ones((3, 3, 3))
    labels[1, 1, 1] = 2
    stats = connected_components(_mask(labels))
    assert len(stats.components) == 1
    c = stats.components[0]
    assert c.voxels == 1
    assert c.volume == pytest.approx(0.05**3, rel=1e-6)
    assert c.centroid == pytest.approx((0.075, 0.075, 0.075), rel=1e-6)


def test_corner_contact_depends_on_connectivity():
    labels = np.ones((2, 2, 2))
    labels[0, 0, 0] = labels[1, 1, 1] = 2
    assert len(connected_components(_mask(labels), 6).components) == 2
    assert len(connected_components(_mask(labels), 26).components) == 1


def test_no_pores_no_components():
    assert connected_components(_mask(np.ones((3, 3, 3)))).components == ()


def test_components_ordered_by_size_then_scan_position():
    labels = np.ones((6, 6, 6))
    labels[4, 0, 0] = 2  # single, scan position z=0 y=0 x=4
    labels[0, 0, 3] = 2  # single, scan position z=3: later
    labels[2:4, 2:4, 2:4] = 2  # 8 voxels
    sizes = [c.voxels for c in connected_components(_mask(labels), 6).components]
    assert sizes == [8, 1, 1]
    comps = connected_components(_mask(labels), 6).components
    assert comps[1].centroid[0] == pytest.approx(4.5 * 0.05, rel=1e-6)


@pytest.mark.parametrize("connectivity", [6, 26])
@pytest.mark.parametrize("seed", range(5))
def test_components_match_flood_fill(seed, connectivity):
    rng = np.random.default_rng(seed)
    labels = np.where(rng.uniform(size=(16, 16, 16)) < rng.uniform(0.1, 0.4), 2, 1)
    mask = _mask(labels)
    assert labelled_partition(mask, connectivity) == flood_fill_partition(labels == 2, connectivity)


@settings(max_examples=30, deadline=None)
@given(labels=hnp.arrays(np.uint8, st.tuples(*[st.integers(1, 7)] * 3), elements=st.sampled_from([0, 1, 2])), conn=st.sampled_from([6, 26]))
def test_component_volumes_sum_to_pore_volume(labels, conn):
    mask = _mask(labels)
    stats = connected_components(mask, conn)
    assert sum(c.voxels for c in stats.components) == mask.count(Label.PORE)
    assert stats.total_volume == pytest.approx(mask.count(Label.PORE) * mask.voxel_volume, rel=1e-12, abs=1e-18)
    for c in stats.components:
        assert math.pi * c.diameter**3 / 6 == pytest.approx(c.volume, rel=1e-12)


def test_ordering_is_invariant_under_mirroring_order():
    # mirroring changes scan order, but sizes still drive the numbering
    rng = np.random.default_rng(1)
    labels = np.where(rng.uniform(size=(10, 10, 10)) < 0.2, 2, 1)
    a = [c.voxels for c in connected_components(_mask(labels)).components]
    b = [c.voxels for c in connected_components(_mask(labels[::-1, ::-1, ::-1].copy())).components]
    assert a == b


def test_equivalent_diameters():
    assert equivalent_diameter(0.0141372) == pytest.approx(0.300, abs=1e-4)
    assert equivalent_diameter(0.008) == pytest.approx(0.2481, abs=1e-4)


def _stats_with_volumes(volumes):
    return VoidStats(tuple(Component(i + 1, 1, v, equivalent_diameter(v), (0, 0, 0)) for i, v in enumerate(volumes)), 26)


def test_histogram_bins_equivalent_diameter():
    counts = size_histogram(_stats_with_volumes([0.0141372]), [0.15, 0.25, 0.35, 0.5])
    # underflow, [0.15,0.25), [0.25,0.35), [0.35,0.5), overflow
    assert counts.tolist() == [0, 0, 1, 0, 0]


def test_histogram_overflow_bins():
    counts = size_histogram(_stats_with_volumes([1e-6, 10.0]), [0.1, 0.2])
    assert counts.tolist() == [1, 0, 1]


def test_histogram_of_nothing():
    assert size_histogram(_stats_with_volumes([]), [0.1, 0.2, 0.3]).tolist() == [0, 0, 0, 0]


def test_histogram_rejects_bad_edges():
    with pytest.raises(ValueError):
        size_histogram(_stats_with_volumes([]), [0.2, 0.1])


def test_sine_profile():
    x = np.arange(10000) / 10000 * 2 * np.pi * 10
    rep = roughness(RoughnessProfile(np.sin(x), 0.001))
    assert rep.ra == pytest.approx(2 / np.pi, abs=1e-3)
    assert rep.rq == pytest.approx(1 / np.sqrt(2), abs=1e-3)
    assert rep.rsk == pytest.approx(0.0, abs=1e-3)


def test_square_wave_profile():
    rep = roughness(np.tile([2.5, -2.5], 50))
    assert (rep.ra, rep.rq, rep.rsk) == (2.5, 2.5, 0.0)


def test_four_point_hand_case():
    rep = roughness([3.0, -1.0, -1.0, -1.0])
    assert rep.ra == pytest.approx(1.5, abs=1e-12)
    assert rep.rq == pytest.approx(math.sqrt(3), abs=1e-12)
    assert rep.rsk == pytest.approx(2 / math.sqrt(3), abs=1e-12)


def test_flat_profile_has_no_skewness():
    with pytest.raises(SkewnessUndefined) as err:
        roughness(np.zeros(5))
    assert err.value.report.ra == 0.0


def test_roughness_needs_two_samples():
    with pytest.raises(ValueError):
        roughness([1.0])


profiles = hnp.arrays(np.float64, st.integers(2, 40), elements=st.floats(-10, 10)).filter(lambda z: np.ptp(z) > 1e-3)


@settings(max_examples=100, deadline=None)
@given(z=profiles, scale=st.floats(0.1, 10))
def test_roughness_scaling_properties(z, scale):
    z = z - z.mean()
    base = roughness(z)
    assert base.rq >= base.ra - 1e-12
    scaled = roughness(scale * z)
    assert scaled.ra == pytest.approx(scale * base.ra, rel=1e-9)
    assert scaled.rq == pytest.approx(scale * base.rq, rel=1e-9)
    assert scaled.rsk == pytest.approx(base.rsk, rel=1e-6, abs=1e-9)
    assert roughness(-z).rsk == pytest.approx(-base.rsk, rel=1e-9, abs=1e-12)


def _slab(heights, depth=8):
    """XY slice of a solid whose surface sits ``heights[i]`` voxels above y = 0 at column i."""
    img = np.zeros((len(heights), depth), np.uint8)
    for i, h in enumerate(heights):
        img[i, h:] = Label.MATERIAL
    return SliceImage("XY", 0, img, (0.05, 0.05))


def test_flat_surface_profile_is_zero():
    prof = extract_profile(_slab([2] * 10), "XY")
    assert np.all(prof.z == 0)
    assert prof.sampling_length == pytest.approx(9 * 0.05)


def test_step_surface_profile():
    prof = extract_profile(_slab([0] * 5 + [2] * 5), "XY")
    np.testing.assert_allclose(prof.z, [-50.0] * 5 + [50.0] * 5)  # one voxel is 50 um


def test_profile_needs_material():
    with pytest.raises(NoSurfaceError):
        extract_profile(_slab([8] * 4), "XY")


def test_sinusoidal_surface_is_recovered():
    n, amp = 200, 3
    carved = amp * np.sin(np.arange(n) / n * 2 * np.pi * 4)
    heights = np.rint(amp + carved).astype(int)
    labels = np.zeros((n, 20, 3), np.uint8)
    for i, h in enumerate(heights):
        labels[i, h:, :] = Label.MATERIAL
    prof = extract_profile(_mask(labels), "XY", 1)
    z_vox = prof.z / 50.0
    assert np.all(np.abs(z_vox - (carved - carved.mean())) <= 1.0)


def test_flat_phantom_roughness_summary():
    _, mask = build_design(design_d1(2.0))
    s = roughness_summary(mask, "XY")
    assert s.ra["min"] == s.ra["median"] == 0.0


def test_isotropic_phantom_planes_agree():
    spec = design_d1(2.0)
    model = DefectModel(distortion=2, noise_sigma=0)
    _, mask = simulate_print(spec, ProcessParams(60, 30, 100, 31), model, seed=0)
    xy, xz = roughness_summary(mask, "XY"), roughness_summary(mask, "XZ")
    assert xy.ra["median"] == pytest.approx(xz.ra["median"], rel=0.25)


def test_more_distortion_means_rougher():
    spec = design_d1(2.0)
    medians = []
    for amp in (0, 1, 2):
        model = DefectModel(distortion=amp, noise_sigma=0)
        _, mask = simulate_print(spec, ProcessParams(60, 30, 100, 31), model, seed=0)
        medians.append(roughness_summary(mask, "XY").ra["median"])
    assert medians[0] < medians[1] < medians[2]
