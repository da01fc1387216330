import numpy as np
import pytest

from pruneseg.data import LabelVolume
from pruneseg.errors import DataError
from pruneseg.metrics import boundary_voxels, dice_score, nsd_score

from helpers import brute_force_nsd

RNG = np.random.default_rng(2024)


def lv(mask, spacing=(1.0, 1.0, 1.0)):
    return LabelVolume(np.asarray(mask, dtype=np.uint16), spacing)


def cube(dims, lo, hi):
    m = np.zeros(dims, dtype=np.uint16)
    m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return m


# ---------------------------------------------------------------------------
# dice


def test_dice_identical_nonempty():
    m = cube((8, 8, 8), (2, 2, 2), (6, 6, 6))
    assert dice_score(lv(m), lv(m.copy()), 1) == 1.0


def test_dice_disjoint():
    a = cube((8, 8, 8), (0, 0, 0), (2, 2, 2))
    b = cube((8, 8, 8), (4, 4, 4), (6, 6, 6))
    assert dice_score(lv(a), lv(b), 1) == 0.0


def test_dice_half_overlap():
    a = np.zeros((4, 4, 4), dtype=np.uint16)
    b = np.zeros((4, 4, 4), dtype=np.uint16)
    a[0, 0, 0] = a[0, 0, 1] = 1
    b[0, 0, 1] = b[0, 0, 2] = 1
    assert dice_score(lv(a), lv(b), 1) == pytest.approx(0.5)


def test_dice_both_empty_convention():
    z = np.zeros((4, 4, 4), dtype=np.uint16)
    assert dice_score(lv(z), lv(z.copy()), 1) == 1.0


def test_dice_symmetric():
    for _ in range(10):
        a = (RNG.random((6, 6, 6)) < 0.3).astype(np.uint16)
        b = (RNG.random((6, 6, 6)) < 0.3).astype(np.uint16)
        assert dice_score(lv(a), lv(b), 1) == dice_score(lv(b), lv(a), 1)


def test_dice_dim_mismatch():
    with pytest.raises(DataError):
        dice_score(lv(np.zeros((4, 4, 4))), lv(np.zeros((4, 4, 5))), 1)


def test_dice_ignores_other_labels():
    a = cube((6, 6, 6), (1, 1, 1), (4, 4, 4))
    b = a.copy()
    b[b == 0] = 2  # relabel background-only region outside cls 1
    assert dice_score(lv(a), lv(b), 1) == 1.0


# ---------------------------------------------------------------------------
# boundary extraction


def test_boundary_of_solid_cube():
    m = cube((8, 8, 8), (2, 2, 2), (6, 6, 6))
    b = boundary_voxels(m)
    # 4x4x4 cube: boundary = all but the 2x2x2 interior
    assert len(b) == 64 - 8


def test_boundary_at_grid_edge_counts():
    m = np.ones((3, 3, 3), dtype=bool)
    assert len(boundary_voxels(m)) == 26  # all but the center voxel


# ---------------------------------------------------------------------------
# nsd


def test_nsd_identical():
    m = cube((8, 8, 8), (2, 2, 2), (6, 6, 6))
    assert nsd_score(lv(m), lv(m.copy()), 1, 2.0) == 1.0


def test_nsd_empty_conventions():
    z = np.zeros((4, 4, 4), dtype=np.uint16)
    m = cube((4, 4, 4), (1, 1, 1), (3, 3, 3))
    assert nsd_score(lv(z), lv(z.copy()), 1, 2.0) == 1.0
    assert nsd_score(lv(z), lv(m), 1, 2.0) == 0.0
    assert nsd_score(lv(m), lv(z), 1, 2.0) == 0.0


def test_nsd_shifted_cube_tolerances():
    a = cube((10, 10, 10), (2, 2, 2), (5, 5, 5))
    b = cube((10, 10, 10), (3, 2, 2), (6, 5, 5))  # shifted by 1 voxel at 1mm
    assert nsd_score(lv(a), lv(b), 1, 2.0) == 1.0
    tight = nsd_score(lv(a), lv(b), 1, 0.5)
    want = brute_force_nsd(a == 1, b == 1, (1.0, 1.0, 1.0), 0.5)
    assert tight == want
    assert tight < 1.0


def test_nsd_spacing_scales_distances():
    a = cube((10, 10, 10), (2, 2, 2), (5, 5, 5))
    b = cube((10, 10, 10), (3, 2, 2), (6, 5, 5))
    # 1 voxel shift at 2mm spacing exceeds a 0.5mm tolerance everywhere it moved
    v_coarse = nsd_score(lv(a, (2., 2., 2.)), lv(b, (2., 2., 2.)), 1, 2.0)
    v_fine = nsd_score(lv(a), lv(b), 1, 2.0)
    assert v_fine == 1.0
    assert v_coarse <= v_fine


def test_nsd_spacing_mismatch():
    m = cube((4, 4, 4), (1, 1, 1), (3, 3, 3))
    with pytest.raises(DataError):
        nsd_score(lv(m), lv(m, (2.0, 2.0, 2.0)), 1, 2.0)


def test_nsd_symmetric():
    for _ in range(5):
        a = (RNG.random((8, 8, 8)) < 0.4).astype(np.uint16)
        b = (RNG.random((8, 8, 8)) < 0.4).astype(np.uint16)
        assert nsd_score(lv(a), lv(b), 1, 1.5) == nsd_score(lv(b), lv(a), 1, 1.5)


@pytest.mark.parametrize("spacing", [(1.0, 1.0, 1.0), (2.0, 2.0, 2.0)])
@pytest.mark.parametrize("tol", [0.5, 2.0])
def test_nsd_equals_brute_force_oracle(spacing, tol):
    for trial in range(12):
        dims = tuple(int(d) for d in RNG.integers(4, 12, size=3))
        a = (RNG.random(dims) < 0.35).astype(np.uint16)
        b = (RNG.random(dims) < 0.35).astype(np.uint16)
        got = nsd_score(lv(a, spacing), lv(b, spacing), 1, tol)
        want = brute_force_nsd(a == 1, b == 1, spacing, tol)
        assert got == want, f"trial {trial}: {got} vs {want}"
