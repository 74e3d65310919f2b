import json

import numpy as np
import pytest

from phantom import (
    PhantomError, PhantomSpec, analytic_area, helix_turn_length, make_phantom, save_phantom
)
from volio import load_mask


def test_mask_slice_area_matches_radius(straight_phantom, straight_spec):
    ct, mask, truth = straight_phantom
    sx, sy, _ = mask.spacing
    for s in (5.0, 15.0, 25.0):
        k = int(round(mask.mm_to_index((0.0, 0.0, s))[2]))
        r = float(truth.radius(s))
        pixels = mask.data[:, :, k].sum()
        expected = np.pi * r ** 2 / (sx * sy)
        perimeter = 2 * np.pi * r / min(sx, sy)
        assert abs(pixels - expected) < perimeter


def test_ct_intensities(straight_phantom, straight_spec):
    ct, mask, _ = straight_phantom
    centre = tuple(int(i) for i in np.round(ct.mm_to_index((0.0, 0.0, 15.0))))
    assert ct.data[centre] < -990
    corner = ct.data[2, 2, centre[2]]
    assert corner == pytest.approx(straight_spec.parenchyma_hu, abs=5)
    # parete: massimo lungo x più alto del parenchima
    row = ct.data[:, centre[1], centre[2]]
    assert row.max() > straight_spec.parenchyma_hu + 300


def test_mask_ends_and_anchor_voxels(straight_phantom, straight_spec):
    _, mask, truth = straight_phantom
    start_mm = mask.index_to_mm(truth.start_voxel)
    distal_mm = mask.index_to_mm(truth.distal_voxels[0])
    assert mask.data[truth.start_voxel]
    assert mask.data[truth.distal_voxels[0]]
    np.testing.assert_allclose(start_mm, (0.0, 0.0, 1.0), atol=1e-9)
    np.testing.assert_allclose(distal_mm, (0.0, 0.0, straight_spec.length - 1.0), atol=1e-9)
    # nessun voxel di maschera oltre le estremità
    z = mask.index_to_mm(np.argwhere(mask.data))[:, 2]
    assert z.min() > 0 and z.max() < straight_spec.length


def test_ct_lumen_extends_past_mask(straight_phantom):
    ct, mask, _ = straight_phantom
    below = tuple(int(i) for i in np.round(ct.mm_to_index((0.0, 0.0, -3.0))))
    assert not mask.data[below]
    assert ct.data[below] < -990


def test_analytic_area_and_range(straight_phantom):
    _, _, truth = straight_phantom
    assert analytic_area(truth, 0.0) == pytest.approx(np.pi * 9.0)
    assert analytic_area(truth, 10.0) == pytest.approx(np.pi * 9.0 * np.exp(-0.2))
    with pytest.raises(PhantomError):
        analytic_area(truth, truth.length + 1.0)


def test_helix_turn_length():
    assert helix_turn_length(20.0, 30.0) == pytest.approx(129.2, rel=1e-3)


def test_ysplit_truth(ysplit_phantom, ysplit_spec):
    _, mask, truth = ysplit_phantom
    assert len(truth.centrelines) == 2
    assert len(truth.distal_voxels) == 2
    assert truth.distal_voxels[0] != truth.distal_voxels[1]
    assert all(mask.data[v] for v in truth.distal_voxels)
    s_split = ysplit_spec.split_position * ysplit_spec.length
    (lo, hi), = truth.bifurcation_intervals
    assert lo < s_split < hi <= ysplit_spec.length
    for airway in (0, 1):
        assert truth.arclength_of(truth.junction_mm, airway) == pytest.approx(s_split, abs=0.05)
        assert truth.arclengths[airway][-1] == pytest.approx(ysplit_spec.length)


def test_spec_dict_round_trip_and_unknown_keys():
    spec = PhantomSpec(kind='helix', r0=3.5, taper=-0.01, spacing=(0.6, 0.6, 0.8), dims=(80, 80, 60))
    assert PhantomSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    with pytest.raises(PhantomError, match="sconosciute"):
        PhantomSpec.from_dict({'kind': 'straight', 'radius': 4})


@pytest.mark.parametrize('kwargs, message', [
    ({'kind': 'torus'}, "sconosciuto"),
    ({'taper': 0.01}, "taper"),
    ({'r0': 1.2, 'taper': -0.04, 'length': 30.0}, "sotto-risolto"),
    ({'dims': (20, 20, 20)}, "esce dalla griglia"),
    ({'kind': 'ysplit', 'split_position': 1.2}, "split_position"),
])
def test_invalid_specs(kwargs, message):
    with pytest.raises(PhantomError, match=message):
        make_phantom(PhantomSpec(**kwargs))


def test_noise_is_seeded():
    spec = PhantomSpec(r0=2.5, length=12.0, noise_hu=20.0, seed=3, psf_sigma=0.0)
    a, _, _ = make_phantom(spec)
    b, _, _ = make_phantom(spec)
    np.testing.assert_array_equal(a.data, b.data)
    background = a.data[:5, :5, :].astype(float)
    assert np.std(background) == pytest.approx(20.0, rel=0.15)


def test_save_phantom_writes_all_files(tmp_path, straight_phantom):
    ct, mask, truth = straight_phantom
    paths = save_phantom(tmp_path / 'tube', ct, mask, truth)
    assert [p.name for p in paths] == ['tube_ct.mhd', 'tube_mask.mhd', 'tube_truth.json', 'tube_distal.json']
    np.testing.assert_array_equal(load_mask(paths[1]).data, mask.data)
    assert json.loads(paths[3].read_text()) == [list(v) for v in truth.distal_voxels]
    assert json.loads(paths[2].read_text())['taper'] == truth.taper


# =============================================================================
# COPERTURA PARZIALE DEI VOXEL
# =============================================================================

@pytest.mark.parametrize('f, grad, expected', [
    # piano assiale: frazione lineare nella distanza
    (0.0, (1.0, 0.0, 0.0), 0.5),
    (0.2, (1.0, 0.0, 0.0), 0.3),
    (-0.35, (2.0, 0.0, 0.0), 0.675),
    # piano diagonale per il centro
    (0.0, (1.0, 1.0, 0.0), 0.5),
    # angolo del cubo: tetraedro x + y + z < -1, volume 1/48
    (1.0 / np.sqrt(3.0), (1.0 / np.sqrt(3.0),) * 3, 1.0 / 48.0),
    # completamente dentro / fuori
    (-2.0, (0.0, 0.6, 0.8), 1.0),
    (2.0, (0.0, 0.6, 0.8), 0.0),
])
def test_box_fraction_against_plane(f, grad, expected):
    from phantom import _box_fraction
    out = _box_fraction(np.array([f]), np.array([grad], dtype=float), np.array([1.0, 1.0, 1.0]))
    assert out[0] == pytest.approx(expected, abs=1e-6)


def test_partial_volume_matches_cross_section_area():
    spec = PhantomSpec(kind='straight', r0=4.0, length=12.0, psf_sigma=0.0,
                       lumen_hu=-1000.0, wall_hu=0.0, parenchyma_hu=0.0)
    ct, _, _ = make_phantom(spec)
    sx, sy, _ = ct.spacing
    for z in (4.0, 6.0, 8.0):
        k = int(round(ct.mm_to_index((0.0, 0.0, z))[2]))
        coverage = -ct.data[:, :, k].astype(float) / 1000.0
        assert coverage.min() >= 0.0 and coverage.max() <= 1.0
        # frazioni intermedie solo sul bordo
        assert 0 < np.count_nonzero((coverage > 0.01) & (coverage < 0.99)) < 4 * np.pi * 4.0 / min(sx, sy)
        assert coverage.sum() * sx * sy == pytest.approx(np.pi * 16.0, rel=0.01)
