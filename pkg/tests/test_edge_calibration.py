import json

import numpy as np
import pytest

from edge_calibration import (
    CALIBRATION_RADII, calibrate_edges, load_calibration, raw_edge_radius, save_calibration
)
from lumen import EdgeCalibration, LumenError
from phantom import PhantomSpec


def test_calibration_cached_per_imaging_conditions(edge_calibration):
    # forma, taper e rumore non cambiano la tabella
    other = calibrate_edges(PhantomSpec(kind='helix', r0=6.0, taper=-0.02, noise_hu=20.0, seed=3))
    assert other is edge_calibration
    assert edge_calibration.source['psf_sigma'] == pytest.approx(0.6)
    true_radius = edge_calibration.source['true_radius']
    assert set(true_radius) <= set(CALIBRATION_RADII)
    assert len(true_radius) >= len(CALIBRATION_RADII) - 1


def test_calibration_skips_unresolved_radii():
    cal = calibrate_edges(PhantomSpec(), radii=(0.5, 2.0, 3.0))
    assert cal.source['true_radius'] == [2.0, 3.0]
    assert len(cal.raw_radius) == 2


def test_calibration_needs_two_radii():
    with pytest.raises(LumenError, match="almeno 2 raggi"):
        calibrate_edges(PhantomSpec(), radii=(0.5, 3.0))


def test_raw_edge_radius_requires_zero_taper_straight_tube():
    with pytest.raises(LumenError, match="taper nullo"):
        raw_edge_radius(PhantomSpec(kind='straight', r0=3.0, taper=-0.01, length=8.0))
    with pytest.raises(LumenError, match="taper nullo"):
        raw_edge_radius(PhantomSpec(kind='helix', r0=3.0, length=8.0))


def test_save_and_load_calibration(tmp_path):
    cal = EdgeCalibration(raw_radius=(1.2, 2.7), offset=(0.3, 0.25), source={'psf_sigma': 0.6})
    path = save_calibration(cal, tmp_path / 'cal' / 'edges.json')
    assert json.loads(path.read_text())['offset'] == [0.3, 0.25]
    back = load_calibration(path)
    assert back.raw_radius == cal.raw_radius
    np.testing.assert_allclose(back.correct([2.0]), [2.0 + 0.275])


def test_load_calibration_errors(tmp_path):
    with pytest.raises(LumenError, match="Impossibile leggere"):
        load_calibration(tmp_path / 'missing.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('{"raw_radius": [1.0, 2.0], "offset": [0.1]}')
    with pytest.raises(LumenError, match="non valida"):
        load_calibration(bad)
