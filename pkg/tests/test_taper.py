import logging

import numpy as np
import pytest

from lumen import LumenProfile
from taper import RESULT_COLUMNS, TaperError, exclude_intervals, results_frame, taper_rate


def _profile(x, area, airway_id='airway_0'):
    x = np.asarray(x, dtype=float)
    area = np.asarray(area, dtype=float)
    missing = np.isnan(area)
    return LumenProfile(airway_id=airway_id, t=x.copy(), arclength=x, area=area, missing=missing,
                        n_rays=np.where(missing, 0, 50), flags=['' for _ in x])


def test_exact_exponential():
    x = np.arange(0.0, 40.0, 0.25)
    result = taper_rate(_profile(x, 10.0 * np.exp(-0.03 * x)))
    assert result.T == pytest.approx(-0.03, abs=1e-12)
    assert result.logA == pytest.approx(np.log(10.0), abs=1e-12)
    assert result.s_err == pytest.approx(0.0, abs=1e-12)
    assert result.N == len(x)


def test_standard_error_uses_n():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    log_y = np.array([0.0, 1.0, 1.0, 3.0])
    result = taper_rate(_profile(x, np.exp(log_y)))
    slope, intercept = np.polyfit(x, log_y, 1)
    residuals = log_y - (intercept + slope * x)
    assert result.T == pytest.approx(slope)
    assert result.s_err == pytest.approx(np.sqrt(np.sum(residuals ** 2) / 4))
    np.testing.assert_allclose(result.fitted, intercept + slope * x)


def test_missing_stations_ignored():
    x = np.arange(10.0)
    area = 5.0 * np.exp(-0.02 * x)
    area[[2, 7]] = np.nan
    result = taper_rate(_profile(x, area))
    assert result.N == 8
    assert result.T == pytest.approx(-0.02)


@pytest.mark.parametrize('area', [
    [1.0, np.nan, np.nan, 2.0],
    [1.0, 0.0, 2.0, 3.0],
])
def test_invalid_profiles(area):
    with pytest.raises(TaperError):
        taper_rate(_profile(np.arange(len(area), dtype=float), area))


def test_exclude_interval_drops_stations():
    x = np.arange(0.0, 30.0, 0.5)
    p = exclude_intervals(_profile(x, np.exp(-0.01 * x)), [(10.0, 20.0)])
    kept = p.arclength[p.valid]
    assert not np.any((kept >= 10.0) & (kept <= 20.0))
    assert p.flags[int(np.flatnonzero(x == 15.0)[0])] == 'excluded'
    assert taper_rate(p).N == len(x) - 21


def test_exclude_interval_outside_profile_warns(caplog):
    x = np.arange(0.0, 10.0, 1.0)
    p = _profile(x, np.ones_like(x))
    with caplog.at_level(logging.WARNING, logger='taper'):
        out = exclude_intervals(p, [(50.0, 60.0)])
    assert 'fuori dal profilo' in caplog.text
    assert out.valid.all()


def test_results_frame_columns():
    x = np.arange(0.0, 5.0)
    results = [taper_rate(_profile(x, np.exp(-0.1 * x), f"airway_{n}")) for n in range(3)]
    df = results_frame(results)
    assert list(df.columns) == RESULT_COLUMNS
    assert df['airway_id'].tolist() == ['airway_0', 'airway_1', 'airway_2']
    np.testing.assert_allclose(df['T_per_mm'].to_numpy(), -0.1)
