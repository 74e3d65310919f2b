import json
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy.stats import rankdata

from bench import (
    BenchError, ExperimentConfig, REPORT_COLUMNS, SweepReport, _grid_specs, bland_altman,
    compare_groups, compare_measurements, icc, load_config, run_bifurcation_study, run_dose_sweep,
    run_noise_table, run_scale_sweep, spearman_trend, wilcoxon_ranksum, write_report
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / 'configs'


# =============================================================================
# BLAND-ALTMAN
# =============================================================================

def test_bland_altman_known_values():
    a = [1.0, 2.0, 3.0, 4.0]
    b = [0.0, 2.0, 2.0, 5.0]
    st = bland_altman(a, b)
    assert st.bias == pytest.approx(0.25)
    assert st.std == pytest.approx(np.sqrt(2.75 / 3))
    assert st.lower == pytest.approx(0.25 - 1.96 * st.std)
    assert st.upper == pytest.approx(0.25 + 1.96 * st.std)
    assert st.r == pytest.approx(np.corrcoef(a, b)[0, 1])
    assert st.n == 4
    assert st.r_defined


def test_bland_altman_constant_series():
    st = bland_altman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    assert st.r == 1.0
    assert not st.r_defined
    assert st.bias == pytest.approx(-1.0)


def test_bland_altman_swap_and_offset(rng):
    a = rng.normal(-0.02, 0.01, 74)
    b = a + rng.normal(0.0, 0.005, 74)
    ab, ba = bland_altman(a, b), bland_altman(b, a)
    assert ab.bias == pytest.approx(-ba.bias)
    assert ab.std == pytest.approx(ba.std)
    assert 0.004 <= ab.std <= 0.006

    shifted = bland_altman(a + 0.01, a)
    assert shifted.bias == pytest.approx(0.01)
    assert shifted.std == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize('a, b', [
    ([1.0, 2.0], [1.0]),
    ([1.0], [2.0]),
])
def test_bland_altman_errors(a, b):
    with pytest.raises(BenchError):
        bland_altman(a, b)


# =============================================================================
# WILCOXON / ICC / SPEARMAN
# =============================================================================

def test_wilcoxon_separated_triplets():
    assert wilcoxon_ranksum([1, 2, 3], [4, 5, 6]) == pytest.approx(0.1)


def _permutation_p(x, y):
    """Enumerazione completa: frazione delle assegnazioni con |R - E| >= osservato (ranghi medi)."""
    ranks = rankdata(np.concatenate([x, y]))
    n = len(x)
    expected = n * (len(ranks) + 1) / 2.0
    observed = abs(ranks[:n].sum() - expected)
    dist = np.array([abs(ranks[list(c)].sum() - expected) for c in combinations(range(len(ranks)), n)])
    return float(np.mean(dist >= observed - 1e-9))


@pytest.mark.parametrize('x, y', [
    ([1.1, 2.5, 3.7, 0.4], [5.2, 4.4, 2.9, 6.1, 3.3]),
    ([1.0, 1.0, 2.0, 2.0, 3.0], [3.0, 4.0, 4.0, 5.0, 5.0, 6.0]),
    ([0.2, 0.2, 0.2, 0.5, 0.7, 0.9], [0.2, 0.5, 0.5, 0.8, 1.0, 1.0]),
    ([2.0], [1.0, 3.0, 3.0]),
])
def test_wilcoxon_matches_permutation(x, y):
    x, y = np.array(x), np.array(y)
    assert wilcoxon_ranksum(x, y) == pytest.approx(_permutation_p(x, y))


def test_wilcoxon_small_sample_with_ties():
    # 2 assegnazioni con la somma minima e 1 con la massima su C(11, 5) = 462
    p = wilcoxon_ranksum([1, 1, 2, 2, 3], [3, 4, 4, 5, 5, 6])
    assert p == pytest.approx(3 / 462)


def test_wilcoxon_extremes():
    x = [0.5, 1.5, 2.5, 3.5]
    assert wilcoxon_ranksum(x, list(x)) >= 0.99
    assert wilcoxon_ranksum(np.arange(20.0), np.arange(20.0) + 100.0) < 1e-6


def test_wilcoxon_large_samples_with_ties(rng):
    x = np.round(rng.normal(0.0, 1.0, 40), 1)
    y = np.round(rng.normal(0.0, 1.0, 40), 1)
    p = wilcoxon_ranksum(x, y)
    assert 0.0 <= p <= 1.0
    with pytest.raises(BenchError):
        wilcoxon_ranksum([], [1.0])


def test_icc_reference_table():
    # 6 soggetti x 4 valutatori
    ratings = [
        [9, 2, 5, 8],
        [6, 1, 3, 2],
        [8, 4, 6, 8],
        [7, 1, 2, 6],
        [10, 5, 6, 9],
        [6, 2, 4, 7],
    ]
    result = icc(ratings)
    assert float(result) == pytest.approx(0.29, abs=0.005)
    assert not result.degenerate
    assert (result.n, result.k) == (6, 4)


def test_icc_perfect_and_degenerate():
    assert icc([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]).value == pytest.approx(1.0)
    flat = icc(np.full((4, 2), 7.0))
    assert flat.degenerate
    assert flat.value == 1.0
    with pytest.raises(BenchError):
        icc([[1.0, 2.0]])


def test_icc_penalises_offset_and_noise(rng):
    first = np.arange(10.0)
    assert icc(np.column_stack([first, first + 20.0])).value < 0.5
    independent = rng.normal(size=(100, 2))
    assert abs(icc(independent).value) < 0.3


def test_spearman_trend():
    grid = [1.0, 2.0, 3.0, 4.0]
    assert spearman_trend([0.1, 0.3, 0.2, 0.9], grid) == pytest.approx(0.8)
    assert spearman_trend([4.0, np.nan, 2.0, 1.0], grid) == pytest.approx(-1.0)
    assert np.isnan(spearman_trend([1.0, 1.0, 1.0, 1.0], grid))
    assert np.isnan(spearman_trend([1.0, np.nan, np.nan, 2.0], grid))


# =============================================================================
# CONFRONTI
# =============================================================================

def test_compare_groups():
    out = compare_groups([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])
    assert out['mean_difference'] == pytest.approx(-3.0)
    assert out['median_difference'] == pytest.approx(-3.0)
    assert out['p_value'] == pytest.approx(0.1)
    assert (out['n_x'], out['n_y']) == (3, 3)


def test_compare_measurements_joins_on_airway():
    a = pd.DataFrame({'airway_id': ['airway_0', 'airway_1', 'airway_2', 'airway_3'],
                      'T_per_mm': [-0.010, -0.020, -0.015, -0.030]})
    b = pd.DataFrame({'airway_id': ['airway_3', 'airway_1', 'airway_0', 'airway_9'],
                      'T_per_mm': [-0.028, -0.021, -0.012, -0.050]})
    out = compare_measurements(a, b)
    assert out['n'] == 3
    # differenze a - b: airway_0 0.002, airway_1 0.001, airway_3 -0.002
    assert out['agreement']['bias'] == pytest.approx(0.001 / 3)
    assert -1.0 <= out['icc']['value'] <= 1.0
    assert 0.0 <= out['wilcoxon_p'] <= 1.0


def test_compare_measurements_errors():
    a = pd.DataFrame({'airway_id': ['airway_0'], 'T_per_mm': [-0.01]})
    with pytest.raises(BenchError, match="colonne"):
        compare_measurements(a, pd.DataFrame({'airway_id': ['airway_0']}))
    with pytest.raises(BenchError, match="in comune"):
        compare_measurements(a, a)


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

def test_config_hash_and_unknown_keys():
    a = ExperimentConfig.from_dict({'name': 'x', 'seed': 3, 'lambdas': [1.0, 2.0]})
    b = ExperimentConfig.from_dict({'lambdas': [1.0, 2.0], 'seed': 3, 'name': 'x'})
    assert a.config_hash == b.config_hash
    assert len(a.config_hash) == 64
    assert ExperimentConfig.from_dict({'name': 'x', 'seed': 4, 'lambdas': [1.0, 2.0]}).config_hash != a.config_hash
    with pytest.raises(BenchError, match="sconosciute"):
        ExperimentConfig.from_dict({'name': 'x', 'lamdas': [1.0]})


def test_load_config(tmp_path):
    path = tmp_path / 'cfg.json'
    path.write_text(json.dumps({'name': 'prova', 'scales': [1.5], 'workers': 2}))
    cfg = load_config(path)
    assert cfg.name == 'prova'
    assert cfg.scales == [1.5]
    assert cfg.n_angles == 1791
    with pytest.raises(BenchError):
        load_config(tmp_path / 'manca.json')
    broken = tmp_path / 'broken.json'
    broken.write_text('{name: ')
    with pytest.raises(BenchError):
        load_config(broken)


def test_grid_specs_are_reproducible():
    grid = {'count': 6, 'kinds': ['straight', 'helix'], 'r0': [2.0, 6.0], 'taper': [-0.04, 0.0],
            'length': [40.0, 60.0], 'noise_hu': 10.0}
    first = _grid_specs(grid, seed=5)
    assert first == _grid_specs(grid, seed=5)
    assert first != _grid_specs(grid, seed=6)
    assert [s['kind'] for s in first] == ['straight', 'helix'] * 3
    assert [s['name'] for s in first] == [f"grid_{n:02d}" for n in range(6)]
    for s in first:
        assert 2.0 <= s['r0'] <= 6.0
        assert -0.04 <= s['taper'] <= 0.0
        assert s['noise_hu'] == 10.0
    assert grid['count'] == 6


# =============================================================================
# REPORT
# =============================================================================

@pytest.fixture
def hand_report():
    pairs = {
        2.0: {'taper': ([-0.011, -0.019, -0.031], [-0.010, -0.020, -0.030])},
        3.0: {'taper': ([-0.014, -0.016, -0.036], [-0.010, -0.020, -0.030])},
    }
    stats = {p: {m: bland_altman(a, b) for m, (a, b) in d.items()} for p, d in pairs.items()}
    return SweepReport(sweep='dose', grid=[2.0, 3.0], stats=stats, pairs=pairs, tn={2.0: 31.5, 3.0: 120.2},
                       seed=11, config_hash='abc123', tn_baseline=20.0,
                       failures=[{'phantom': 'p0', 'parameter': 3.0, 'stage': 'lumen', 'error': 'few rays'}],
                       trends={'taper_std_spearman': 1.0})


def test_report_frame(hand_report):
    df = hand_report.to_frame()
    assert list(df.columns) == REPORT_COLUMNS
    assert df['parameter'].tolist() == [2.0, 3.0]
    assert df['T_n'].tolist() == [31.5, 120.2]
    assert hand_report.series('taper', 'n') == [3, 3]
    assert np.isnan(hand_report.series('area', 'bias')[0])


def test_write_report_is_byte_stable(hand_report, tmp_path):
    cfg = ExperimentConfig(name='prova', seed=11, pdf=True)
    first = write_report(hand_report, cfg, tmp_path / 'a')
    second = write_report(hand_report, cfg, tmp_path / 'b')

    assert first['report'].read_bytes() == second['report'].read_bytes()
    assert [p.name for p in first['plots']] == [p.name for p in second['plots']]
    assert {p.name for p in first['plots']} == {
        'dose_taper_trend.svg', 'dose_taper_bland_altman_2.svg', 'dose_taper_bland_altman_3.svg'}
    for a, b in zip(first['plots'], second['plots']):
        assert a.read_bytes() == b.read_bytes()

    manifest = json.loads(first['manifest'].read_text())
    assert manifest['seed'] == 11
    assert manifest['config_sha256'] == 'abc123'
    assert manifest['failures'][0]['stage'] == 'lumen'
    assert 'numpy' in manifest['versions']
    assert first['pdf'].exists()
    assert first['pdf'].read_bytes() == second['pdf'].read_bytes()


# =============================================================================
# ESPERIMENTI (lenti)
# =============================================================================

@pytest.mark.slow
def test_noise_table_orders_lambdas():
    cfg = ExperimentConfig(
        tn_phantoms=[{'kind': 'straight', 'r0': 9.0, 'length': 70.0, 'spacing': [1.0, 1.0, 1.0], 'name': 'trachea'}],
        lambdas=[2.0, 3.0, 4.0], n_angles=180, calibrate_noise=True, seed=2,
    )
    table = run_noise_table(cfg)
    column = table['trachea']
    assert list(table.index) == ['ground_truth', 'round_trip', '2', '3', '4']
    assert column['ground_truth'] == pytest.approx(0.0, abs=1.0)
    assert column['round_trip'] < column['2'] < column['3'] < column['4']


@pytest.mark.slow
def test_noise_table_reference_config():
    cfg = load_config(CONFIG_DIR / 'noise_table.json')
    cfg.lambdas = [1.0, 2.0, 2.5, 3.5, 5.0]
    cfg.workers = 1
    table = run_noise_table(cfg)
    assert list(table.columns) == ['trachea_a', 'trachea_b']
    for name in table.columns:
        column = table[name]
        # rumore aggiunto trascurabile fino a lambda = 2
        assert abs(column['1'] - column['round_trip']) < 0.5
        assert abs(column['2'] - column['round_trip']) < 0.5
        assert column['2.5'] < column['3.5'] < column['5']
        # ~25 mAs: T_n massimo intorno a 55 HU
        assert 40.0 <= column['3.5'] <= 60.0


SWEEP_PHANTOMS = [
    {'kind': 'straight', 'r0': 3.5, 'taper': -0.02, 'length': 30.0, 'name': 's0'},
    {'kind': 'helix', 'r0': 3.5, 'taper': -0.01, 'length': 30.0, 'name': 'h0'},
    {'kind': 'straight', 'r0': 4.0, 'taper': -0.015, 'length': 26.0, 'name': 's1'},
    {'kind': 'helix', 'r0': 3.8, 'taper': -0.025, 'length': 34.0, 'name': 'h1'},
    {'kind': 'straight', 'r0': 3.2, 'taper': 0.0, 'length': 38.0, 'name': 's2'},
]


@pytest.mark.slow
def test_dose_sweep_agreement_and_noise_trend():
    cfg = ExperimentConfig(name='dose_test', phantoms=SWEEP_PHANTOMS, lambdas=[1.0, 2.5, 3.5, 4.0],
                           n_angles=180, calibrate_noise=True, seed=5)
    report = run_dose_sweep(cfg)
    assert report.grid == [1.0, 2.5, 3.5, 4.0]
    for lam in (1.0, 2.5, 3.5):
        st = report.stats[lam]['taper']
        assert st.n == len(SWEEP_PHANTOMS)
        assert st.lower >= -0.005
        assert st.upper <= 0.005
    std = report.series('taper', 'std')
    assert std[-1] > std[0]
    assert report.trends['taper_std_spearman'] > 0
    assert report.trends['T_n_spearman'] > 0
    assert report.tn[4.0] > report.tn[1.0]


@pytest.mark.slow
def test_scale_sweep_agreement_and_bias_trend():
    cfg = ExperimentConfig(name='scale_test', phantoms=SWEEP_PHANTOMS, scales=[1.2, 1.4, 1.5, 1.7], seed=5)
    report = run_scale_sweep(cfg)
    for scale in (1.2, 1.4, 1.5):
        st = report.stats[scale]['taper']
        assert st.lower >= -0.005
        assert st.upper <= 0.005
    for scale in report.grid:
        assert report.stats[scale]['arclength'].r > 0.98
    # voxel più grandi: bordo più interno sui tubi sottili, taper più ripido
    assert report.trends['taper_bias_spearman'] < 0
    assert all(np.isnan(report.tn[s]) for s in report.grid)


@pytest.mark.slow
def test_dose_sweep_report_is_byte_identical(tmp_path):
    cfg = ExperimentConfig(name='dose_repeat', phantoms=SWEEP_PHANTOMS[:2], lambdas=[2.0, 3.0],
                           n_angles=120, calibrate_noise=True, seed=9)
    first = write_report(run_dose_sweep(cfg), cfg, tmp_path / 'a')
    second = write_report(run_dose_sweep(cfg), cfg, tmp_path / 'b')
    assert first['report'].read_bytes() == second['report'].read_bytes()
    frame = pd.read_csv(first['report'])
    assert set(frame['metric']) == {'taper', 'area'}
    assert frame['parameter'].unique().tolist() == [2.0, 3.0]


@pytest.mark.slow
def test_bifurcation_exclusion_lowers_fit_error():
    cfg = ExperimentConfig(phantoms=[
        {'kind': 'ysplit', 'r0': 3.5, 'taper': -0.015, 'length': 80.0, 'split_position': 0.3, 'name': 'y1'},
        {'kind': 'ysplit', 'r0': 4.0, 'taper': -0.01, 'length': 75.0, 'split_position': 0.3, 'name': 'y2'},
    ])
    out = run_bifurcation_study(cfg)
    table = out['table']
    assert len(table) == 4
    assert (table['N_excluded'] < table['N_full']).all()
    assert (table['s_err_excluded'] < table['s_err_full']).all()
    # la regressione non cambia oltre il 10% del taper vero
    assert ((table['T_excluded'] - table['T_full']).abs() < 0.1 * table['T_gt'].abs()).all()
    assert (table['dT_rel'] < 0.1).all()
    assert 0.0 <= out['s_err_p'] <= 1.0


@pytest.mark.parametrize('name', ['dose_sweep', 'scale_sweep', 'bifurcation', 'noise_table'])
def test_reference_configs_load(name):
    cfg = load_config(CONFIG_DIR / f"{name}.json")
    assert cfg.name == name
    assert cfg.phantoms or cfg.phantom_grid or cfg.tn_phantoms
