"""
Bench - Statistiche e Esperimenti di Riproducibilità
====================================================
Statistiche di concordanza (Bland-Altman, Pearson r, Wilcoxon rank-sum,
ICC(2,1)) e orchestrazione degli esperimenti su fantocci:

- sweep di dose (lambda) con la stessa maschera, gli stessi punti distali
  e le stesse spline della misura di riferimento
- sweep di dimensione voxel (sigma_s) con linea centrale ricalcolata
- studio delle biforcazioni (taper con e senza le regioni di biforcazione)
- tabella del rumore T_n per lambda

Output: report.csv (una riga per parametro x metrica), plots/*.svg,
run-manifest.json (seme, versioni, hash della configurazione), report.pdf opzionale.

Uso:
    from bench import load_config, run_dose_sweep, write_report

    cfg = load_config('configs/dose_sweep.json')
    report = run_dose_sweep(cfg)
    write_report(report, cfg)
"""

import hashlib
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, fields
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Any, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import mannwhitneyu, pearsonr, permutation_test, rankdata, spearmanr
from tqdm import tqdm

from ctsim import (
    dose_angles, measure_Tn, rescale_mask, rescale_points, rescale_volume, simulate_dose
)
from edge_calibration import calibrate_edges
from lumen import EdgeCalibration
from phantom import PhantomSpec, PhantomTruth, make_phantom
from skeleton import SkeletonError, find_trachea_start
from taper import exclude_intervals, taper_rate
from taper_engine import extract_centrelines, measure_splines
from volio import CTVolume, BinaryMask

logger = logging.getLogger(__name__)


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

LAMBDA_GRID = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0]
SCALE_GRID = [1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0]

# Moltiplicatore dei limiti di concordanza al 95%
LIMITS_Z = 1.96

# Soglia per il test esatto di Wilcoxon senza pareggi
EXACT_MAX_N = 10

# Fino a n_x + n_y campioni il p-value viene da enumerazione completa delle permutazioni
PERMUTATION_MAX_N = 12

REPORT_COLUMNS = ['sweep', 'parameter', 'metric', 'n', 'bias', 'std', 'lower', 'upper', 'pearson_r', 'T_n']

MANIFEST_PACKAGES = ['numpy', 'scipy', 'scikit-image', 'SimpleITK', 'pandas', 'networkx', 'matplotlib']


class BenchError(ValueError):
    """Input statistici o configurazione non validi."""


# =============================================================================
# TIPI
# =============================================================================

@dataclass
class AgreementStats:
    """Bland-Altman: bias e deviazione standard delle differenze a - b, limiti al 95%."""

    bias: float
    std: float
    lower: float
    upper: float
    r: float
    n: int
    r_defined: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class IccResult:
    value: float
    degenerate: bool
    n: int
    k: int

    def __float__(self) -> float:
        return float(self.value)


@dataclass
class ExperimentConfig:
    """Ricetta di un esperimento (file JSON in configs/)."""

    name: str = 'sweep'
    phantoms: List[Dict[str, Any]] = field(default_factory=list)
    phantom_grid: Optional[Dict[str, Any]] = None
    tn_phantoms: List[Dict[str, Any]] = field(default_factory=list)
    lambdas: List[float] = field(default_factory=lambda: list(LAMBDA_GRID))
    scales: List[float] = field(default_factory=lambda: list(SCALE_GRID))
    seed: int = 0
    n_angles: int = 1791
    calibrate_noise: bool = False
    edge_calibration: bool = True
    workers: int = 1
    output_dir: str = 'results'
    pdf: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'ExperimentConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise BenchError(f"Chiavi sconosciute nella configurazione: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class PhantomCase:
    name: str
    spec: PhantomSpec
    ct: CTVolume
    mask: BinaryMask
    truth: PhantomTruth
    calibration: Optional[EdgeCalibration] = None


@dataclass
class SweepReport:
    """Statistiche per valore del parametro e per metrica, con provenienza."""

    sweep: str
    grid: List[float]
    stats: Dict[float, Dict[str, AgreementStats]]
    pairs: Dict[float, Dict[str, Tuple[List[float], List[float]]]]
    tn: Dict[float, float]
    seed: int
    config_hash: str
    tn_baseline: Optional[float] = None
    failures: List[Dict[str, Any]] = field(default_factory=list)
    trends: Dict[str, float] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for param in self.grid:
            for metric, st in self.stats.get(param, {}).items():
                rows.append({
                    'sweep': self.sweep,
                    'parameter': param,
                    'metric': metric,
                    'n': st.n,
                    'bias': st.bias,
                    'std': st.std,
                    'lower': st.lower,
                    'upper': st.upper,
                    'pearson_r': st.r,
                    'T_n': self.tn.get(param, np.nan),
                })
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def series(self, metric: str, attr: str) -> List[float]:
        return [getattr(self.stats[p][metric], attr) if metric in self.stats.get(p, {}) else np.nan
                for p in self.grid]


# =============================================================================
# STATISTICHE
# =============================================================================

def bland_altman(a: Sequence[float], b: Sequence[float]) -> AgreementStats:
    """
    Concordanza tra due serie appaiate.

    Pearson r è calcolato tra le due serie grezze; se una serie è costante
    r vale 1 per convenzione (r_defined=False).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise BenchError(f"Serie di lunghezza diversa: {a.shape} vs {b.shape}")
    if len(a) < 2:
        raise BenchError(f"Servono almeno 2 coppie, ricevute {len(a)}")
    d = a - b
    bias = float(np.mean(d))
    std = float(np.std(d, ddof=1))
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        r, defined = 1.0, False
    else:
        r, defined = float(pearsonr(a, b)[0]), True
    return AgreementStats(bias=bias, std=std, lower=bias - LIMITS_Z * std, upper=bias + LIMITS_Z * std,
                          r=r, n=len(a), r_defined=defined)


def _rank_sum_distance(x: np.ndarray, y: np.ndarray) -> float:
    """|R_x - n_x (n + 1) / 2| con ranghi medi sul campione unito."""
    ranks = rankdata(np.concatenate([x, y]))
    n = len(x) + len(y)
    return float(abs(ranks[:len(x)].sum() - len(x) * (n + 1) / 2.0))


def wilcoxon_ranksum(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Wilcoxon rank-sum bilaterale.

    - n_x + n_y <= 12: enumerazione completa delle permutazioni, ranghi medi
      per i pareggi, p = frazione delle assegnazioni con |R - E| >= osservato
    - min(n_x, n_y) <= 10 senza pareggi: distribuzione esatta
    - altrimenti approssimazione normale con correzione per i pareggi
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0 or len(y) == 0:
        raise BenchError("Campioni vuoti per il test di Wilcoxon")
    if len(x) + len(y) <= PERMUTATION_MAX_N:
        res = permutation_test((x, y), _rank_sum_distance, permutation_type='independent',
                               vectorized=False, n_resamples=np.inf, alternative='greater')
        return float(min(1.0, res.pvalue))
    pooled = np.concatenate([x, y])
    ties = len(np.unique(pooled)) < len(pooled)
    method = 'exact' if min(len(x), len(y)) <= EXACT_MAX_N and not ties else 'asymptotic'
    p = mannwhitneyu(x, y, alternative='two-sided', method=method).pvalue
    return float(min(1.0, p))


def icc(ratings: Any) -> IccResult:
    """
    ICC(2,1): effetti casuali a due vie, concordanza assoluta, misura singola.

    Args:
        ratings: matrice n soggetti x k misure (per coppie: n x 2)
    """
    x = np.asarray(ratings, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise BenchError(f"Servono almeno 2 soggetti e 2 misure, forma {x.shape}")
    n, k = x.shape
    grand = x.mean()
    row = x.mean(axis=1)
    col = x.mean(axis=0)
    msr = k * np.sum((row - grand) ** 2) / (n - 1)
    msc = n * np.sum((col - grand) ** 2) / (k - 1)
    mse = np.sum((x - row[:, None] - col[None, :] + grand) ** 2) / ((n - 1) * (k - 1))
    denom = msr + (k - 1) * mse + k * (msc - mse) / n
    if np.ptp(x) == 0 or denom == 0:
        logger.warning("ICC con varianza degenere: riportato 1")
        return IccResult(value=1.0, degenerate=True, n=n, k=k)
    return IccResult(value=float((msr - mse) / denom), degenerate=False, n=n, k=k)


def spearman_trend(values: Sequence[float], grid: Sequence[float]) -> float:
    """Correlazione di Spearman tra il parametro e la statistica (NaN esclusi)."""
    v = np.asarray(values, dtype=float)
    g = np.asarray(grid, dtype=float)
    ok = ~np.isnan(v)
    if ok.sum() < 3 or np.ptp(v[ok]) == 0:
        return float('nan')
    return float(spearmanr(g[ok], v[ok])[0])


def compare_groups(x: Sequence[float], y: Sequence[float]) -> Dict[str, Any]:
    """Confronto tra due popolazioni di taper (medie, mediane, Wilcoxon rank-sum)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return {
        'n_x': len(x),
        'n_y': len(y),
        'mean_x': float(np.mean(x)),
        'mean_y': float(np.mean(y)),
        'mean_difference': float(np.mean(x) - np.mean(y)),
        'median_difference': float(np.median(x) - np.median(y)),
        'p_value': wilcoxon_ranksum(x, y),
    }


def compare_measurements(a: pd.DataFrame, b: pd.DataFrame, column: str = 'T_per_mm') -> Dict[str, Any]:
    """
    Confronto appaiato di due tabelle di risultati unite su airway_id
    (es. due kernel di ricostruzione o due scansioni nel tempo).
    """
    for name, df in (('a', a), ('b', b)):
        if 'airway_id' not in df or column not in df:
            raise BenchError(f"La tabella {name} deve avere le colonne airway_id e {column}")
    merged = a[['airway_id', column]].merge(b[['airway_id', column]], on='airway_id', suffixes=('_a', '_b'))
    merged = merged.dropna()
    if len(merged) < 2:
        raise BenchError(f"Solo {len(merged)} vie aeree in comune tra le due tabelle")
    va = merged[f'{column}_a'].to_numpy()
    vb = merged[f'{column}_b'].to_numpy()
    return {
        'column': column,
        'n': len(merged),
        'agreement': bland_altman(va, vb).to_dict(),
        'icc': asdict(icc(np.column_stack([va, vb]))),
        'wilcoxon_p': wilcoxon_ranksum(va, vb),
    }


# =============================================================================
# CONFIGURAZIONE ESPERIMENTI
# =============================================================================

def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise BenchError(f"Configurazione non leggibile: {path} ({e})") from e
    return ExperimentConfig.from_dict(data)


def _grid_specs(grid: Dict[str, Any], seed: int) -> List[Dict[str, Any]]:
    """
    Specifiche casuali ma riproducibili da una griglia:
    {'count': n, 'kinds': [...], 'r0': [min, max], 'taper': [min, max], 'length': [min, max], ...}
    Le altre chiavi sono copiate in ogni specifica.
    """
    grid = dict(grid)
    count = int(grid.pop('count', 10))
    kinds = grid.pop('kinds', ['straight'])
    ranges = {k: grid.pop(k) for k in ('r0', 'taper', 'length') if isinstance(grid.get(k), list)}
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    specs = []
    for n in range(count):
        spec = dict(grid)
        spec['kind'] = kinds[n % len(kinds)]
        for key, (lo, hi) in ranges.items():
            spec[key] = round(float(rng.uniform(lo, hi)), 4)
        spec['name'] = f"grid_{n:02d}"
        specs.append(spec)
    return specs


def build_phantoms(specs: List[Dict[str, Any]], edge_calibration: bool = False) -> List[PhantomCase]:
    """Fantocci dalle specifiche; con edge_calibration ognuno porta la sua tabella di correzione del bordo."""
    cases = []
    for n, d in enumerate(specs):
        spec = PhantomSpec.from_dict(d)
        ct, mask, truth = make_phantom(spec)
        calibration = calibrate_edges(spec) if edge_calibration else None
        cases.append(PhantomCase(name=spec.name or f"phantom_{n:02d}", spec=spec, ct=ct, mask=mask, truth=truth,
                                 calibration=calibration))
    return cases


def _phantom_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), 1000 + int(index)]).generate_state(1)[0])


def _start_voxel(mask: BinaryMask, fallback: Any) -> Tuple[int, int, int]:
    """Inizio trachea dalla maschera; se la ricerca fallisce si usa il voxel di riserva."""
    try:
        return find_trachea_start(mask)
    except SkeletonError as e:
        logger.warning("Inizio trachea non trovato (%s): uso %s", e, fallback)
        return tuple(int(i) for i in fallback)


def _baseline(case: PhantomCase) -> Dict[str, Any]:
    start = _start_voxel(case.mask, case.truth.start_voxel)
    centre = extract_centrelines(case.mask, case.truth.distal_voxels, start)
    measured = measure_splines(case.ct, case.mask, centre['splines'], calibration=case.calibration)
    measured['splines'] = centre['splines']
    measured['failures'] = centre['failures'] + measured['failures']
    return measured


def _tn_case(cfg: ExperimentConfig) -> Optional[PhantomCase]:
    if not cfg.tn_phantoms:
        return None
    return build_phantoms(cfg.tn_phantoms[:1])[0]


def _with_case(failures: List[Dict[str, Any]], case: str, param: Any) -> List[Dict[str, Any]]:
    return [dict(f, phantom=case, parameter=param) for f in failures]


# =============================================================================
# PUNTI DEGLI SWEEP
# =============================================================================

def _area_pairs(base_profile, profile, aligned: bool) -> Tuple[List[float], List[float]]:
    """Aree appaiate (perturbata, originale) per stazione."""
    if aligned:
        ok = base_profile.valid & profile.valid
        return profile.area[ok].tolist(), base_profile.area[ok].tolist()
    xb = base_profile.arclength[base_profile.valid]
    ab = base_profile.area[base_profile.valid]
    xp = profile.arclength[profile.valid]
    ap = profile.area[profile.valid]
    if len(xp) < 2:
        return [], []
    inside = (xb >= xp.min()) & (xb <= xp.max())
    return np.interp(xb[inside], xp, ap).tolist(), ab[inside].tolist()


def _dose_point(args: Tuple) -> Dict[str, Any]:
    lam, cases, baselines, cfg, tn_case = args
    angles = dose_angles(cfg.n_angles)
    pairs = {'taper': ([], []), 'area': ([], [])}
    failures = []
    for idx, (case, base) in enumerate(zip(cases, baselines)):
        noisy = simulate_dose(case.ct, lam, _phantom_seed(cfg.seed, idx), angles, cfg.calibrate_noise)
        measured = measure_splines(noisy, case.mask, base['splines'], calibration=case.calibration)
        failures += _with_case(measured['failures'], case.name, lam)
        for aid, res in measured['results'].items():
            if aid not in base['results']:
                continue
            pairs['taper'][0].append(res.T)
            pairs['taper'][1].append(base['results'][aid].T)
            a, b = _area_pairs(base['profiles'][aid], measured['profiles'][aid], aligned=True)
            pairs['area'][0].extend(a)
            pairs['area'][1].extend(b)

    tn = np.nan
    target = tn_case if tn_case is not None else (cases[0] if cases else None)
    if target is not None:
        noisy_tn = simulate_dose(target.ct, lam, _phantom_seed(cfg.seed, -1), angles, cfg.calibrate_noise)
        tn = measure_Tn(noisy_tn, target.mask)
    return {'param': lam, 'pairs': pairs, 'tn': tn, 'failures': failures}


def _scale_point(args: Tuple) -> Dict[str, Any]:
    scale, cases, baselines, cfg, _ = args
    pairs = {'taper': ([], []), 'area': ([], []), 'arclength': ([], [])}
    failures = []
    for case, base in zip(cases, baselines):
        try:
            ct_s = rescale_volume(case.ct, scale)
            mask_s = rescale_mask(case.mask, scale)
            distal = rescale_points(case.truth.distal_voxels, scale, mask_s)
            fallback = rescale_points([case.truth.start_voxel], scale, mask_s)[0]
            centre = extract_centrelines(mask_s, distal, _start_voxel(mask_s, fallback))
        except (ValueError, TypeError) as e:
            failures.append({'phantom': case.name, 'parameter': scale, 'stage': 'rescale', 'error': str(e)})
            logger.warning("%s: scala %.2f non misurabile: %s", case.name, scale, e)
            continue
        # stessa correzione del bordo della misura di riferimento
        measured = measure_splines(ct_s, mask_s, centre['splines'], calibration=case.calibration)
        failures += _with_case(centre['failures'] + measured['failures'], case.name, scale)
        for aid, res in measured['results'].items():
            if aid not in base['results']:
                continue
            pairs['taper'][0].append(res.T)
            pairs['taper'][1].append(base['results'][aid].T)
            pairs['arclength'][0].append(centre['splines'][aid].length)
            pairs['arclength'][1].append(base['splines'][aid].length)
            a, b = _area_pairs(base['profiles'][aid], measured['profiles'][aid], aligned=False)
            pairs['area'][0].extend(a)
            pairs['area'][1].extend(b)
    return {'param': scale, 'pairs': pairs, 'tn': np.nan, 'failures': failures}


def _sweep_point(args: Tuple) -> Dict[str, Any]:
    kind = args[0]
    return _dose_point(args[1:]) if kind == 'dose' else _scale_point(args[1:])


def _run_sweep(kind: str, cfg: ExperimentConfig, progress: bool) -> SweepReport:
    specs = list(cfg.phantoms)
    if cfg.phantom_grid:
        specs += _grid_specs(cfg.phantom_grid, cfg.seed)
    if not specs:
        raise BenchError("Nessun fantoccio nella configurazione")
    cases = build_phantoms(specs, cfg.edge_calibration)
    baselines = [_baseline(c) for c in cases]
    failures = []
    for case, base in zip(cases, baselines):
        failures += _with_case(base['failures'], case.name, 'baseline')

    tn_case = _tn_case(cfg) if kind == 'dose' else None
    tn_baseline = None
    if kind == 'dose':
        target = tn_case if tn_case is not None else cases[0]
        tn_baseline = measure_Tn(target.ct, target.mask)

    grid = [float(p) for p in (cfg.lambdas if kind == 'dose' else cfg.scales)]
    tasks = [(kind, p, cases, baselines, cfg, tn_case) for p in grid]
    logger.info("Sweep %s: %d fantocci, %d valori del parametro", kind, len(cases), len(grid))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            points = list(tqdm(pool.map(_sweep_point, tasks), total=len(tasks), desc=kind, disable=not progress))
    else:
        points = [_sweep_point(t) for t in tqdm(tasks, desc=kind, disable=not progress)]

    stats, pairs, tn = {}, {}, {}
    for point in points:
        p = point['param']
        pairs[p] = point['pairs']
        tn[p] = point['tn']
        failures += point['failures']
        stats[p] = {}
        for metric, (a, b) in point['pairs'].items():
            if len(a) >= 2:
                stats[p][metric] = bland_altman(a, b)
            else:
                logger.warning("Sweep %s, parametro %s: metrica %s con %d coppie, saltata", kind, p, metric, len(a))

    report = SweepReport(sweep=kind, grid=grid, stats=stats, pairs=pairs, tn=tn, seed=cfg.seed,
                         config_hash=cfg.config_hash, tn_baseline=tn_baseline, failures=failures)
    report.trends = {
        'taper_std_spearman': spearman_trend(report.series('taper', 'std'), grid),
        'taper_bias_spearman': spearman_trend(report.series('taper', 'bias'), grid),
    }
    if kind == 'dose':
        report.trends['T_n_spearman'] = spearman_trend([tn[p] for p in grid], grid)
    return report


def run_dose_sweep(cfg: ExperimentConfig, progress: bool = False) -> SweepReport:
    """
    Sweep di dose: per ogni lambda simula la scansione e rimisura con la
    maschera, i punti distali e le spline originali; concordanza del taper
    e delle aree per stazione rispetto alla misura di riferimento, più T_n.
    """
    return _run_sweep('dose', cfg, progress)


def run_scale_sweep(cfg: ExperimentConfig, progress: bool = False) -> SweepReport:
    """
    Sweep di dimensione voxel: per ogni sigma_s ricampiona CT e maschera,
    ricalcola la linea centrale e confronta taper, aree e lunghezza d'arco.
    """
    return _run_sweep('scale', cfg, progress)


# =============================================================================
# BIFORCAZIONI E TABELLA RUMORE
# =============================================================================

def run_bifurcation_study(cfg: ExperimentConfig) -> Dict[str, Any]:
    """
    Taper con tutte le stazioni e senza le regioni di biforcazione (intervalli
    di verità) sui fantocci a Y. Le stazioni su lume fuso (flag 'merged')
    mancano già dal profilo completo.

    Returns:
        Dizionario con:
            - table: DataFrame per via aerea (T_full, T_excluded, s_err_full, s_err_excluded,
              dT_rel = |T_excluded - T_full| / |T_gt|)
            - agreement: Bland-Altman del taper (escluso vs completo)
            - s_err_p: Wilcoxon rank-sum tra le due popolazioni di s_err
    """
    specs = list(cfg.phantoms) + (_grid_specs(cfg.phantom_grid, cfg.seed) if cfg.phantom_grid else [])
    cases = [c for c in build_phantoms(specs, cfg.edge_calibration) if c.truth.bifurcation_intervals]
    if not cases:
        raise BenchError("Lo studio delle biforcazioni richiede fantocci 'ysplit'")

    rows = []
    for case in cases:
        base = _baseline(case)
        for n, (aid, profile) in enumerate(base['profiles'].items()):
            if aid not in base['results']:
                continue
            airway = int(aid.split('_')[-1])
            s0 = case.truth.arclength_of(base['splines'][aid].evaluate(0.0), airway)
            intervals = [(lo - s0, hi - s0) for lo, hi in case.truth.bifurcation_intervals]
            try:
                excluded = taper_rate(exclude_intervals(profile, intervals))
            except ValueError as e:
                logger.warning("%s/%s: taper senza biforcazione non calcolabile: %s", case.name, aid, e)
                continue
            full = base['results'][aid]
            rows.append({
                'phantom': case.name,
                'airway_id': aid,
                'T_gt': case.truth.taper,
                'T_full': full.T,
                'T_excluded': excluded.T,
                's_err_full': full.s_err,
                's_err_excluded': excluded.s_err,
                'N_full': full.N,
                'N_excluded': excluded.N,
                'dT_rel': abs(excluded.T - full.T) / abs(case.truth.taper) if case.truth.taper else np.nan,
            })

    table = pd.DataFrame(rows)
    result = {'table': table}
    if len(table) >= 2:
        result['agreement'] = bland_altman(table['T_excluded'], table['T_full']).to_dict()
        result['s_err_p'] = wilcoxon_ranksum(table['s_err_full'], table['s_err_excluded'])
    return result


def run_noise_table(cfg: ExperimentConfig) -> pd.DataFrame:
    """
    T_n per fantoccio (colonne) e per lambda (righe), con le righe
    'ground_truth' (volume originale) e 'round_trip' (senza rumore).
    """
    specs = cfg.tn_phantoms or cfg.phantoms
    if not specs:
        raise BenchError("Nessun fantoccio per la tabella del rumore")
    cases = build_phantoms(specs)
    angles = dose_angles(cfg.n_angles)
    table = {}
    for case in cases:
        column = {'ground_truth': measure_Tn(case.ct, case.mask)}
        column['round_trip'] = measure_Tn(simulate_dose(case.ct, None, cfg.seed, angles, workers=cfg.workers), case.mask)
        for lam in cfg.lambdas:
            noisy = simulate_dose(case.ct, lam, cfg.seed, angles, cfg.calibrate_noise, workers=cfg.workers)
            column[f"{float(lam):g}"] = measure_Tn(noisy, case.mask)
        table[case.name] = column
        logger.info("Tabella rumore %s: %s", case.name, {k: round(v, 1) for k, v in column.items()})
    return pd.DataFrame(table)


# =============================================================================
# OUTPUT
# =============================================================================

def _versions() -> Dict[str, str]:
    versions = {'python': platform.python_version()}
    for pkg in MANIFEST_PACKAGES:
        try:
            versions[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            versions[pkg] = 'n/d'
    return versions


def _plot_report(report: SweepReport, plot_dir: Path) -> List[Path]:
    """Grafici SVG: andamento di bias e limiti per metrica, Bland-Altman del taper per parametro."""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    plt.rcParams['svg.hashsalt'] = report.config_hash
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    label = 'lambda' if report.sweep == 'dose' else 'sigma_s'

    metrics = sorted({m for p in report.grid for m in report.stats.get(p, {})})
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        ax.plot(report.grid, report.series(metric, 'bias'), 'o-', color='#1976D2', label='bias')
        ax.plot(report.grid, report.series(metric, 'upper'), '--', color='#d32f2f', label='limiti 95%')
        ax.plot(report.grid, report.series(metric, 'lower'), '--', color='#d32f2f')
        ax.axhline(0.0, color='grey', linewidth=0.8)
        ax.set_xlabel(label)
        ax.set_ylabel(f"differenza {metric}")
        ax.set_title(f"{report.sweep}: {metric}")
        ax.legend()
        path = plot_dir / f"{report.sweep}_{metric}_trend.svg"
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)
        written.append(path)

    for param in report.grid:
        a, b = report.pairs.get(param, {}).get('taper', ([], []))
        if len(a) < 2:
            continue
        a, b = np.asarray(a), np.asarray(b)
        st = report.stats[param]['taper']
        fig, ax = plt.subplots(figsize=(6, 4.5))
        ax.scatter((a + b) / 2.0, a - b, s=14, color='#1976D2')
        for y, style in ((st.bias, '-'), (st.upper, '--'), (st.lower, '--')):
            ax.axhline(y, color='#d32f2f', linestyle=style, linewidth=1)
        ax.set_xlabel('media taper (mm^-1)')
        ax.set_ylabel('differenza taper (mm^-1)')
        ax.set_title(f"Bland-Altman taper, {label} = {param:g} (r = {st.r:.3f})")
        path = plot_dir / f"{report.sweep}_taper_bland_altman_{param:g}.svg"
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)
        written.append(path)
    return written


def write_report(report: SweepReport, cfg: ExperimentConfig,
                 out_dir: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """Scrive report.csv, plots/*.svg, run-manifest.json e (se richiesto) report.pdf."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Any] = {}

    written['report'] = out / 'report.csv'
    report.to_frame().to_csv(written['report'], index=False, float_format='%.10g')
    written['plots'] = _plot_report(report, out / 'plots')

    manifest = {
        'sweep': report.sweep,
        'name': cfg.name,
        'seed': report.seed,
        'config_sha256': report.config_hash,
        'versions': _versions(),
        'grid': report.grid,
        'tn_baseline': report.tn_baseline,
        'trends': report.trends,
        'failures': report.failures,
        'config': cfg.to_dict(),
    }
    written['manifest'] = out / 'run-manifest.json'
    written['manifest'].write_text(json.dumps(manifest, indent=2, default=float))

    if cfg.pdf:
        from pdf_export import generate_pdf_report
        written['pdf'] = generate_pdf_report(report, out / 'report.pdf', cfg.name)
    return written
