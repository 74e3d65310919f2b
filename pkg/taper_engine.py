"""
Taper Engine - Misura Completa della Rastremazione
==================================================
Motore che compone i moduli della pipeline:

    maschera + punti distali -> linea centrale -> percorsi -> spline
    CT + maschera + spline   -> profili di area -> tasso di rastremazione

Modulo indipendente dalla CLI: può essere importato e utilizzato in altri
contesti (benchmark, notebook, test).

Uso:
    from taper_engine import measure_airways

    result = measure_airways(ct, mask, distal_points)
    print(result['results_frame'])
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Any, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from centregeom import (
    AirwaySpline, DEFAULT_HALF_EXTENT_MM, arc_length, fit_spline, plane_basis,
    sample_plane, smooth_path, station_parameters, tangent
)
from lumen import EdgeCalibration, LumenProfile, measure_profile, radius_map, PROFILE_COLUMNS
from skeleton import extract_paths, find_trachea_start, save_paths, thin_to_centreline
from taper import TaperResult, exclude_intervals, results_frame, taper_rate
from volio import CTVolume, BinaryMask, SamplingBoundsError, save_volume

logger = logging.getLogger(__name__)


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

# File scritti da write_measurement
OUTPUT_FILES = {
    'paths': 'paths.json',
    'profiles': 'profiles.csv',
    'results': 'results.csv',
}

# Ogni quante stazioni salvare un piano nel dump di debug
DUMP_EVERY = 4


# =============================================================================
# FUNZIONI DI UTILITÀ
# =============================================================================

def _failure(airway_id: str, stage: str, error: Exception) -> Dict[str, Any]:
    """Voce di errore per una via aerea (la misura prosegue con le altre)."""
    logger.warning("%s: errore in fase '%s': %s", airway_id, stage, error)
    return {'airway_id': airway_id, 'stage': stage, 'error': str(error)}


# =============================================================================
# LINEA CENTRALE
# =============================================================================

def extract_centrelines(mask: BinaryMask, distal_points: Sequence[Any],
                        start: Optional[Any] = None) -> Dict[str, Any]:
    """
    Dalla maschera ai percorsi e alle spline delle vie aeree.

    Args:
        mask: segmentazione delle vie aeree
        distal_points: voxel distali, uno per via aerea
        start: inizio trachea; se None viene cercato sulla maschera

    Returns:
        Dizionario con:
            - start: voxel di inizio trachea
            - tree: CentrelineTree
            - paths: lista di AirwayPath
            - splines: {airway_id: AirwaySpline}
            - failures: vie aeree per cui la spline non è stata costruita
    """
    if start is None:
        start = find_trachea_start(mask)
    start = tuple(int(i) for i in start)
    tree = thin_to_centreline(mask, [start] + [tuple(int(i) for i in d) for d in distal_points])
    paths = extract_paths(tree)

    splines = {}
    failures = []
    for path in paths:
        try:
            splines[path.id] = fit_spline(smooth_path(path, mask.spacing, mask.origin))
        except (ValueError, TypeError) as e:
            failures.append(_failure(path.id, 'spline', e))
    return {'start': start, 'tree': tree, 'paths': paths, 'splines': splines, 'failures': failures}


# =============================================================================
# MISURA
# =============================================================================

def measure_splines(ct: CTVolume, mask: BinaryMask, splines: Dict[str, AirwaySpline],
                    exclusions: Optional[Dict[str, List[Tuple[float, float]]]] = None,
                    calibration: Optional[EdgeCalibration] = None) -> Dict[str, Any]:
    """
    Profili di area e taper per ogni spline.

    Args:
        ct, mask: volume CT e maschera sulla stessa griglia
        splines: {airway_id: AirwaySpline}
        exclusions: {airway_id: [(da_mm, a_mm), ...]} intervalli da escludere
        calibration: correzione del bordo FWHM, opzionale

    Returns:
        Dizionario con profiles {id: LumenProfile}, results {id: TaperResult}, failures
    """
    radii = radius_map(mask)
    profiles: Dict[str, LumenProfile] = {}
    results: Dict[str, TaperResult] = {}
    failures = []

    for airway_id, sp in splines.items():
        try:
            profile = measure_profile(ct, mask, sp, airway_id=airway_id, radii=radii,
                                      calibration=calibration)
        except (ValueError, TypeError) as e:
            failures.append(_failure(airway_id, 'profile', e))
            continue
        if exclusions and airway_id in exclusions:
            profile = exclude_intervals(profile, exclusions[airway_id])
        profiles[airway_id] = profile
        try:
            results[airway_id] = taper_rate(profile)
        except (ValueError, TypeError) as e:
            failures.append(_failure(airway_id, 'taper', e))

    return {'profiles': profiles, 'results': results, 'failures': failures}


def profiles_frame(profiles: Dict[str, LumenProfile]) -> pd.DataFrame:
    frames = [p.to_frame() for p in profiles.values()]
    if not frames:
        return pd.DataFrame(columns=PROFILE_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def measure_airways(ct: CTVolume, mask: BinaryMask, distal_points: Sequence[Any],
                    start: Optional[Any] = None,
                    exclusions: Optional[Dict[str, List[Tuple[float, float]]]] = None,
                    calibration: Optional[EdgeCalibration] = None) -> Dict[str, Any]:
    """
    Pipeline completa: linea centrale, profili e taper.

    Returns:
        Dizionario con le chiavi di extract_centrelines e measure_splines,
        più results_frame e profiles_frame (DataFrame pandas)
    """
    if not ct.same_grid(mask):
        raise ValueError("CT e maschera devono avere stessa griglia (dims, spacing, origin)")
    centrelines = extract_centrelines(mask, distal_points, start)
    measured = measure_splines(ct, mask, centrelines['splines'], exclusions, calibration)

    result = dict(centrelines)
    result.update(measured)
    result['failures'] = centrelines['failures'] + measured['failures']
    result['results_frame'] = results_frame(list(measured['results'].values()))
    result['profiles_frame'] = profiles_frame(measured['profiles'])
    logger.info("Misurate %d vie aeree su %d (%d errori)",
                len(measured['results']), len(centrelines['paths']), len(result['failures']))
    return result


# =============================================================================
# OUTPUT
# =============================================================================

def write_measurement(result: Dict[str, Any], out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Scrive paths.json, profiles.csv e results.csv nella cartella indicata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {key: out / name for key, name in OUTPUT_FILES.items()}
    save_paths(result['paths'], written['paths'])
    result['profiles_frame'].to_csv(written['profiles'], index=False, float_format='%.10g')
    result['results_frame'].to_csv(written['results'], index=False, float_format='%.10g')
    if result.get('failures'):
        written['failures'] = out / 'failures.json'
        written['failures'].write_text(json.dumps(result['failures'], indent=2))
    return written


def dump_planes(ct: CTVolume, mask: BinaryMask, spline: AirwaySpline, out_prefix: Union[str, Path],
                every: int = DUMP_EVERY, half_extent: float = DEFAULT_HALF_EXTENT_MM) -> List[Path]:
    """
    Salva come volumi .mhd le pile dei piani CT e maschera (debug).

    La maschera è salvata in millesimi (valori frazionari x 1000). I piani
    fuori dal volume vengono saltati: il parametro t e l'ascissa curvilinea
    di ogni fetta salvata sono in <prefix>_planes_t.json.
    """
    ts = station_parameters(spline)[::max(1, int(every))]
    ct_planes, mask_planes, kept = [], [], []
    for t in ts:
        centre = spline.evaluate(float(t))
        v1, v2 = plane_basis(tangent(spline, float(t)))
        try:
            ct_plane = sample_plane(ct, centre, v1, v2, half_extent).data
            mask_plane = sample_plane(mask, centre, v1, v2, half_extent).data * 1000.0
        except SamplingBoundsError as e:
            logger.debug("Piano t=%.2f non salvato: %s", t, e)
            continue
        ct_planes.append(ct_plane)
        mask_planes.append(mask_plane)
        kept.append(float(t))
    if not ct_planes:
        return []
    if len(kept) < len(ts):
        logger.warning("Dump dei piani: %d piani su %d fuori dal volume, saltati", len(ts) - len(kept), len(ts))

    prefix = Path(out_prefix)
    pixel = 2.0 * half_extent / (ct_planes[0].shape[0] - 1)
    spacing = (pixel, pixel, float(ts[1] - ts[0]) if len(ts) > 1 else 1.0)
    written = []
    for suffix, stack in (('_ct_planes.mhd', ct_planes), ('_mask_planes.mhd', mask_planes)):
        path = prefix.with_name(prefix.name + suffix)
        data = np.clip(np.round(np.stack(stack, axis=2)), -32768, 32767)
        save_volume(CTVolume(data, spacing), path)
        written.append(path)

    index_path = prefix.with_name(prefix.name + '_planes_t.json')
    index_path.write_text(json.dumps({
        't': kept,
        'arclength_mm': [arc_length(spline, t) for t in kept],
        'skipped': len(ts) - len(kept),
    }, indent=2))
    written.append(index_path)
    return written
