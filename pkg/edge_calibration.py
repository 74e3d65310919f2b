"""
Edge Calibration - Calibrazione del Bordo FWHM su Fantoccio
===========================================================
Il bordo FWHM cade all'interno del lume quando il picco di parete dopo la
PSF resta molto sotto il valore nominale: parete sottile rispetto alla PSF
e curvatura del tubo spostano il mezzo livello verso il centro.

La calibrazione misura questo scarto su tubi dritti a taper nullo e a
raggio noto, con la stessa PSF, spacing, spessore di parete e HU della
scansione da misurare:

    raggio grezzo medio l(r)  ->  scarto r - l(r)

La tabella (EdgeCalibration) corregge ogni distanza di bordo prima del fit
dell'ellisse.

Uso:
    from edge_calibration import calibrate_edges, save_calibration

    calibration = calibrate_edges(PhantomSpec(psf_sigma=0.6, spacing=(0.7, 0.7, 1.0)))
    profile = measure_profile(ct, mask, spline, calibration=calibration)
    save_calibration(calibration, 'edge_calibration.json')
"""

import json
import logging
from dataclasses import replace
from functools import lru_cache
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from centregeom import arc_length, fit_spline, station_parameters
from lumen import EdgeCalibration, LumenError, OutsideLumenError, radius_map, station_edges, station_planes
from phantom import MIN_RADIUS_VOX, PhantomError, PhantomSpec, make_phantom

logger = logging.getLogger(__name__)


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

# Raggi dei tubi di calibrazione (mm)
CALIBRATION_RADII = (1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0)

# Lunghezza dei tubi di calibrazione (mm)
CALIBRATION_LENGTH_MM = 8.0

# Distanza minima delle stazioni usate dalle estremità della spline (mm)
END_MARGIN_MM = 1.0

# Sottocampionamento della linea centrale di verità per la spline (1 mm)
CENTRELINE_STRIDE = 20


# =============================================================================
# MISURA DEL RAGGIO GREZZO
# =============================================================================

def raw_edge_radius(spec: PhantomSpec) -> float:
    """
    Distanza di bordo FWHM media (mm, non corretta) su un tubo dritto a taper nullo.

    Usa le stazioni a più di END_MARGIN_MM dalle estremità della spline.
    """
    if spec.kind != 'straight' or spec.taper != 0.0:
        raise LumenError(f"Serve un tubo dritto a taper nullo (kind={spec.kind}, taper={spec.taper})")
    ct, mask, truth = make_phantom(spec)
    sp = fit_spline(truth.centrelines[0][CENTRELINE_STRIDE:-CENTRELINE_STRIDE + 1:CENTRELINE_STRIDE])
    radii = radius_map(mask)

    lengths = []
    for t in station_parameters(sp):
        s = arc_length(sp, float(t))
        if s < END_MARGIN_MM or s > sp.length - END_MARGIN_MM:
            continue
        ct_plane, mask_plane = station_planes(ct, mask, sp, float(t), radii)
        try:
            _, l, _ = station_edges(ct_plane, mask_plane)
        except OutsideLumenError:
            continue
        lengths.append(l)
    if not lengths or not sum(len(l) for l in lengths):
        raise LumenError(f"Nessun bordo misurato sul tubo di calibrazione r={spec.r0} mm")
    return float(np.mean(np.concatenate(lengths)))


# =============================================================================
# CALIBRAZIONE
# =============================================================================

def _imaging_key(spec: PhantomSpec) -> Tuple:
    return (float(spec.psf_sigma), tuple(float(s) for s in spec.spacing), float(spec.wall_thickness),
            float(spec.lumen_hu), float(spec.wall_hu), float(spec.parenchyma_hu))


@lru_cache(maxsize=16)
def _calibrate(key: Tuple, radii: Tuple[float, ...]) -> EdgeCalibration:
    psf_sigma, spacing, wall_thickness, lumen_hu, wall_hu, parenchyma_hu = key
    base = PhantomSpec(kind='straight', taper=0.0, length=CALIBRATION_LENGTH_MM, psf_sigma=psf_sigma,
                       spacing=spacing, wall_thickness=wall_thickness, lumen_hu=lumen_hu,
                       wall_hu=wall_hu, parenchyma_hu=parenchyma_hu, noise_hu=0.0)
    min_r = MIN_RADIUS_VOX * max(spacing[0], spacing[1])
    usable = sorted(r for r in radii if r >= min_r)
    if len(usable) < 2:
        raise LumenError(f"Servono almeno 2 raggi >= {min_r:.2f} mm per la calibrazione, ricevuti {list(radii)}")

    measured = []
    for r in usable:
        try:
            measured.append((r, raw_edge_radius(replace(base, r0=r, name=f'calibration_r{r:g}'))))
        except (LumenError, PhantomError) as e:
            logger.warning("Tubo di calibrazione r=%.2f mm scartato: %s", r, e)
    if len(measured) < 2:
        raise LumenError(f"Solo {len(measured)} tubi di calibrazione misurabili")
    usable = [r for r, _ in measured]
    raw = np.array([l for _, l in measured])
    if np.any(np.diff(raw) <= 0):
        raise LumenError(f"Raggi grezzi non crescenti con il raggio vero: {np.round(raw, 3).tolist()}")
    offset = np.asarray(usable) - raw
    logger.info("Calibrazione del bordo (PSF %.2f mm, spacing %s): scarto %.3f..%.3f mm",
                psf_sigma, spacing, offset.min(), offset.max())
    source = {
        'psf_sigma': psf_sigma,
        'spacing': list(spacing),
        'wall_thickness': wall_thickness,
        'lumen_hu': lumen_hu,
        'wall_hu': wall_hu,
        'parenchyma_hu': parenchyma_hu,
        'true_radius': [float(r) for r in usable],
    }
    return EdgeCalibration(raw_radius=tuple(float(x) for x in raw),
                           offset=tuple(float(x) for x in offset), source=source)


def calibrate_edges(spec: PhantomSpec, radii: Tuple[float, ...] = CALIBRATION_RADII) -> EdgeCalibration:
    """
    Tabella di correzione del bordo per le condizioni di imaging di spec.

    Di spec contano solo PSF, spacing, spessore di parete e HU; forma,
    taper e rumore vengono ignorati. Il risultato è in cache per processo.

    Args:
        spec: specifica del fantoccio (o della scansione) da misurare
        radii: raggi veri dei tubi di calibrazione (mm)

    Returns:
        EdgeCalibration
    """
    return _calibrate(_imaging_key(spec), tuple(float(r) for r in radii))


# =============================================================================
# I/O
# =============================================================================

def save_calibration(calibration: EdgeCalibration, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(calibration.to_dict(), indent=2))
    return path


def load_calibration(path: Union[str, Path]) -> EdgeCalibration:
    """Legge una tabella salvata da save_calibration."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise LumenError(f"Impossibile leggere la calibrazione {path}: {e}") from e
    return EdgeCalibration.from_dict(data)
