"""
Lumen - Area della Sezione Trasversale
======================================
Misura l'area del lume su coppie di piani allineati (CT + maschera):

1. 50 raggi radiali dal centro del piano, campionati a 1/5 di pixel
2. bordo FWHM guidato dalla segmentazione (FWHM-ESL) su ogni raggio
3. correzione opzionale del bordo da calibrazione su fantoccio
4. fit diretto ai minimi quadrati di un'ellisse sui punti di bordo

Le stazioni il cui piano taglia un lume fuso con un'altra via aerea
(regione della maschera molto più estesa del suo cerchio inscritto) sono
registrate come mancanti con flag 'merged'.

Uso:
    from lumen import measure_profile

    profile = measure_profile(ct, mask, spline, airway_id='airway_0')
    df = profile.to_frame()
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Any, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import distance_transform_edt, label, map_coordinates
from scipy.signal import find_peaks

from centregeom import (
    AirwaySpline, PlaneImage, arc_length, plane_basis, plane_half_extent,
    sample_plane, station_parameters, tangent, STATION_STEP
)
from volio import CTVolume, BinaryMask, SamplingBoundsError

logger = logging.getLogger(__name__)


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

N_RAYS = 50
RAY_STEP_MM = 0.06
MIN_SURVIVING_RAYS = 25
MASK_THRESHOLD = 0.5
LOW_CONTRAST_HU = 50.0

# Area della sezione / area del cerchio inscritto oltre cui il lume è fuso
MERGED_AREA_RATIO = 1.75

PROFILE_COLUMNS = ['airway_id', 't', 'arclength_mm', 'area_mm2', 'n_rays', 'flags']


class LumenError(ValueError):
    """Piano o profilo non misurabile."""


class OutsideLumenError(LumenError):
    """Centro del piano fuori dalla maschera."""


class EllipseFitError(ValueError):
    """Punti degeneri per il fit dell'ellisse."""


# =============================================================================
# TIPI
# =============================================================================

@dataclass
class RayPair:
    """Profili lungo un raggio: r_b dalla maschera (in [0, 1]), r_c dalla CT (HU)."""

    r_b: np.ndarray
    r_c: np.ndarray
    step: float
    angle: float

    def __post_init__(self):
        if len(self.r_b) != len(self.r_c):
            raise LumenError(f"Profili di lunghezza diversa: {len(self.r_b)} vs {len(self.r_c)}")
        if self.step <= 0:
            raise LumenError(f"Passo non valido: {self.step}")


@dataclass
class Ellipse:
    centre: np.ndarray
    a: float
    b: float
    angle: float

    @property
    def area(self) -> float:
        return float(np.pi * self.a * self.b)


@dataclass(frozen=True, eq=False)
class EdgeCalibration:
    """
    Correzione del bordo FWHM misurata su fantocci.

    Per raggi grezzi crescenti (mm) lo scarto da sommare alla distanza di
    bordo; interpolazione lineare, valori costanti oltre gli estremi.
    """

    raw_radius: Tuple[float, ...]
    offset: Tuple[float, ...]
    source: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        raw = np.asarray(self.raw_radius, dtype=float)
        if len(raw) < 2 or len(raw) != len(self.offset):
            raise LumenError(f"Tabella di calibrazione non valida: {len(raw)} raggi, {len(self.offset)} scarti")
        if np.any(np.diff(raw) <= 0):
            raise LumenError(f"Raggi di calibrazione non crescenti: {np.round(raw, 3).tolist()}")

    def correct(self, l: Any) -> np.ndarray:
        l = np.asarray(l, dtype=float)
        return l + np.interp(l, self.raw_radius, self.offset)

    def to_dict(self) -> Dict[str, Any]:
        return {'raw_radius': list(self.raw_radius), 'offset': list(self.offset), 'source': dict(self.source)}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'EdgeCalibration':
        try:
            return cls(raw_radius=tuple(float(x) for x in d['raw_radius']),
                       offset=tuple(float(x) for x in d['offset']),
                       source=dict(d.get('source', {})))
        except (KeyError, TypeError) as e:
            raise LumenError(f"Calibrazione del bordo non leggibile: {e}") from e


@dataclass
class LumenProfile:
    """Ascisse curvilinee e aree lungo una via aerea; le stazioni mancanti hanno area NaN."""

    airway_id: str
    t: np.ndarray
    arclength: np.ndarray
    area: np.ndarray
    missing: np.ndarray
    n_rays: np.ndarray
    flags: List[str] = field(default_factory=list)

    @property
    def valid(self) -> np.ndarray:
        return ~self.missing

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'airway_id': self.airway_id,
            't': self.t,
            'arclength_mm': self.arclength,
            'area_mm2': self.area,
            'n_rays': self.n_rays,
            'flags': self.flags,
        }, columns=PROFILE_COLUMNS)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> 'LumenProfile':
        area = df['area_mm2'].to_numpy(dtype=float)
        flags = df['flags'].fillna('').astype(str).tolist() if 'flags' in df else [''] * len(df)
        return cls(
            airway_id=str(df['airway_id'].iloc[0]) if len(df) else '',
            t=df['t'].to_numpy(dtype=float),
            arclength=df['arclength_mm'].to_numpy(dtype=float),
            area=area,
            missing=np.isnan(area),
            n_rays=df['n_rays'].to_numpy(dtype=int),
            flags=flags,
        )

    def without(self, drop: np.ndarray, flag: str) -> 'LumenProfile':
        """Copia con le stazioni indicate segnate come mancanti."""
        drop = np.asarray(drop, dtype=bool) & ~self.missing
        area = self.area.copy()
        area[drop] = np.nan
        flags = [f"{f};{flag}".strip(';') if d else f for f, d in zip(self.flags, drop)]
        return replace(self, area=area, missing=self.missing | drop, flags=flags)


# =============================================================================
# RAGGI E BORDO FWHM
# =============================================================================

def cast_rays(ct_plane: PlaneImage, mask_plane: PlaneImage, n_rays: int = N_RAYS) -> List[RayPair]:
    """
    Raggi agli angoli 2 pi k / n dal centro del piano, interpolazione lineare.

    La lunghezza del raggio va dal centro al bordo del piano.
    """
    c = mask_plane.centre
    centre_value = float(map_coordinates(mask_plane.data, [[c], [c]], order=1)[0])
    if centre_value < MASK_THRESHOLD:
        raise OutsideLumenError(f"Centro del piano fuori dal lume (maschera = {centre_value:.2f})")

    n_samples = int(np.floor(mask_plane.half_extent / RAY_STEP_MM + 1e-9)) + 1
    dist = np.arange(n_samples) * RAY_STEP_MM / mask_plane.pixel
    rays = []
    for k in range(n_rays):
        theta = 2.0 * np.pi * k / n_rays
        coords = [c + dist * np.cos(theta), c + dist * np.sin(theta)]
        rays.append(RayPair(
            r_b=map_coordinates(mask_plane.data, coords, order=1, mode='nearest'),
            r_c=map_coordinates(ct_plane.data, coords, order=1, mode='nearest'),
            step=RAY_STEP_MM,
            angle=theta,
        ))
    return rays


def detect_edge(r: RayPair) -> Optional[Dict[str, Any]]:
    """
    Bordo FWHM su un raggio.

    Returns:
        Dizionario con:
            - l: distanza del bordo dal centro (mm)
            - s: primo indice con r_b < 0.5
            - x_max, i_max: massimo locale di r_c più vicino a s
            - x_min, i_min: minimo di r_c su [0, x_max]
        oppure None se il raggio è scartato
    """
    below = np.flatnonzero(r.r_b < MASK_THRESHOLD)
    if len(below) == 0:
        return None
    s = int(below[0])

    peaks, _ = find_peaks(r.r_c)
    if len(peaks) == 0:
        return None
    # più vicino a s; a parità l'indice minore (peaks è ordinato)
    x_max = int(peaks[np.argmin(np.abs(peaks - s))])
    i_max = float(r.r_c[x_max])

    head = r.r_c[:x_max + 1]
    i_min = float(head.min())
    if i_max <= i_min:
        return None
    x_min = int(np.flatnonzero(head == i_min)[-1])

    half = 0.5 * (i_max + i_min)
    k = x_min + int(np.flatnonzero(head[x_min:x_max] <= half)[-1])
    lo, hi = float(r.r_c[k]), float(r.r_c[k + 1])
    frac = (half - lo) / (hi - lo) if hi != lo else 0.0
    return {
        'l': (k + frac) * r.step,
        's': s,
        'x_max': x_max,
        'i_max': i_max,
        'x_min': x_min,
        'i_min': i_min,
    }


def fwhm_boundary(r: RayPair) -> Optional[float]:
    """Distanza del bordo (mm) o None se il raggio è scartato."""
    edge = detect_edge(r)
    return None if edge is None else edge['l']


# =============================================================================
# FIT ELLISSE
# =============================================================================

def fit_ellipse(points: Any) -> Ellipse:
    """
    Fit diretto ai minimi quadrati di un'ellisse (vincolo 4ac - b^2 = 1),
    nella forma numericamente stabile a matrici ridotte.

    I punti sono centrati e scalati prima del fit.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 6:
        raise EllipseFitError(f"Servono almeno 6 punti 2D, ricevuti {len(pts)}")

    mean = pts.mean(axis=0)
    centred = pts - mean
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] == 0 or sv[1] / sv[0] < 1e-9:
        raise EllipseFitError("Punti collineari: ellisse non determinabile")
    scale = np.sqrt(np.mean(np.sum(centred ** 2, axis=1)))
    x, y = (centred / scale).T

    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1 = D1.T @ D1
    S2 = D1.T @ D2
    S3 = D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as e:
        raise EllipseFitError(f"Sistema singolare nel fit: {e}") from e
    M = S1 + S2 @ T
    M = np.array([M[2] / 2.0, -M[1], M[0] / 2.0])
    _, vecs = np.linalg.eig(M)
    vecs = np.real(vecs)
    cond = 4.0 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if len(ok) == 0:
        raise EllipseFitError("Nessuna soluzione ellittica")
    a1 = vecs[:, ok[np.argmax(cond[ok])]]
    A, B, C = a1
    Dc, Ec, Fc = T @ a1

    Q = np.array([[A, B / 2.0], [B / 2.0, C]])
    centre = np.linalg.solve(2.0 * Q, [-Dc, -Ec])
    f0 = Fc + 0.5 * (Dc * centre[0] + Ec * centre[1])
    evals, evecs = np.linalg.eigh(Q)
    axes_sq = -f0 / evals
    if np.any(axes_sq <= 0):
        raise EllipseFitError("Conica non ellittica")
    axes = np.sqrt(axes_sq) * scale
    major = int(np.argmax(axes))
    angle = float(np.arctan2(evecs[1, major], evecs[0, major]))
    return Ellipse(
        centre=centre * scale + mean,
        a=float(axes[major]),
        b=float(axes[1 - major]),
        angle=angle,
    )


# =============================================================================
# PROFILO LUNGO LA SPLINE
# =============================================================================

def radius_map(mask: BinaryMask) -> np.ndarray:
    """Distanza euclidea 3D (mm) dal fondo, per la scelta della dimensione del piano."""
    return distance_transform_edt(mask.data, sampling=mask.spacing)


def station_planes(ct: CTVolume, mask: BinaryMask, sp: AirwaySpline, t: float,
                   radii: Optional[np.ndarray] = None) -> Tuple[PlaneImage, PlaneImage]:
    """Piani CT e maschera ortogonali alla spline in t."""
    centre = sp.evaluate(t)
    v1, v2 = plane_basis(tangent(sp, t))
    local_r = None
    if radii is not None:
        idx = tuple(np.clip(np.round(mask.mm_to_index(centre)).astype(int), 0, np.asarray(mask.dims) - 1))
        local_r = float(radii[idx])
    he = plane_half_extent(local_r)
    try:
        return sample_plane(ct, centre, v1, v2, he), sample_plane(mask, centre, v1, v2, he)
    except SamplingBoundsError as e:
        raise LumenError(f"Piano della stazione t={t:.2f} fuori dal volume: {e}") from e


def merged_lumen(mask_plane: PlaneImage) -> bool:
    """
    True se la regione della maschera che contiene il centro non è una
    singola sezione: area oltre MERGED_AREA_RATIO volte il cerchio inscritto.

    Accade quando il piano taglia due lumi fusi (biforcazioni).
    """
    labels, _ = label(mask_plane.data >= MASK_THRESHOLD)
    c = int(round(mask_plane.centre))
    if labels[c, c] == 0:
        return False
    own = labels == labels[c, c]
    inscribed = float(distance_transform_edt(own).max()) * mask_plane.pixel
    area = float(own.sum()) * mask_plane.pixel ** 2
    return area > MERGED_AREA_RATIO * np.pi * inscribed ** 2


def station_edges(ct_plane: PlaneImage, mask_plane: PlaneImage,
                  n_rays: int = N_RAYS) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Bordi FWHM grezzi dei raggi sopravvissuti.

    Returns:
        (angoli, distanze di bordo in mm, contrasto i_max - i_min)

    Raises:
        OutsideLumenError: centro del piano fuori dalla maschera
    """
    angles, lengths, contrast = [], [], []
    for ray in cast_rays(ct_plane, mask_plane, n_rays):
        edge = detect_edge(ray)
        if edge is None:
            continue
        angles.append(ray.angle)
        lengths.append(edge['l'])
        contrast.append(edge['i_max'] - edge['i_min'])
    return np.array(angles), np.array(lengths), np.array(contrast)


def measure_station(ct: CTVolume, mask: BinaryMask, sp: AirwaySpline, t: float,
                    radii: Optional[np.ndarray] = None, n_rays: int = N_RAYS,
                    calibration: Optional[EdgeCalibration] = None) -> Dict[str, Any]:
    """
    Misura una stazione.

    Con calibration le distanze di bordo sono corrette prima del fit.

    Returns:
        Dizionario con area (NaN se mancante), n_rays sopravvissuti, flag
    """
    ct_plane, mask_plane = station_planes(ct, mask, sp, t, radii)
    try:
        angles, lengths, contrast = station_edges(ct_plane, mask_plane, n_rays)
    except OutsideLumenError:
        return {'area': np.nan, 'n_rays': 0, 'flags': 'outside_lumen'}

    if merged_lumen(mask_plane):
        return {'area': np.nan, 'n_rays': len(lengths), 'flags': 'merged'}
    if len(lengths) < MIN_SURVIVING_RAYS:
        return {'area': np.nan, 'n_rays': len(lengths), 'flags': 'few_rays'}
    if calibration is not None:
        lengths = calibration.correct(lengths)
    points = lengths[:, None] * np.column_stack([np.cos(angles), np.sin(angles)])
    try:
        ellipse = fit_ellipse(points)
    except EllipseFitError:
        return {'area': np.nan, 'n_rays': len(lengths), 'flags': 'fit_failed'}
    flags = 'low_contrast' if np.mean(contrast) < LOW_CONTRAST_HU else ''
    return {'area': ellipse.area, 'n_rays': len(lengths), 'flags': flags}


def measure_profile(ct: CTVolume, mask: BinaryMask, sp: AirwaySpline, airway_id: str = 'airway_0',
                    step: float = STATION_STEP, radii: Optional[np.ndarray] = None,
                    n_rays: int = N_RAYS, calibration: Optional[EdgeCalibration] = None) -> LumenProfile:
    """
    Profilo ascissa curvilinea / area lungo una spline.

    Le stazioni con meno di 25 raggi validi (su 50) o su un lume fuso sono
    registrate come mancanti.

    Args:
        ct, mask: volume e maschera allineati
        sp: spline della via aerea
        airway_id: identificativo della via aerea
        step: passo parametrico tra le stazioni
        radii: mappa di distanza già calcolata (radius_map), opzionale
        calibration: correzione del bordo (edge_calibration), opzionale

    Returns:
        LumenProfile
    """
    if not ct.same_grid(mask):
        raise LumenError("CT e maschera non sono sulla stessa griglia")
    if radii is None:
        radii = radius_map(mask)

    ts = station_parameters(sp, step)
    areas = np.full(len(ts), np.nan)
    n_ok = np.zeros(len(ts), dtype=int)
    flags = []
    for n, t in enumerate(ts):
        result = measure_station(ct, mask, sp, float(t), radii, n_rays, calibration)
        areas[n] = result['area']
        n_ok[n] = result['n_rays']
        flags.append(result['flags'])
        if np.isnan(result['area']):
            logger.debug("%s: stazione t=%.2f mancante (%s)", airway_id, t, result['flags'])

    arclengths = np.array([arc_length(sp, float(t)) for t in ts])
    missing = np.isnan(areas)
    low = sum(1 for f in flags if f == 'low_contrast')
    if low:
        logger.warning("%s: %d stazioni a basso contrasto (< %.0f HU)", airway_id, low, LOW_CONTRAST_HU)
    merged = sum(1 for f in flags if f == 'merged')
    if merged:
        logger.info("%s: %d stazioni su lume fuso escluse", airway_id, merged)
    logger.info("%s: %d stazioni, %d mancanti", airway_id, len(ts), int(missing.sum()))
    return LumenProfile(airway_id=airway_id, t=ts, arclength=arclengths, area=areas,
                        missing=missing, n_rays=n_ok, flags=flags)
