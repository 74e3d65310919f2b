"""
Centregeom - Geometria della Linea Centrale
===========================================
Trasforma un percorso discreto di voxel in una curva continua:

- smoothing a cinque punti (ricentratura)
- spline cubica naturale interpolante con nodi a lunghezza di corda
- lunghezza d'arco per quadratura di Gauss-Legendre su ogni segmento
- tangente, base ortonormale del piano perpendicolare
- campionamento del piano (pixel isotropi da 0.3 mm, interpolazione cubica)

Uso:
    from centregeom import smooth_path, fit_spline, arc_length, sample_plane

    spline = fit_spline(smooth_path(path, mask.spacing, mask.origin))
    length = arc_length(spline, spline.knots[-1])
"""

import logging
from dataclasses import dataclass, field
from typing import List, Any, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from volio import Grid, sample_points

logger = logging.getLogger(__name__)


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

PLANE_PIXEL_MM = 0.3
DEFAULT_HALF_EXTENT_MM = 12.0
HALF_EXTENT_RADIUS_FACTOR = 1.5

# Passo delle stazioni lungo la spline (unità dei nodi, ~mm con nodi a corda)
STATION_STEP = 0.25

SMOOTHING_HALF_WINDOW = 2
QUADRATURE_NODES = 10
MIN_DERIVATIVE_NORM = 1e-9
MIN_CHORD_MM = 1e-9


class SplineError(ValueError):
    """Percorso o parametro non valido per la spline."""


# =============================================================================
# TIPI
# =============================================================================

@dataclass(frozen=True, eq=False)
class AirwaySpline:
    """
    Curva cubica a tratti F(t): su [k_i, k_{i+1}] vale sum_j c_{i,j} (t - k_i)^j.

    coeffs ha forma (n_segmenti, 4, 3), potenze crescenti.
    """

    knots: np.ndarray
    coeffs: np.ndarray
    _cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        coeffs = np.asarray(self.coeffs, dtype=float)
        if knots.ndim != 1 or len(knots) < 2 or np.any(np.diff(knots) <= 0):
            raise SplineError("I nodi devono essere strettamente crescenti (almeno 2)")
        if coeffs.shape != (len(knots) - 1, 4, 3):
            raise SplineError(f"Coefficienti di forma {coeffs.shape}, attesa {(len(knots) - 1, 4, 3)}")
        object.__setattr__(self, 'knots', knots)
        object.__setattr__(self, 'coeffs', coeffs)
        seg = np.array([self._segment_length(i, 0.0, knots[i + 1] - knots[i]) for i in range(len(knots) - 1)])
        object.__setattr__(self, '_cumulative', np.concatenate([[0.0], np.cumsum(seg)]))

    @property
    def t_max(self) -> float:
        return float(self.knots[-1])

    @property
    def length(self) -> float:
        return float(self._cumulative[-1])

    def _locate(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        i = np.clip(np.searchsorted(self.knots, t, side='right') - 1, 0, len(self.knots) - 2)
        return i, t - self.knots[i]

    def evaluate(self, t: Any, derivative: int = 0) -> np.ndarray:
        """F(t) o sue derivate (fino alla seconda); t scalare o array."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        i, u = self._locate(t_arr)
        c = self.coeffs[i]
        if derivative == 0:
            out = c[:, 0] + u[:, None] * (c[:, 1] + u[:, None] * (c[:, 2] + u[:, None] * c[:, 3]))
        elif derivative == 1:
            out = c[:, 1] + u[:, None] * (2.0 * c[:, 2] + 3.0 * u[:, None] * c[:, 3])
        elif derivative == 2:
            out = 2.0 * c[:, 2] + 6.0 * u[:, None] * c[:, 3]
        else:
            raise ValueError(f"Derivata di ordine {derivative} non supportata")
        return out[0] if np.ndim(t) == 0 else out

    def _segment_length(self, i: int, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        x, w = np.polynomial.legendre.leggauss(QUADRATURE_NODES)
        u = 0.5 * (b - a) * x + 0.5 * (b + a)
        c = self.coeffs[i]
        d = c[1] + u[:, None] * (2.0 * c[2] + 3.0 * u[:, None] * c[3])
        return float(0.5 * (b - a) * np.sum(w * np.linalg.norm(d, axis=1)))


@dataclass(frozen=True, eq=False)
class PlaneImage:
    """Immagine campionata su un piano: pixel [i, j] in origin + a_i v1 + a_j v2."""

    data: np.ndarray
    origin: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    pixel: float = PLANE_PIXEL_MM
    half_extent: float = DEFAULT_HALF_EXTENT_MM

    @property
    def size(self) -> int:
        return int(self.data.shape[0])

    @property
    def centre(self) -> float:
        """Indice (frazionario) del pixel centrale."""
        return (self.size - 1) / 2.0


# =============================================================================
# SMOOTHING E SPLINE
# =============================================================================

def smooth_path(path: Any, spacing: Any, origin: Any = (0.0, 0.0, 0.0)) -> np.ndarray:
    """
    Converte i voxel del percorso in mm e applica la media mobile a cinque punti.

    La finestra si restringe simmetricamente agli estremi, che restano invariati.
    """
    voxels = path.as_array() if hasattr(path, 'as_array') else np.asarray(path, dtype=float)
    if len(voxels) < 2:
        raise SplineError(f"Percorso troppo corto per lo smoothing: {len(voxels)} voxel")
    pts = np.asarray(origin, dtype=float) + voxels * np.asarray(spacing, dtype=float)

    n = len(pts)
    cum = np.vstack([np.zeros((1, 3)), np.cumsum(pts, axis=0)])
    idx = np.arange(n)
    h = np.minimum.reduce([np.full(n, SMOOTHING_HALF_WINDOW), idx, n - 1 - idx])
    smoothed = (cum[idx + h + 1] - cum[idx - h]) / (2 * h + 1)[:, None]
    smoothed[0], smoothed[-1] = pts[0], pts[-1]
    return smoothed


def fit_spline(points: Any) -> AirwaySpline:
    """
    Spline cubica naturale interpolante con nodi alla lunghezza di corda cumulata.

    Args:
        points: array (n, 3) in mm, n >= 2, punti consecutivi distinti

    Returns:
        AirwaySpline
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise SplineError(f"Servono almeno 2 punti 3D, ricevuto array di forma {pts.shape}")
    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(chords < MIN_CHORD_MM):
        raise SplineError(f"Punti consecutivi duplicati (indice {int(np.argmax(chords < MIN_CHORD_MM))})")

    knots = np.concatenate([[0.0], np.cumsum(chords)])
    cs = CubicSpline(knots, pts, bc_type='natural', axis=0)
    # scipy: c[m] moltiplica (t - k_i)^(3 - m)
    coeffs = np.transpose(cs.c[::-1], (1, 0, 2))
    return AirwaySpline(knots=knots, coeffs=coeffs)


def arc_length(sp: AirwaySpline, t: float) -> float:
    """Lunghezza d'arco da F(0) a F(t) in mm."""
    if t < -1e-12 or t > sp.t_max + 1e-9:
        raise SplineError(f"Parametro fuori range: t={t} (range [0, {sp.t_max}])")
    t = min(max(float(t), 0.0), sp.t_max)
    i = int(np.clip(np.searchsorted(sp.knots, t, side='right') - 1, 0, len(sp.knots) - 2))
    return float(sp._cumulative[i] + sp._segment_length(i, 0.0, t - sp.knots[i]))


def tangent(sp: AirwaySpline, t: float) -> np.ndarray:
    """Tangente unitaria q(t) = F'(t) / |F'(t)|."""
    d = sp.evaluate(float(t), derivative=1)
    norm = float(np.linalg.norm(d))
    if norm < MIN_DERIVATIVE_NORM:
        raise SplineError(f"Derivata degenere in t={t} (|F'|={norm:.2e})")
    return d / norm


def station_parameters(sp: AirwaySpline, step: float = STATION_STEP) -> np.ndarray:
    """Parametri delle stazioni di misura, a intervalli regolari da 0 a k_n."""
    return np.arange(0.0, sp.t_max + 1e-9, step)


# =============================================================================
# PIANO PERPENDICOLARE
# =============================================================================

def plane_basis(q: Any) -> Tuple[np.ndarray, np.ndarray]:
    """
    Base (v1, v2) del piano perpendicolare alla tangente q.

    Il vettore ausiliario a è l'asse canonico con la componente |q| minima
    (a parità: x, poi y, poi z); v1 = (a x q)/|a x q|, v2 = v1 x q.
    """
    q = np.asarray(q, dtype=float)
    a = np.zeros(3)
    a[int(np.argmin(np.abs(q)))] = 1.0
    v1 = np.cross(a, q)
    v1 /= np.linalg.norm(v1)
    v2 = np.cross(v1, q)
    return v1, v2


def plane_half_extent(local_radius: Optional[float]) -> float:
    """12 mm, oppure 1.5 volte il raggio locale della maschera se maggiore."""
    if local_radius is None:
        return DEFAULT_HALF_EXTENT_MM
    return max(DEFAULT_HALF_EXTENT_MM, HALF_EXTENT_RADIUS_FACTOR * float(local_radius))


def sample_plane(v: Grid, origin: Any, v1: Any, v2: Any,
                 half_extent: float = DEFAULT_HALF_EXTENT_MM) -> PlaneImage:
    """
    Campiona il volume sul piano origin + a1 v1 + a2 v2 con pixel da 0.3 mm.

    Interpolazione cubica per CT e maschera (la maschera diventa frazionaria).
    Solleva SamplingBoundsError se il piano esce dal volume.
    """
    origin = np.asarray(origin, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    n = int(round(2.0 * half_extent / PLANE_PIXEL_MM)) + 1
    alphas = (np.arange(n) - (n - 1) / 2.0) * PLANE_PIXEL_MM
    pts = origin + alphas[:, None, None] * v1 + alphas[None, :, None] * v2
    values = sample_points(v, pts.reshape(-1, 3), 'cubic').reshape(n, n)
    return PlaneImage(data=values, origin=origin, v1=v1, v2=v2,
                      pixel=PLANE_PIXEL_MM, half_extent=float(half_extent))
