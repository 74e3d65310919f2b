"""
CTsim - Simulazione di Dose e Dimensione Voxel
==============================================
Simula scansioni a dose ridotta e a risoluzione ridotta:

- dose: per ogni fetta assiale trasformata di Radon, rumore gaussiano
  i.i.d. con deviazione standard 10^lambda su ogni bin del sinogramma,
  retroproiezione filtrata (rampa) e arrotondamento a interi
- calibrazione: T_n = deviazione standard HU nella trachea erosa
- voxel: pre-smoothing gaussiano + interpolazione sinc finestrata
  (Lanczos-3) su una griglia con spacing moltiplicato per sigma_s

Uso:
    from ctsim import simulate_dose, measure_Tn, rescale_volume

    noisy = simulate_dose(ct, lam=3.5, seed=7)
    print(measure_Tn(noisy, trachea_mask))
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Any, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree
from skimage.transform import iradon, radon

from volio import CTVolume, BinaryMask, close_sphere, erode_sphere

logger = logging.getLogger(__name__)


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

# 0 .. 179 gradi a passi di 0.1
FULL_ANGLE_COUNT = 1791
DEFAULT_ANGLES = np.linspace(0.0, 179.0, FULL_ANGLE_COUNT)

TN_SLICES = 60
TN_EROSION_RADIUS = 5

# Pre-smoothing: sigma = 0.4 x nuovo spacing
SMOOTHING_FACTOR = 0.4
LANCZOS_LOBES = 3

HU_RANGE = (-32768, 32767)


class CtsimError(ValueError):
    """Parametri o geometria non validi per la simulazione."""


@dataclass
class Sinogram:
    """Proiezioni parallele: data[bin, angolo], angoli in gradi."""

    data: np.ndarray
    angles: np.ndarray
    image_size: int

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        if self.angles.ndim != 1 or len(self.angles) == 0:
            raise CtsimError("Lista angoli vuota")
        if np.any(np.diff(self.angles) <= 0) or self.angles[0] < 0 or self.angles[-1] >= 180:
            raise CtsimError("Gli angoli devono essere strettamente crescenti in [0, 180)")


# =============================================================================
# FUNZIONI DI UTILITÀ
# =============================================================================

def dose_angles(n_angles: int = FULL_ANGLE_COUNT) -> np.ndarray:
    """Angoli equispaziati in [0, 179] gradi (1791 = passo 0.1)."""
    if n_angles < 2:
        raise CtsimError(f"Servono almeno 2 angoli, richiesti {n_angles}")
    return np.linspace(0.0, 179.0, int(n_angles))


def _to_int16(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(values), *HU_RANGE).astype(np.int16)


def _square(slice2d: np.ndarray) -> Tuple[np.ndarray, Tuple[slice, slice]]:
    """Porta la fetta a forma quadrata replicando i bordi; restituisce anche il ritaglio inverso."""
    nx, ny = slice2d.shape
    n = max(nx, ny)
    before = ((n - nx) // 2, (n - ny) // 2)
    padded = np.pad(slice2d, [(before[0], n - nx - before[0]), (before[1], n - ny - before[1])], mode='edge')
    crop = (slice(before[0], before[0] + nx), slice(before[1], before[1] + ny))
    return padded, crop


# =============================================================================
# RADON / RETROPROIEZIONE FILTRATA
# =============================================================================

def radon_slice(slice2d: Any, angles: Optional[Sequence[float]] = None) -> Sinogram:
    """Trasformata di Radon a geometria parallela di una fetta quadrata (bin = 1 pixel)."""
    img = np.asarray(slice2d, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise CtsimError(f"Fetta non valida: forma {img.shape}")
    if img.shape[0] != img.shape[1]:
        raise CtsimError(f"La fetta deve essere quadrata (usare il padding), forma {img.shape}")
    theta = DEFAULT_ANGLES if angles is None else np.asarray(angles, dtype=float)
    data = radon(img, theta=theta, circle=False)
    return Sinogram(data=data, angles=theta, image_size=img.shape[0])


def fbp_slice(s: Sinogram, out_size: Optional[int] = None) -> np.ndarray:
    """Retroproiezione filtrata con filtro rampa e interpolazione lineare."""
    if s.data.ndim != 2 or s.data.shape[1] != len(s.angles):
        raise CtsimError(f"Sinogramma {s.data.shape} incoerente con {len(s.angles)} angoli")
    size = s.image_size if out_size is None else int(out_size)
    return iradon(s.data, theta=s.angles, output_size=size,
                  filter_name='ramp', interpolation='linear', circle=False)


# =============================================================================
# SIMULAZIONE DOSE
# =============================================================================

def _slice_rng(seed: int, k: int) -> np.random.Generator:
    """Generatore a contatore (Philox) derivato da (seed, indice fetta)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(k)])))


def _dose_slice(args: Tuple[np.ndarray, float, int, int, np.ndarray]) -> np.ndarray:
    slice2d, sigma_n, seed, k, angles = args
    padded, crop = _square(slice2d.astype(float))
    sino = radon_slice(padded, angles)
    if sigma_n > 0:
        noise = _slice_rng(seed, k).standard_normal(sino.data.shape)
        sino = Sinogram(data=sino.data + sigma_n * noise, angles=sino.angles, image_size=sino.image_size)
    return _to_int16(fbp_slice(sino, padded.shape[0])[crop])


def noise_sigma(lam: Optional[float], n_angles: int = FULL_ANGLE_COUNT, calibrate: bool = False) -> float:
    """
    Deviazione standard del rumore sul sinogramma: 10^lambda.

    Con calibrate=True è scalata di sqrt(n_angles / 1791), così che un
    numero ridotto di angoli dia lo stesso rumore in immagine.
    """
    if lam is None:
        return 0.0
    sigma = 10.0 ** float(lam)
    if calibrate:
        sigma *= np.sqrt(n_angles / FULL_ANGLE_COUNT)
    return float(sigma)


def simulate_dose(v: CTVolume, lam: Optional[float], seed: int = 0,
                  angles: Optional[Sequence[float]] = None, calibrate: bool = False,
                  workers: int = 1) -> CTVolume:
    """
    Simula una scansione a dose ridotta, fetta per fetta.

    Args:
        v: volume originale
        lam: esponente del rumore (sigma_n = 10^lam); None = solo andata e ritorno
        seed: seme; ogni fetta k usa lo stream (seed, k)
        angles: angoli di proiezione (default 0..179 passo 0.1)
        calibrate: scala sigma_n per il numero di angoli (vedi noise_sigma)
        workers: processi paralleli (l'ordine non cambia il risultato)

    Returns:
        CTVolume int16 sulla stessa griglia
    """
    theta = DEFAULT_ANGLES if angles is None else np.asarray(angles, dtype=float)
    sigma_n = noise_sigma(lam, len(theta), calibrate)
    nz = v.dims[2]
    tasks = [(v.data[:, :, k], sigma_n, seed, k, theta) for k in range(nz)]
    logger.info("Simulazione dose: lambda=%s sigma_n=%.3g, %d fette, %d angoli", lam, sigma_n, nz, len(theta))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            slices = list(pool.map(_dose_slice, tasks))
    else:
        slices = [_dose_slice(t) for t in tasks]
    return CTVolume(np.stack(slices, axis=2), v.spacing, v.origin)


def measure_Tn(v: CTVolume, trachea: BinaryMask) -> float:
    """
    Deviazione standard (popolazione) degli HU nelle prime 60 fette assiali
    della trachea, erose con una sfera di raggio 5 voxel.
    """
    if not v.same_grid(trachea):
        raise CtsimError("Volume e maschera trachea non sono sulla stessa griglia")
    occupied = np.flatnonzero(trachea.data.any(axis=(0, 1)))
    if len(occupied) == 0:
        raise CtsimError("Maschera della trachea vuota")
    first = trachea.data.copy()
    first[:, :, occupied[TN_SLICES:]] = False
    eroded = erode_sphere(trachea.with_data(first), TN_EROSION_RADIUS)
    if not eroded.data.any():
        raise CtsimError(f"Maschera vuota dopo l'erosione con raggio {TN_EROSION_RADIUS}")
    return float(np.std(v.data[eroded.data].astype(float)))


# =============================================================================
# DIMENSIONE VOXEL
# =============================================================================

def _rescaled_dims(dims: Tuple[int, int, int], scale: float) -> Tuple[int, int, int]:
    new = tuple(int(np.floor((n - 1) / scale + 1e-9)) + 1 for n in dims)
    if min(new) < 2:
        raise CtsimError(f"Griglia ricampionata troppo piccola: {new} (scala {scale})")
    return new


def _lanczos_matrix(n_old: int, n_new: int, scale: float) -> np.ndarray:
    """Pesi Lanczos-3 (supporto in voxel della nuova griglia), normalizzati, bordi replicati."""
    radius = LANCZOS_LOBES * scale
    W = np.zeros((n_new, n_old))
    for j in range(n_new):
        c = j * scale
        taps = np.arange(int(np.ceil(c - radius)), int(np.floor(c + radius)) + 1)
        x = (c - taps) / scale
        w = np.sinc(x) * np.sinc(x / LANCZOS_LOBES)
        w[np.abs(x) >= LANCZOS_LOBES] = 0.0
        np.add.at(W[j], np.clip(taps, 0, n_old - 1), w)
        W[j] /= W[j].sum()
    return W


def _check_scale(scale: float) -> None:
    if scale < 1.0:
        raise CtsimError(f"Fattore di scala deve essere >= 1, ricevuto {scale}")


def rescale_volume(v: CTVolume, scale: float) -> CTVolume:
    """
    Ricampiona il volume con spacing moltiplicato per scale (>= 1).

    Pre-smoothing gaussiano (sigma = 0.4 x nuovo spacing) e sinc finestrata Lanczos-3.
    """
    _check_scale(scale)
    if scale == 1.0:
        return v
    dims = _rescaled_dims(v.dims, scale)
    smoothed = gaussian_filter(v.data.astype(float), sigma=SMOOTHING_FACTOR * scale, mode='nearest')
    out = smoothed
    for axis in range(3):
        W = _lanczos_matrix(v.dims[axis], dims[axis], scale)
        out = np.moveaxis(np.tensordot(W, np.moveaxis(out, axis, 0), axes=1), 0, axis)
    spacing = tuple(s * scale for s in v.spacing)
    logger.debug("Volume ricampionato %s -> %s (scala %.2f)", v.dims, dims, scale)
    return CTVolume(_to_int16(out), spacing, v.origin)


def rescale_mask(m: BinaryMask, scale: float) -> BinaryMask:
    """Vicino più prossimo sulla nuova griglia, poi chiusura con sfera di raggio 1."""
    _check_scale(scale)
    if scale == 1.0:
        return m
    dims = _rescaled_dims(m.dims, scale)
    idx = [np.clip(np.round(np.arange(n) * scale).astype(int), 0, old - 1) for n, old in zip(dims, m.dims)]
    data = m.data[np.ix_(*idx)]
    spacing = tuple(s * scale for s in m.spacing)
    return close_sphere(BinaryMask(data, spacing, m.origin), 1)


def rescale_points(points: List[Any], scale: float, mask: Optional[BinaryMask] = None) -> List[Tuple[int, int, int]]:
    """
    Riporta voxel (es. punti distali) sulla griglia ricampionata.

    Se è data la maschera ricampionata, i punti che cadono fuori vengono
    spostati sul voxel di maschera più vicino.
    """
    _check_scale(scale)
    pts = np.round(np.asarray(points, dtype=float).reshape(-1, 3) / scale).astype(int)
    if mask is not None:
        pts = np.clip(pts, 0, np.asarray(mask.dims) - 1)
        inside = mask.data[tuple(pts.T)]
        if not np.all(inside):
            voxels = np.argwhere(mask.data)
            if len(voxels) == 0:
                raise CtsimError("Maschera ricampionata vuota")
            _, nearest = cKDTree(voxels * np.asarray(mask.spacing)).query(pts[~inside] * np.asarray(mask.spacing))
            pts[~inside] = voxels[nearest]
    return [tuple(int(i) for i in p) for p in pts]
