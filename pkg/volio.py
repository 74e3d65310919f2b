"""
Volio - Volumi CT, Maschere e Campionamento
===========================================
Rappresentazione di volumi CT e maschere binarie, lettura/scrittura
MetaImage (.mhd/.raw), campionamento interpolato, morfologia sferica
e trasformata distanza per singola fetta assiale.

Convenzioni:
    - gli array hanno forma (nx, ny, nz) e sono indicizzati [i, j, k]
    - il centro del voxel (i, j, k) si trova in origin + (i, j, k) * spacing (mm)
    - volumi e maschere sono immutabili dopo la costruzione

Uso:
    from volio import load_volume, sample_interpolated

    ct = load_volume('paziente_ct.mhd')
    hu = sample_interpolated(ct, (12.0, 30.5, 44.0), 'cubic')
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Any, Tuple, Union

import numpy as np
import SimpleITK as sitk
from scipy.ndimage import (
    binary_dilation, binary_erosion, distance_transform_edt, map_coordinates
)
from skimage.morphology import ball

logger = logging.getLogger(__name__)


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

# Tipi MetaImage supportati: nome -> (dtype numpy, byte per elemento)
ELEMENT_TYPES = {
    'MET_SHORT': (np.int16, 2),
    'MET_UCHAR': (np.uint8, 1),
}

# Chiavi obbligatorie dell'header
REQUIRED_KEYS = ['NDims', 'DimSize', 'ElementType', 'ElementDataFile']

# Parametro del kernel cubic convolution (riproduce i polinomi lineari)
CUBIC_A = -0.5

# Tolleranza sulle coordinate continue ai bordi del volume
BOUNDS_EPS = 1e-9

SCHEMES = ('linear', 'cubic')


class VolumeFormatError(ValueError):
    """File MetaImage non valido o non supportato."""


class SamplingBoundsError(ValueError):
    """Punto di campionamento fuori dal volume (margine incluso)."""


# =============================================================================
# TIPI
# =============================================================================

def _as_triple(values: Any, name: str) -> Tuple[float, float, float]:
    triple = tuple(float(v) for v in values)
    if len(triple) != 3:
        raise ValueError(f"{name} deve avere 3 componenti, trovate {len(triple)}")
    return triple


class _Grid:
    """Metodi comuni a volumi e maschere (geometria della griglia)."""

    data: np.ndarray
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def index_to_mm(self, index: Any) -> np.ndarray:
        """Indici voxel (anche frazionari, forma (..., 3)) -> coordinate mm."""
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def mm_to_index(self, point: Any) -> np.ndarray:
        """Coordinate mm (forma (..., 3)) -> indici continui."""
        return (np.asarray(point, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def same_grid(self, other: '_Grid') -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing)
                and np.allclose(self.origin, other.origin))


def _freeze(instance: Any, data: np.ndarray, dtype: Any) -> None:
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.ndim != 3:
        raise ValueError(f"Il volume deve essere 3D, ricevuto ndim={arr.ndim}")
    arr.setflags(write=False)
    object.__setattr__(instance, 'data', arr)
    spacing = _as_triple(instance.spacing, 'spacing')
    if min(spacing) <= 0:
        raise ValueError(f"Spacing non valido: {spacing} (tutte le componenti devono essere > 0)")
    object.__setattr__(instance, 'spacing', spacing)
    object.__setattr__(instance, 'origin', _as_triple(instance.origin, 'origin'))


@dataclass(frozen=True, eq=False)
class CTVolume(_Grid):
    """Volume CT in unità Hounsfield (int16)."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if np.issubdtype(raw.dtype, np.floating) or raw.dtype.itemsize > 2:
            if raw.size and (raw.min() < -32768 or raw.max() > 32767):
                raise ValueError("Valori HU fuori dal range int16 [-32768, 32767]")
        _freeze(self, raw, np.int16)


@dataclass(frozen=True, eq=False)
class BinaryMask(_Grid):
    """Maschera binaria allineata a un CTVolume (segmentazione vie aeree)."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        _freeze(self, np.asarray(self.data) != 0, bool)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def with_data(self, data: np.ndarray) -> 'BinaryMask':
        return BinaryMask(data, self.spacing, self.origin)


Grid = Union[CTVolume, BinaryMask]


# =============================================================================
# I/O METAIMAGE
# =============================================================================

def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Legge e valida l'header di un file .mhd prima di caricare il payload.

    Returns:
        Dizionario con:
            - dims: (nx, ny, nz)
            - spacing, origin: terne in mm
            - element_type: es. 'MET_SHORT'
            - data_file: Path del file .raw
            - payload_bytes: dimensione attesa del payload
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='ascii', errors='strict')
    except (OSError, UnicodeDecodeError) as e:
        raise VolumeFormatError(f"Header non leggibile: {path} ({e})") from e

    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if '=' not in line:
            raise VolumeFormatError(f"Riga header malformata: '{line.strip()}'")
        key, value = line.split('=', 1)
        fields[key.strip()] = value.strip()

    missing = [k for k in REQUIRED_KEYS if k not in fields]
    if missing:
        raise VolumeFormatError(f"Chiavi mancanti nell'header {path.name}: {', '.join(missing)}")

    try:
        ndims = int(fields['NDims'])
        dims = tuple(int(v) for v in fields['DimSize'].split())
        spacing = tuple(float(v) for v in fields.get('ElementSpacing', '1 1 1').split())
        origin = tuple(float(v) for v in fields.get('Offset', fields.get('Origin', '0 0 0')).split())
    except ValueError as e:
        raise VolumeFormatError(f"Valori numerici non validi nell'header {path.name}: {e}") from e

    if ndims != 3 or len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeFormatError(f"Sono supportati solo volumi 3D (NDims={ndims}, DimSize={dims})")
    if min(dims) <= 0 or min(spacing) <= 0:
        raise VolumeFormatError(f"DimSize/ElementSpacing non validi: {dims} / {spacing}")

    element_type = fields['ElementType']
    if element_type not in ELEMENT_TYPES:
        raise VolumeFormatError(f"ElementType non supportato: {element_type}")
    if fields.get('CompressedData', 'False').lower() == 'true':
        raise VolumeFormatError("Payload compressi non supportati")
    if fields.get('BinaryDataByteOrderMSB', fields.get('ElementByteOrderMSB', 'False')).lower() == 'true':
        raise VolumeFormatError("Ordine dei byte big-endian non supportato")

    data_name = fields['ElementDataFile']
    if data_name.upper() in ('LOCAL', 'LIST'):
        raise VolumeFormatError(f"ElementDataFile = {data_name} non supportato")
    data_file = path.parent / data_name
    if not data_file.exists():
        raise VolumeFormatError(f"File dati mancante: {data_file}")

    payload_bytes = int(np.prod(dims)) * ELEMENT_TYPES[element_type][1]
    actual = data_file.stat().st_size
    if actual != payload_bytes:
        raise VolumeFormatError(
            f"Dimensione payload incoerente: header {dims} -> {payload_bytes} byte, file {actual} byte"
        )

    return {
        'dims': dims,
        'spacing': spacing,
        'origin': origin,
        'element_type': element_type,
        'data_file': data_file,
        'payload_bytes': payload_bytes,
    }


def _read_array(path: Union[str, Path], element_type: str) -> Tuple[np.ndarray, Dict[str, Any]]:
    header = read_header(path)
    if header['element_type'] != element_type:
        raise VolumeFormatError(
            f"ElementType {header['element_type']} non valido qui (atteso {element_type})"
        )
    try:
        image = sitk.ReadImage(str(path))
    except RuntimeError as e:
        raise VolumeFormatError(f"Lettura fallita: {path} ({e})") from e

    # SimpleITK restituisce (nz, ny, nx)
    arr = sitk.GetArrayFromImage(image).transpose(2, 1, 0)
    if tuple(arr.shape) != header['dims']:
        raise VolumeFormatError(f"Dimensioni lette {arr.shape} diverse dall'header {header['dims']}")
    return arr, header


def _write_array(arr: np.ndarray, spacing: Tuple, origin: Tuple, path: Union[str, Path]) -> None:
    path = Path(path)
    image = sitk.GetImageFromArray(np.ascontiguousarray(arr.transpose(2, 1, 0)))
    image.SetSpacing([float(s) for s in spacing])
    image.SetOrigin([float(o) for o in origin])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        sitk.WriteImage(image, str(path), False)
    except (RuntimeError, OSError) as e:
        raise OSError(f"Scrittura fallita: {path} ({e})") from e


def load_volume(path: Union[str, Path]) -> CTVolume:
    """Carica un volume CT int16 da una coppia .mhd/.raw."""
    arr, header = _read_array(path, 'MET_SHORT')
    logger.debug("Volume caricato %s: dims=%s spacing=%s", path, header['dims'], header['spacing'])
    return CTVolume(arr, header['spacing'], header['origin'])


def save_volume(v: CTVolume, path: Union[str, Path]) -> None:
    """Scrive il volume in formato MetaImage (payload non compresso)."""
    _write_array(np.asarray(v.data, dtype=np.int16), v.spacing, v.origin, path)


def load_mask(path: Union[str, Path]) -> BinaryMask:
    """Carica una maschera binaria (payload 8 bit senza segno, != 0 -> True)."""
    arr, header = _read_array(path, 'MET_UCHAR')
    return BinaryMask(arr, header['spacing'], header['origin'])


def save_mask(m: BinaryMask, path: Union[str, Path]) -> None:
    _write_array(m.data.astype(np.uint8), m.spacing, m.origin, path)


# =============================================================================
# CAMPIONAMENTO
# =============================================================================

def _keys_weights(t: np.ndarray) -> np.ndarray:
    """Pesi cubic convolution per gli offset -1, 0, 1, 2 (t in [0, 1))."""
    a = CUBIC_A
    d = np.stack([1.0 + t, t, 1.0 - t, 2.0 - t], axis=-1)
    near = ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0
    far = ((a * d - 5.0 * a) * d + 8.0 * a) * d - 4.0 * a
    return np.where(d <= 1.0, near, far)


def _check_bounds(c: np.ndarray, dims: Tuple[int, int, int], margin: int) -> None:
    upper = np.asarray(dims, dtype=float) - 1 - margin
    bad = np.any((c < margin - BOUNDS_EPS) | (c > upper + BOUNDS_EPS), axis=-1)
    if np.any(bad):
        first = c[np.argmax(bad)]
        raise SamplingBoundsError(
            f"Punto fuori dal volume: indice continuo {np.round(first, 3).tolist()} "
            f"(dims={dims}, margine={margin})"
        )


def sample_points(v: Grid, points: Any, scheme: str = 'cubic') -> np.ndarray:
    """
    Campiona il volume in N punti espressi in mm.

    Args:
        v: CTVolume o BinaryMask (le maschere sono campionate come 0/1)
        points: array (N, 3) in mm
        scheme: 'linear' (trilineare) o 'cubic' (cubic convolution, a = -0.5)

    Returns:
        Array (N,) di valori float
    """
    if scheme not in SCHEMES:
        raise ValueError(f"Schema di interpolazione sconosciuto: {scheme}")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    c = v.mm_to_index(pts)
    data = v.data

    if scheme == 'linear':
        _check_bounds(c, v.dims, 0)
        return map_coordinates(data.astype(float), c.T, order=1, mode='nearest')

    _check_bounds(c, v.dims, 1)
    base = np.floor(c).astype(int)
    frac = c - base
    offsets = np.arange(-1, 3)
    idx = [np.clip(base[:, d, None] + offsets, 0, v.dims[d] - 1) for d in range(3)]
    wx, wy, wz = (_keys_weights(frac[:, d]) for d in range(3))
    block = data[idx[0][:, :, None, None], idx[1][:, None, :, None], idx[2][:, None, None, :]]
    return np.einsum('na,nb,nc,nabc->n', wx, wy, wz, block.astype(float))


def sample_interpolated(v: Grid, p: Any, scheme: str = 'cubic') -> float:
    """Valore interpolato nel punto p (mm). Esatto ai centri dei voxel."""
    return float(sample_points(v, np.asarray(p, dtype=float).reshape(1, 3), scheme)[0])


# =============================================================================
# MORFOLOGIA
# =============================================================================

def erode_sphere(m: BinaryMask, r: int) -> BinaryMask:
    """
    Erosione con elemento strutturante sferico (offset con norma <= r voxel).

    I voxel fuori dal volume contano come sfondo.
    """
    if r < 0:
        raise ValueError(f"Raggio negativo: {r}")
    if r == 0 or not m.data.any():
        return m
    eroded = binary_erosion(m.data, structure=ball(int(r)), border_value=0)
    return m.with_data(eroded)


def close_sphere(m: BinaryMask, r: int) -> BinaryMask:
    """Chiusura morfologica (dilatazione poi erosione) con sfera di raggio r."""
    if r < 0:
        raise ValueError(f"Raggio negativo: {r}")
    if r == 0 or not m.data.any():
        return m
    r = int(r)
    element = ball(r)
    padded = np.pad(m.data, r, mode='constant', constant_values=False)
    closed = binary_erosion(binary_dilation(padded, structure=element), structure=element, border_value=0)
    return m.with_data(closed[r:-r, r:-r, r:-r])


def edt_2d(m: BinaryMask, slice_index: int) -> np.ndarray:
    """
    Distanza euclidea (in voxel) dal fondo più vicino sulla fetta assiale k.

    Il bordo della fetta è trattato come sfondo.
    """
    nz = m.dims[2]
    if not 0 <= slice_index < nz:
        raise IndexError(f"Fetta {slice_index} fuori range [0, {nz})")
    plane = m.data[:, :, slice_index]
    if not plane.any():
        return np.zeros(plane.shape, dtype=float)
    padded = np.pad(plane, 1, mode='constant', constant_values=False)
    return distance_transform_edt(padded)[1:-1, 1:-1]
