"""
Phantom - Fantocci Sintetici di Vie Aeree
=========================================
Genera volumi CT e maschere di tubi rastremati (dritti, elicoidali o
biforcati a Y) con verità analitica: linea centrale, raggio r(s),
area A(s) = pi * r0^2 * exp(T * s) e tasso di rastremazione T.

Il valore HU pre-sfocatura di ogni voxel è la frazione di copertura
di lume/parete/parenchima (esatta rispetto al piano tangente vicino ai bordi),
poi convoluta con una PSF gaussiana.

Uso:
    from phantom import PhantomSpec, make_phantom

    ct, mask, truth = make_phantom(PhantomSpec(kind='straight', r0=4.0, taper=-0.02))
"""

import itertools
import json
import logging
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Dict, List, Any, Optional, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from volio import CTVolume, BinaryMask, save_volume, save_mask

logger = logging.getLogger(__name__)


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

PHANTOM_KINDS = ('straight', 'helix', 'ysplit')

# Passo di campionamento della linea centrale densa (mm)
CENTRELINE_STEP_MM = 0.05

# Margine minimo tra il tubo (parete inclusa) e il bordo della griglia (voxel)
MIN_MARGIN_VOX = 5

# Semi-estensione dei piani di misura da contenere nella griglia automatica (mm)
PLANE_CLEARANCE_MM = 12.0

# Prolungamento del lume CT oltre le estremità libere (mm); la maschera resta in [0, L]
CT_EXTENSION_MM = 10.0

# Raggio minimo misurabile, in voxel nel piano
MIN_RADIUS_VOX = 1.5

# Passo delle differenze finite per la normale alla superficie (mm)
GRADIENT_STEP_MM = 0.01

# Larghezza minima della proiezione del voxel sulla normale, in frazione dello spacing
MIN_WIDTH_FRACTION = 1e-3


class PhantomError(ValueError):
    """Specifica di fantoccio non valida o non rappresentabile sulla griglia."""


# =============================================================================
# SPECIFICA E VERITÀ
# =============================================================================

@dataclass
class PhantomSpec:
    """Parametri di un fantoccio (lunghezze in mm, taper in mm^-1)."""

    kind: str = 'straight'
    r0: float = 4.0
    taper: float = 0.0
    length: float = 60.0
    helix_radius: float = 20.0
    helix_pitch: float = 30.0
    branch_angle_deg: float = 60.0
    split_position: float = 0.4
    lumen_hu: float = -1000.0
    wall_hu: float = 0.0
    parenchyma_hu: float = -900.0
    wall_thickness: float = 1.5
    psf_sigma: float = 0.6
    spacing: Tuple[float, float, float] = (0.7, 0.7, 1.0)
    dims: Optional[Tuple[int, int, int]] = None
    noise_hu: float = 0.0
    seed: int = 0
    name: str = ''

    def radius(self, s: Any) -> np.ndarray:
        return self.r0 * np.exp(self.taper * np.asarray(s, dtype=float) / 2.0)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['spacing'] = list(self.spacing)
        d['dims'] = list(self.dims) if self.dims is not None else None
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'PhantomSpec':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise PhantomError(f"Chiavi sconosciute nella specifica del fantoccio: {', '.join(unknown)}")
        d = dict(d)
        if 'spacing' in d:
            d['spacing'] = tuple(float(s) for s in d['spacing'])
        if d.get('dims') is not None:
            d['dims'] = tuple(int(n) for n in d['dims'])
        return cls(**d)


@dataclass
class PhantomTruth:
    """
    Verità analitica di un fantoccio.

    Ogni via aerea (una per dritto/elica, due per la Y) ha la sua linea
    centrale campionata densamente dall'inizio della trachea (s = 0) al
    punto distale (s = length).
    """

    kind: str
    r0: float
    taper: float
    length: float
    centrelines: List[np.ndarray]
    arclengths: List[np.ndarray]
    start_voxel: Tuple[int, int, int]
    distal_voxels: List[Tuple[int, int, int]]
    bifurcation_intervals: List[Tuple[float, float]] = field(default_factory=list)
    junction_mm: Optional[np.ndarray] = None

    def radius(self, s: Any) -> np.ndarray:
        return self.r0 * np.exp(self.taper * np.asarray(s, dtype=float) / 2.0)

    def arclength_of(self, point: Any, airway: int = 0) -> float:
        """Ascissa curvilinea del campione di verità più vicino al punto (mm)."""
        tree = cKDTree(self.centrelines[airway])
        _, idx = tree.query(np.asarray(point, dtype=float))
        return float(self.arclengths[airway][idx])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'r0': self.r0,
            'taper': self.taper,
            'length': self.length,
            'start_voxel': list(self.start_voxel),
            'distal_voxels': [list(v) for v in self.distal_voxels],
            'bifurcation_intervals': [list(iv) for iv in self.bifurcation_intervals],
            'junction_mm': None if self.junction_mm is None else self.junction_mm.tolist(),
            # la linea centrale viene sottocampionata a 0.5 mm per il JSON
            'centrelines': [c[::10].round(4).tolist() for c in self.centrelines],
            'arclengths': [a[::10].round(4).tolist() for a in self.arclengths],
        }


def analytic_area(truth: PhantomTruth, s: float) -> float:
    """Area analitica pi * r(s)^2 in mm^2, per 0 <= s <= length."""
    if s < -1e-9 or s > truth.length + 1e-9:
        raise PhantomError(f"Ascissa fuori range: s={s} (lunghezza {truth.length} mm)")
    return float(np.pi * truth.r0 ** 2 * np.exp(truth.taper * s))


def helix_turn_length(helix_radius: float, pitch: float) -> float:
    """Lunghezza di un giro d'elica: sqrt((2 pi R)^2 + pitch^2)."""
    return float(np.hypot(2.0 * np.pi * helix_radius, pitch))


# =============================================================================
# GEOMETRIA
# =============================================================================

@dataclass
class _Branch:
    points: np.ndarray
    s: np.ndarray
    free_start: bool
    free_end: bool
    tree: Any = None

    def __post_init__(self):
        self.tree = cKDTree(self.points)


def _sample(curve, s_lo: float, s_hi: float) -> Tuple[np.ndarray, np.ndarray]:
    n = int(np.ceil((s_hi - s_lo) / CENTRELINE_STEP_MM)) + 1
    s = np.linspace(s_lo, s_hi, n)
    return curve(s), s


def _curves(spec: PhantomSpec) -> List[Tuple[Any, float, float, bool, bool]]:
    """Curve parametrizzate per ascissa curvilinea: (curva, s_lo, s_hi, inizio libero, fine libera)."""
    L = spec.length
    if spec.kind == 'straight':
        def line(s):
            return np.stack([np.zeros_like(s), np.zeros_like(s), s], axis=1)
        return [(line, 0.0, L, True, True)]

    if spec.kind == 'helix':
        R = spec.helix_radius
        turn = helix_turn_length(R, spec.helix_pitch)
        w = 2.0 * np.pi / turn

        def helix(s):
            return np.stack([R * np.cos(w * s) - R, R * np.sin(w * s), spec.helix_pitch * s / turn], axis=1)
        return [(helix, 0.0, L, True, True)]

    # ysplit: tronco lungo +z, due figli nel piano x-z a +/- meta' angolo
    s_split = spec.split_position * L
    half = np.radians(spec.branch_angle_deg) / 2.0

    def trunk(s):
        return np.stack([np.zeros_like(s), np.zeros_like(s), s], axis=1)

    def child(sign):
        def curve(s):
            u = s - s_split
            return np.stack([sign * np.sin(half) * u, np.zeros_like(s), s_split + np.cos(half) * u], axis=1)
        return curve

    return [
        (trunk, 0.0, s_split, True, False),
        (child(-1.0), s_split, L, False, True),
        (child(+1.0), s_split, L, False, True),
    ]


def _branches(spec: PhantomSpec, extension: float) -> List[_Branch]:
    branches = []
    for curve, lo, hi, free_start, free_end in _curves(spec):
        lo_ext = lo - extension if free_start else lo
        hi_ext = hi + extension if free_end else hi
        pts, s = _sample(curve, lo_ext, hi_ext)
        branches.append(_Branch(pts, s, free_start, free_end))
    return branches


def _fields(branches: List[_Branch], spec: PhantomSpec, pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Distanze con segno dal bordo del lume e dal bordo esterno della parete.

    Negative all'interno. Estremità libere con tappo piatto, giunzioni arrotondate.
    """
    f_lumen = np.full(len(pts), np.inf)
    f_outer = np.full(len(pts), np.inf)
    for br in branches:
        d, idx = br.tree.query(pts)
        r = spec.radius(br.s[idx])
        lum = d - r
        out = d - r - spec.wall_thickness
        for free, end_idx, nb_idx in ((br.free_start, 0, 1), (br.free_end, len(br.s) - 1, len(br.s) - 2)):
            if not free:
                continue
            at_end = idx == end_idx
            if not np.any(at_end):
                continue
            inward = br.points[nb_idx] - br.points[end_idx]
            inward /= np.linalg.norm(inward)
            rel = pts[at_end] - br.points[end_idx]
            axial = rel @ inward
            radial = np.sqrt(np.maximum(np.einsum('ij,ij->i', rel, rel) - axial ** 2, 0.0))
            lum[at_end] = np.maximum(radial - r[at_end], -axial)
            out[at_end] = np.maximum(radial - r[at_end] - spec.wall_thickness, -axial)
        np.minimum(f_lumen, lum, out=f_lumen)
        np.minimum(f_outer, out, out=f_outer)
    return f_lumen, f_outer


def _validate(spec: PhantomSpec) -> None:
    if spec.kind not in PHANTOM_KINDS:
        raise PhantomError(f"Tipo di fantoccio sconosciuto: {spec.kind} (ammessi: {', '.join(PHANTOM_KINDS)})")
    if spec.length <= 0 or spec.r0 <= 0:
        raise PhantomError(f"Lunghezza e raggio devono essere positivi (length={spec.length}, r0={spec.r0})")
    if spec.taper > 0:
        raise PhantomError(f"Il taper deve essere <= 0 per un tubo rastremato (T={spec.taper})")
    if min(spec.spacing) <= 0:
        raise PhantomError(f"Spacing non valido: {spec.spacing}")
    r_min = float(spec.radius(spec.length))
    in_plane = max(spec.spacing[0], spec.spacing[1])
    if r_min < MIN_RADIUS_VOX * in_plane:
        raise PhantomError(
            f"Raggio sotto-risolto: r_min={r_min:.2f} mm < {MIN_RADIUS_VOX} voxel ({MIN_RADIUS_VOX * in_plane:.2f} mm)"
        )
    if spec.kind == 'ysplit':
        if not 0.0 < spec.split_position < 1.0:
            raise PhantomError(f"split_position deve stare in (0, 1): {spec.split_position}")
        if not 0.0 < spec.branch_angle_deg < 180.0:
            raise PhantomError(f"Angolo di biforcazione non valido: {spec.branch_angle_deg}")


def _grid(spec: PhantomSpec, branches: List[_Branch]) -> Tuple[Tuple[int, int, int], np.ndarray]:
    """Dimensioni e origine della griglia; (0, 0, 0) mm cade sempre su un centro voxel."""
    spacing = np.asarray(spec.spacing)
    pts = np.vstack([b.points for b in branches])
    outer = spec.r0 + spec.wall_thickness
    lo = pts.min(axis=0) - outer
    hi = pts.max(axis=0) + outer

    if spec.dims is None:
        pad = max(PLANE_CLEARANCE_MM, 1.5 * outer) + 2.0 + 3 * spacing.max()
        lo_idx = np.floor((lo - pad) / spacing)
        hi_idx = np.ceil((hi + pad) / spacing)
        dims = tuple(int(n) for n in hi_idx - lo_idx + 1)
        return dims, lo_idx * spacing

    dims = tuple(int(n) for n in spec.dims)
    centre_idx = np.round((lo + hi) / 2.0 / spacing)
    origin = (centre_idx - (np.asarray(dims) - 1) // 2) * spacing
    first = origin + MIN_MARGIN_VOX * spacing
    last = origin + (np.asarray(dims) - 1 - MIN_MARGIN_VOX) * spacing
    if np.any(lo < first) or np.any(hi > last):
        raise PhantomError(
            f"Il tubo esce dalla griglia {dims}: ingombro [{lo.round(1).tolist()}, {hi.round(1).tolist()}] mm "
            f"con margine di {MIN_MARGIN_VOX} voxel"
        )
    return dims, origin


def _box_fraction(f: np.ndarray, grad: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """
    Frazione del voxel (box centrato) dentro il semispazio tangente f < 0.

    Con normale n e distanza d = f / |grad f|, n . x sul box è somma di tre
    uniformi di larghezza |n_i| spacing_i: la frazione è la loro CDF cubica
    a tratti valutata in W/2 - d.
    """
    norm = np.linalg.norm(grad, axis=1)
    flat = norm == 0
    norm[flat] = 1.0
    n = grad / norm[:, None]
    n[flat] = (1.0, 0.0, 0.0)
    d = f / norm
    w = np.maximum(np.abs(n) * spacing, MIN_WIDTH_FRACTION * spacing.max())
    x = 0.5 * w.sum(axis=1) - d
    total = np.zeros(len(f))
    for corner in itertools.product((0.0, 1.0), repeat=3):
        sign = -1.0 if sum(corner) % 2 else 1.0
        total += sign * np.maximum(x - w @ np.asarray(corner), 0.0) ** 3
    return np.clip(total / (6.0 * np.prod(w, axis=1)), 0.0, 1.0)


def _coverage(branches: List[_Branch], spec: PhantomSpec, centres: np.ndarray,
              spacing: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Frazioni di copertura (lume, lume+parete) per ogni centro voxel.

    Vicino ai bordi la superficie è approssimata dal suo piano tangente
    (gradiente del campo di distanza) e la frazione è esatta per quel piano.
    """
    f_lumen, f_outer = _fields(branches, spec, centres)
    lumen = (f_lumen < 0).astype(float)
    outer = (f_outer < 0).astype(float)

    half_diag = 0.5 * float(np.linalg.norm(spacing))
    edge = (np.abs(f_lumen) < half_diag) | (np.abs(f_outer) < half_diag)
    if np.any(edge):
        steps = np.eye(3) * GRADIENT_STEP_MM
        edge_idx = np.flatnonzero(edge)
        for chunk in np.array_split(edge_idx, max(1, len(edge_idx) // 20000)):
            pts = centres[chunk]
            g_lumen = np.empty((len(chunk), 3))
            g_outer = np.empty((len(chunk), 3))
            for axis in range(3):
                fl_hi, fo_hi = _fields(branches, spec, pts + steps[axis])
                fl_lo, fo_lo = _fields(branches, spec, pts - steps[axis])
                g_lumen[:, axis] = (fl_hi - fl_lo) / (2.0 * GRADIENT_STEP_MM)
                g_outer[:, axis] = (fo_hi - fo_lo) / (2.0 * GRADIENT_STEP_MM)
            lumen[chunk] = _box_fraction(f_lumen[chunk], g_lumen, spacing)
            outer[chunk] = _box_fraction(f_outer[chunk], g_outer, spacing)
    return lumen, outer


def _anchor_voxel(mask: np.ndarray, origin: np.ndarray, spacing: np.ndarray,
                  curve_pts: np.ndarray) -> Tuple[int, int, int]:
    """Primo voxel della maschera lungo i punti di curva dati."""
    for p in curve_pts:
        idx = np.round((p - origin) / spacing).astype(int)
        if np.all(idx >= 0) and np.all(idx < mask.shape) and mask[tuple(idx)]:
            return tuple(int(i) for i in idx)
    raise PhantomError("Nessun voxel della maschera lungo la linea centrale")


# =============================================================================
# GENERAZIONE
# =============================================================================

def make_phantom(spec: PhantomSpec) -> Tuple[CTVolume, BinaryMask, PhantomTruth]:
    """
    Costruisce volume CT, maschera del lume e verità analitica.

    Args:
        spec: Parametri del fantoccio

    Returns:
        (CTVolume, BinaryMask, PhantomTruth)
    """
    _validate(spec)
    spacing = np.asarray(spec.spacing, dtype=float)
    mask_branches = _branches(spec, 0.0)
    ct_branches = _branches(spec, CT_EXTENSION_MM)
    dims, origin = _grid(spec, mask_branches)

    grid = np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing='ij'), axis=-1).reshape(-1, 3)
    centres = origin + grid * spacing

    f_mask, _ = _fields(mask_branches, spec, centres)
    mask = (f_mask < 0).reshape(dims)

    lumen, outer = _coverage(ct_branches, spec, centres, spacing)
    hu = (spec.lumen_hu * lumen
          + spec.wall_hu * (outer - lumen)
          + spec.parenchyma_hu * (1.0 - outer)).reshape(dims)
    if spec.psf_sigma > 0:
        hu = gaussian_filter(hu, sigma=spec.psf_sigma / spacing, mode='nearest')
    if spec.noise_hu > 0:
        rng = np.random.default_rng(spec.seed)
        hu = hu + rng.normal(0.0, spec.noise_hu, size=hu.shape)
    ct_data = np.clip(np.round(hu), -32768, 32767).astype(np.int16)

    ct = CTVolume(ct_data, tuple(spacing), tuple(origin))
    mask_vol = BinaryMask(mask, tuple(spacing), tuple(origin))
    truth = _truth(spec, mask, origin, spacing)
    logger.info("Fantoccio %s generato: dims=%s, voxel lume=%d", spec.kind, dims, int(mask.sum()))
    return ct, mask_vol, truth


def _truth(spec: PhantomSpec, mask: np.ndarray, origin: np.ndarray, spacing: np.ndarray) -> PhantomTruth:
    curves = _curves(spec)
    airways = [[0]] if spec.kind != 'ysplit' else [[0, 1], [0, 2]]
    centrelines, arclengths = [], []
    for parts in airways:
        pts_list, s_list = [], []
        for j, part in enumerate(parts):
            curve, lo, hi, _, _ = curves[part]
            pts, s = _sample(curve, lo, hi)
            if j > 0:
                pts, s = pts[1:], s[1:]
            pts_list.append(pts)
            s_list.append(s)
        centrelines.append(np.vstack(pts_list))
        arclengths.append(np.concatenate(s_list))

    start = _anchor_voxel(mask, origin, spacing, centrelines[0])
    distal = [_anchor_voxel(mask, origin, spacing, c[::-1]) for c in centrelines]

    intervals, junction = [], None
    if spec.kind == 'ysplit':
        s_split = spec.split_position * spec.length
        r_split = float(spec.radius(s_split))
        half = np.radians(spec.branch_angle_deg) / 2.0
        end = min(spec.length, s_split + (r_split + spec.wall_thickness) / np.sin(half))
        intervals = [(s_split - r_split, float(end))]
        junction = np.array([0.0, 0.0, s_split])

    return PhantomTruth(
        kind=spec.kind, r0=spec.r0, taper=spec.taper, length=spec.length,
        centrelines=centrelines, arclengths=arclengths,
        start_voxel=start, distal_voxels=distal,
        bifurcation_intervals=intervals, junction_mm=junction,
    )


def save_phantom(prefix: Union[str, Path], ct: CTVolume, mask: BinaryMask, truth: PhantomTruth) -> List[Path]:
    """Scrive <prefix>_ct.mhd, <prefix>_mask.mhd, <prefix>_truth.json e <prefix>_distal.json."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = [
        prefix.with_name(prefix.name + '_ct.mhd'),
        prefix.with_name(prefix.name + '_mask.mhd'),
        prefix.with_name(prefix.name + '_truth.json'),
        prefix.with_name(prefix.name + '_distal.json'),
    ]
    save_volume(ct, paths[0])
    save_mask(mask, paths[1])
    paths[2].write_text(json.dumps(truth.to_dict(), indent=2))
    paths[3].write_text(json.dumps([list(v) for v in truth.distal_voxels]))
    return paths
