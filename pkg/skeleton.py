"""
Skeleton - Linea Centrale e Percorsi delle Vie Aeree
====================================================
Dalla maschera delle vie aeree e dai punti distali:

1. trova l'inizio della trachea (massimo della distanza per fetta)
2. assottiglia la maschera a una curva di spessore un voxel
3. modella la linea centrale come grafo (26-connettività) ed estrae
   con una ricerca in ampiezza un percorso ordinato carena -> distale
   per ogni punto distale; i rami spuri senza punto distale sono scartati

Uso:
    from skeleton import find_trachea_start, thin_to_centreline, extract_paths

    start = find_trachea_start(mask)
    tree = thin_to_centreline(mask, [start] + distal_points)
    paths = extract_paths(tree)
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Any, Optional, Tuple, Union

import networkx as nx
import numpy as np
from skimage.morphology import skeletonize

from volio import BinaryMask, edt_2d

logger = logging.getLogger(__name__)

Voxel = Tuple[int, int, int]


# =============================================================================
# CONFIGURAZIONE
# =============================================================================

# Offset "in avanti" della 26-connettività (ogni coppia di vicini contata una volta)
FORWARD_OFFSETS = np.array([
    (di, dj, dk)
    for di in (-1, 0, 1) for dj in (-1, 0, 1) for dk in (-1, 0, 1)
    if (di, dj, dk) > (0, 0, 0)
])

# Grado minimo di un voxel di biforcazione
BRANCH_DEGREE = 3

# Semi-lato iniziale del riquadro di ricerca per riagganciare un'ancora (voxel)
REATTACH_BOX = 8


class SkeletonError(ValueError):
    """Maschera o punti di ancoraggio non validi per l'estrazione della linea centrale."""


# =============================================================================
# TIPI
# =============================================================================

@dataclass
class CentrelineTree:
    """Linea centrale come grafo di voxel con inizio, carena e punti distali."""

    graph: nx.Graph
    start: Voxel
    carina: Voxel
    distal: List[Voxel]

    @property
    def voxels(self) -> List[Voxel]:
        return sorted(self.graph.nodes())

    def degree(self, v: Voxel) -> int:
        return int(self.graph.degree(v))

    def branch_voxels(self) -> List[Voxel]:
        return sorted(v for v, d in self.graph.degree() if d >= BRANCH_DEGREE)


@dataclass
class AirwayPath:
    """Percorso ordinato di voxel dalla carena a un punto distale."""

    id: str
    voxels: List[Voxel]

    def __len__(self) -> int:
        return len(self.voxels)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.voxels, dtype=int).reshape(-1, 3)


# =============================================================================
# FUNZIONI DI UTILITÀ
# =============================================================================

def _voxel(v: Any) -> Voxel:
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise SkeletonError(f"Voxel non valido: {v}")
    return t


def _voxel_graph(voxels: np.ndarray) -> nx.Graph:
    """
    Grafo a 26-connettività di un insieme di voxel.

    Nodi ed archi inseriti in ordine lessicografico; peso = lunghezza euclidea
    dell'offset (1, sqrt(2), sqrt(3)).
    """
    G = nx.Graph()
    voxels = np.asarray(voxels, dtype=int).reshape(-1, 3)
    if len(voxels) == 0:
        return G
    order = np.lexsort(voxels.T[::-1])
    voxels = voxels[order]
    G.add_nodes_from(map(tuple, voxels.tolist()))

    lo = voxels.min(axis=0) - 1
    shape = voxels.max(axis=0) - lo + 2
    lookup = np.full(tuple(shape), -1, dtype=np.int64)
    local = voxels - lo
    lookup[tuple(local.T)] = np.arange(len(voxels))

    edges = []
    for off in FORWARD_OFFSETS:
        nb = lookup[tuple((local + off).T)]
        src = np.flatnonzero(nb >= 0)
        weight = float(np.linalg.norm(off))
        edges.extend((int(a), int(b), weight) for a, b in zip(src, nb[src]))
    edges.sort()
    keys = [tuple(v) for v in voxels.tolist()]
    G.add_weighted_edges_from((keys[a], keys[b], w) for a, b, w in edges)
    return G


def _drop_redundant_diagonals(G: nx.Graph) -> None:
    """Rimuove l'arco u-v se un vicino comune w offre due archi strettamente più corti."""
    redundant = []
    for u, v, w_uv in G.edges(data='weight'):
        if w_uv <= 1.0:
            continue
        for w in nx.common_neighbors(G, u, v):
            if G[u][w]['weight'] < w_uv and G[w][v]['weight'] < w_uv:
                redundant.append((u, v))
                break
    G.remove_edges_from(redundant)


def _prune_spurs(G: nx.Graph, anchors: List[Voxel]) -> int:
    """Elimina iterativamente le estremità (grado <= 1) che non sono ancore."""
    keep = set(anchors)
    removed = 0
    leaves = [v for v, d in G.degree() if d <= 1 and v not in keep]
    while leaves:
        G.remove_nodes_from(leaves)
        removed += len(leaves)
        leaves = [v for v, d in G.degree() if d <= 1 and v not in keep]
    return removed


def _reattach(mask: np.ndarray, skeleton: np.ndarray, anchor: Voxel) -> List[Voxel]:
    """
    Percorso euclideo più breve, dentro la maschera, da un'ancora allo scheletro.

    La ricerca avviene in un riquadro attorno all'ancora che viene raddoppiato
    finché lo scheletro non è raggiungibile.
    """
    a = np.asarray(anchor)
    half = REATTACH_BOX
    while True:
        lo = np.maximum(a - half, 0)
        hi = np.minimum(a + half + 1, mask.shape)
        box = tuple(slice(int(l), int(h)) for l, h in zip(lo, hi))
        sub_mask = mask[box]
        sub_skel = skeleton[box] & sub_mask
        if sub_skel.any():
            G = _voxel_graph(np.argwhere(sub_mask) + lo)
            for v in map(tuple, (np.argwhere(sub_skel) + lo).tolist()):
                G.add_edge(v, 'skeleton', weight=0.0)
            try:
                path = nx.shortest_path(G, anchor, 'skeleton', weight='weight')
                return [p for p in path[:-1]]
            except nx.NetworkXNoPath:
                pass
        if np.all(lo == 0) and np.all(hi == mask.shape):
            raise SkeletonError(f"L'ancora {anchor} non è connessa allo scheletro")
        half *= 2


# =============================================================================
# INIZIO TRACHEA
# =============================================================================

def find_trachea_start(m: BinaryMask) -> Voxel:
    """
    Individua l'inizio della linea centrale sulla trachea.

    Dalla prima fetta assiale che contiene la maschera avanza finché il
    massimo della distanza sulla fetta successiva è maggiore; restituisce
    l'argmax della distanza sulla fetta raggiunta (a parità, l'indice
    lessicograficamente minore).
    """
    occupied = np.flatnonzero(m.data.any(axis=(0, 1)))
    if len(occupied) == 0:
        raise SkeletonError("Maschera vuota: impossibile trovare la trachea")

    nz = m.dims[2]
    i = int(occupied[0])
    d_cur = edt_2d(m, i)
    while True:
        if i + 1 >= nz:
            raise SkeletonError("Ricerca dell'inizio trachea arrivata all'ultima fetta")
        d_next = edt_2d(m, i + 1)
        if d_cur.max() >= d_next.max():
            break
        i += 1
        d_cur = d_next

    # argmax in ordine C = voxel lessicograficamente minore tra i massimi
    ii, jj = np.unravel_index(int(np.argmax(d_cur)), d_cur.shape)
    start = (int(ii), int(jj), i)
    logger.debug("Inizio trachea in %s (distanza massima %.2f voxel)", start, float(d_cur.max()))
    return start


# =============================================================================
# ASSOTTIGLIAMENTO
# =============================================================================

def thin_to_centreline(m: BinaryMask, anchors: List[Any]) -> CentrelineTree:
    """
    Assottiglia la maschera a una linea centrale di spessore un voxel.

    Args:
        m: Maschera delle vie aeree
        anchors: anchors[0] = inizio trachea, poi i punti distali (voxel)

    Returns:
        CentrelineTree con grafo potato, inizio, carena e punti distali
    """
    anchors = [_voxel(a) for a in anchors]
    if not anchors:
        raise SkeletonError("Serve almeno l'ancora di inizio trachea")
    for a in anchors:
        inside = all(0 <= a[d] < m.dims[d] for d in range(3)) and m.data[a]
        if not inside:
            raise SkeletonError(f"Ancora fuori dalla maschera: {a}")

    skeleton = skeletonize(m.data) > 0
    for a in anchors:
        if skeleton[a]:
            continue
        if not skeleton.any():
            skeleton[a] = True
            continue
        for v in _reattach(m.data, skeleton, a):
            skeleton[v] = True

    G = _voxel_graph(np.argwhere(skeleton))
    _drop_redundant_diagonals(G)
    removed = _prune_spurs(G, anchors)

    start = anchors[0]
    keep = nx.node_connected_component(G, start)
    dropped = [v for v in G.nodes() if v not in keep]
    G.remove_nodes_from(dropped)

    carina = start
    for v in nx.bfs_tree(G, start):
        if G.degree(v) >= BRANCH_DEGREE:
            carina = v
            break

    logger.info("Linea centrale: %d voxel (%d potati, %d scollegati), carena %s",
                G.number_of_nodes(), removed, len(dropped), carina)
    return CentrelineTree(graph=G, start=start, carina=carina, distal=anchors[1:])


# =============================================================================
# PERCORSI
# =============================================================================

def extract_paths(t: CentrelineTree) -> List[AirwayPath]:
    """
    Un percorso per punto distale: il cammino della ricerca in ampiezza
    dall'inizio trachea, troncato alla carena (la trachea è rimossa).
    """
    routes = nx.single_source_shortest_path(t.graph, t.start)
    paths = []
    for n, d in enumerate(t.distal):
        if d not in routes:
            raise SkeletonError(f"Punto distale {d} non raggiungibile dall'inizio trachea {t.start}")
        route = routes[d]
        if t.carina in route:
            route = route[route.index(t.carina):]
        else:
            logger.warning("Il percorso verso %s non passa per la carena %s: mantenuto intero", d, t.carina)
        paths.append(AirwayPath(id=f"airway_{n}", voxels=[tuple(v) for v in route]))
    return paths


def save_paths(paths: List[AirwayPath], path: Union[str, Path]) -> None:
    """Scrive i percorsi come JSON: [{id, voxels: [[i, j, k], ...]}, ...]."""
    payload = [{'id': p.id, 'voxels': [list(v) for v in p.voxels]} for p in paths]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload))


def load_paths(path: Union[str, Path]) -> List[AirwayPath]:
    try:
        payload = json.loads(Path(path).read_text())
        return [AirwayPath(id=str(p['id']), voxels=[_voxel(v) for v in p['voxels']]) for p in payload]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise SkeletonError(f"File percorsi non valido: {path} ({e})") from e


def load_points(path: Union[str, Path]) -> List[Voxel]:
    """Legge una lista JSON di voxel [[i, j, k], ...] (punti distali)."""
    try:
        return [_voxel(v) for v in json.loads(Path(path).read_text())]
    except (TypeError, json.JSONDecodeError) as e:
        raise SkeletonError(f"File punti non valido: {path} ({e})") from e
