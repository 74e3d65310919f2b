import json

import numpy as np
import pytest

from skeleton import (
    AirwayPath, SkeletonError, _drop_redundant_diagonals, _prune_spurs, _voxel_graph,
    extract_paths, find_trachea_start, load_paths, load_points, save_paths, thin_to_centreline
)
from volio import BinaryMask


def _stacked_disks(radii, size=32, offset=0):
    data = np.zeros((size, size, offset + len(radii) + 2), dtype=bool)
    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing='ij')
    c = size // 2
    for k, r in enumerate(radii):
        data[:, :, offset + k] = (i - c) ** 2 + (j - c) ** 2 <= r ** 2
    return BinaryMask(data)


def test_trachea_start_at_first_plateau():
    radii = [2, 3, 4, 5, 6, 7, 7, 7, 7, 7]
    m = _stacked_disks(radii, offset=3)
    assert find_trachea_start(m) == (16, 16, 8)


def test_trachea_start_errors():
    with pytest.raises(SkeletonError, match="vuota"):
        find_trachea_start(BinaryMask(np.zeros((8, 8, 8), dtype=bool)))
    growing = _stacked_disks([2, 3, 4, 5, 6])
    data = growing.data.copy()[:, :, :5]
    with pytest.raises(SkeletonError):
        find_trachea_start(BinaryMask(data))


def test_spur_removed_and_diagonals_dropped():
    line = [(x, 0, 0) for x in range(11)]
    spur = [(5, y, 0) for y in (1, 2, 3)]
    G = _voxel_graph(np.array(line + spur))
    _drop_redundant_diagonals(G)
    assert not G.has_edge((4, 0, 0), (5, 1, 0))
    removed = _prune_spurs(G, [(0, 0, 0), (10, 0, 0)])
    assert removed == 3
    assert sorted(G.nodes()) == line
    assert all(G.degree(v) <= 2 for v in G.nodes())


def test_straight_tube_single_path_on_axis(straight_phantom):
    _, mask, truth = straight_phantom
    tree = thin_to_centreline(mask, [truth.start_voxel] + truth.distal_voxels)
    assert tree.branch_voxels() == []
    assert tree.carina == truth.start_voxel

    (path,) = extract_paths(tree)
    assert path.id == 'airway_0'
    assert path.voxels[0] == truth.start_voxel
    assert path.voxels[-1] == truth.distal_voxels[0]
    steps = np.abs(np.diff(path.as_array(), axis=0))
    assert steps.max() == 1
    assert all(mask.data[v] for v in path.voxels)
    xy = mask.index_to_mm(path.as_array())[:, :2]
    assert np.hypot(xy[:, 0], xy[:, 1]).max() <= max(mask.spacing[:2]) + 1e-9


def test_ysplit_two_paths_from_carina(ysplit_phantom, ysplit_spec):
    _, mask, truth = ysplit_phantom
    tree = thin_to_centreline(mask, [truth.start_voxel] + truth.distal_voxels)
    paths = extract_paths(tree)
    assert [p.id for p in paths] == ['airway_0', 'airway_1']
    assert paths[0].voxels[0] == paths[1].voxels[0] == tree.carina
    assert [p.voxels[-1] for p in paths] == truth.distal_voxels
    assert tree.degree(tree.carina) >= 3

    carina_mm = mask.index_to_mm(tree.carina)
    junction_distance = np.linalg.norm(carina_mm - truth.junction_mm)
    assert junction_distance <= 2 * max(mask.spacing) + ysplit_spec.r0
    # le due vie divergono subito dopo la carena
    assert paths[0].voxels[-1][0] != paths[1].voxels[-1][0]


def test_anchor_outside_mask(straight_phantom):
    _, mask, truth = straight_phantom
    with pytest.raises(SkeletonError, match="fuori dalla maschera"):
        thin_to_centreline(mask, [truth.start_voxel, (0, 0, 0)])


def test_paths_json_round_trip(tmp_path):
    paths = [AirwayPath('airway_0', [(1, 2, 3), (1, 2, 4)]), AirwayPath('airway_1', [(1, 2, 3), (2, 2, 4)])]
    save_paths(paths, tmp_path / 'paths.json')
    back = load_paths(tmp_path / 'paths.json')
    assert [(p.id, p.voxels) for p in back] == [(p.id, p.voxels) for p in paths]


def test_load_points_rejects_bad_entries(tmp_path):
    good = tmp_path / 'good.json'
    good.write_text(json.dumps([[1, 2, 3], [4, 5, 6]]))
    assert load_points(good) == [(1, 2, 3), (4, 5, 6)]
    bad = tmp_path / 'bad.json'
    bad.write_text(json.dumps([[1, 2]]))
    with pytest.raises(SkeletonError):
        load_points(bad)
