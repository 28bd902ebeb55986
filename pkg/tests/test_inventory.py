import math

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from forestscan.core import LabeledPointCloud, SemanticClass
from forestscan.inventory import (
    DtmRaster,
    HdbscanParams,
    InventoryConfig,
    InventoryError,
    build_inventory,
    compute_dtm,
    crown_diameter,
    crown_volumes,
    dbh_and_location,
    stand_density,
    tree_height,
)
from forestscan.synthetic import generate_plot

from oracles import MonteCarloVolume, random_ball, sec_bruteforce

G, LOW, STEM, LIVE, DEAD = (SemanticClass.GROUND, SemanticClass.LOW_VEGETATION, SemanticClass.STEM,
                            SemanticClass.LIVE_BRANCHES, SemanticClass.DEAD_BRANCHES)


def _ground(z, extent=10.0, step=0.5, slope=(0.0, 0.0)):
    s = np.arange(0.0, extent + 1e-9, step)
    gx, gy = np.meshgrid(s, s)
    xy = np.column_stack([gx.ravel(), gy.ravel()])
    return np.column_stack([xy, z + slope[0] * xy[:, 0] + slope[1] * xy[:, 1]])


def _flat_dtm(z):
    return compute_dtm(LabeledPointCloud(_ground(z), np.full(441, G)))


def _conifer(center, ground_z, top_z, radius=1.5, spacing=0.2):
    """Stem line plus a dense cone surface ending at ``top_z``."""
    stem_z = np.arange(ground_z, ground_z + 0.5 * (top_z - ground_z), 0.1)
    stem = np.column_stack([np.full(len(stem_z), center[0]), np.full(len(stem_z), center[1]), stem_z])
    base = ground_z + 0.5 * (top_z - ground_z)
    crown = []
    for z in np.arange(base, top_z, spacing):
        r = radius * (top_z - z) / (top_z - base)
        n = max(int(2 * math.pi * r / spacing), 1)
        t = np.arange(n) * 2 * math.pi / n
        crown.append(np.column_stack([center[0] + r * np.cos(t), center[1] + r * np.sin(t), np.full(n, z)]))
    crown.append([[center[0], center[1], top_z]])
    crown = np.concatenate(crown)
    return np.vstack([stem, crown]), np.concatenate([np.full(len(stem), STEM), np.full(len(crown), LIVE)])


# ---------------------------------------------------------------- terrain


def test_dtm_flat_ground():
    dtm = _flat_dtm(5.0)
    assert dtm.cell == 0.5 and dtm.coverage_fraction > 0.9
    assert np.all(dtm.heights[dtm.covered] == 5.0)


def test_dtm_sloped_plane_bound():
    slope = (0.3, -0.2)
    pts = _ground(100.0, 20.0, 0.37, slope)
    dtm = compute_dtm(LabeledPointCloud(pts, np.full(len(pts), G)), 0.5)
    nodes = dtm.grid.node_coordinates()
    truth = (100.0 + slope[0] * nodes[:, 0] + slope[1] * nodes[:, 1]).reshape(dtm.shape)
    rmse = math.sqrt(np.mean((dtm.heights - truth)[dtm.covered] ** 2))
    assert rmse <= 0.5 * math.hypot(*slope)


def test_dtm_needs_ground():
    with pytest.raises(InventoryError):
        compute_dtm(LabeledPointCloud(np.zeros((3, 3)), [LOW, LOW, LOW]))


def test_height_at_nearest_covered_outside():
    dtm = _flat_dtm(2.0)
    assert dtm.height_at(-50.0, -50.0) == 2.0
    assert dtm.height_at(5.1, 4.9) == 2.0


# ---------------------------------------------------------------- stand density


def _density_cloud(corners, n_trees):
    xyz = np.column_stack([corners, np.zeros(len(corners))])
    instance = np.arange(len(corners)) % n_trees
    return LabeledPointCloud(xyz, np.full(len(corners), STEM), instance)


def test_stand_density_one_hectare():
    rng = np.random.default_rng(0)
    inside = rng.uniform(0, 100, size=(21, 2))
    corners = np.vstack([[[0, 0], [100, 0], [100, 100], [0, 100]], inside])
    density, area = stand_density(_density_cloud(corners, 25))
    assert area == pytest.approx(1e4) and density == pytest.approx(25.0)


def test_stand_density_single_tree():
    density, area = stand_density(_density_cloud(np.array([[0, 0], [10, 0], [10, 10], [0, 10]]), 1))
    assert area == pytest.approx(100.0) and density == pytest.approx(100.0)


def test_stand_density_matches_hull_formula():
    plot = generate_plot(n_trees=7, seed=3)
    density, area = stand_density(plot.cloud)
    tree_xy = plot.cloud.xyz[plot.cloud.instance >= 0, :2]
    assert area == pytest.approx(ConvexHull(tree_xy).volume, rel=1e-12)
    assert density * area / 1e4 == pytest.approx(7, rel=1e-12)


def test_stand_density_degenerate():
    cloud = LabeledPointCloud(np.array([[0, 0, 0], [1, 1, 0], [2, 2, 0]], float), [STEM] * 3, [0, 0, 1])
    with pytest.raises(InventoryError):
        stand_density(cloud)
    with pytest.raises(InventoryError):
        stand_density(LabeledPointCloud(np.zeros((3, 3)), [G] * 3))


# ---------------------------------------------------------------- height


def test_tree_height_and_outlier():
    dtm = _flat_dtm(0.5)
    pts, _ = _conifer((5.0, 5.0), 0.5, 10.0)
    assert tree_height(pts, dtm, (5.0, 5.0)) == pytest.approx(9.5, abs=1e-12)
    with_outlier = np.vstack([pts, [[5.0, 5.0, 30.0]]])
    assert tree_height(with_outlier, dtm, (5.0, 5.0)) == pytest.approx(9.5, abs=1e-12)


# ---------------------------------------------------------------- crown


def test_crown_diameter_cases():
    t = np.linspace(0, 2 * math.pi, 50, endpoint=False)
    ring = np.column_stack([1.5 * np.cos(t), 1.5 * np.sin(t), np.full(50, 7.0)])
    assert crown_diameter(ring) == pytest.approx(3.0, abs=1e-12)
    assert crown_diameter([[1.0, 2.0, 3.0]]) == 0.0
    assert crown_diameter(np.zeros((0, 3))) is None


def test_crown_diameter_matches_bruteforce():
    rng = np.random.default_rng(4)
    for _ in range(20):
        pts = rng.normal(size=(15, 3))
        _, r = sec_bruteforce(pts[:, :2])
        assert crown_diameter(pts) == pytest.approx(2 * r, rel=1e-9)


def test_crown_volumes_cube():
    cube = np.array([[x, y, z] for x in (0, 2) for y in (0, 2) for z in (0, 2)], dtype=float)
    vol = crown_volumes(cube, np.full(8, LIVE))
    assert vol.all == pytest.approx(8.0) and vol.live == pytest.approx(8.0)
    dead_face = np.where(cube[:, 2] == 0, DEAD, LIVE)
    vol = crown_volumes(cube, dead_face)
    assert vol.all == pytest.approx(8.0) and vol.live == 0.0 and vol.live_degenerate
    assert vol.live <= vol.all


def test_crown_volumes_match_monte_carlo():
    rng = np.random.default_rng(5)
    mc = MonteCarloVolume(seed=6)
    for _ in range(5):
        pts = random_ball(rng, 400, (rng.uniform(1, 3), rng.uniform(1, 3), rng.uniform(2, 5)))
        vol = crown_volumes(pts, np.full(len(pts), LIVE), HdbscanParams(20, 10, 10.0))
        truth = mc(pts)
        assert abs(vol.all - truth) / truth <= 0.01


# ---------------------------------------------------------------- stem


def _cylinder(center, r, z0, z1, n, rng=None, sigma=0.0):
    rng = rng or np.random.default_rng(0)
    t = rng.uniform(0, 2 * math.pi, n)
    rr = r + (rng.normal(0, sigma, n) if sigma else 0.0)
    return np.column_stack([center[0] + rr * np.cos(t), center[1] + rr * np.sin(t), rng.uniform(z0, z1, n)])


def test_dbh_exact_cylinder():
    dtm = _flat_dtm(0.0)
    stem = _cylinder((4.0, 6.0), 0.10, 0.8, 1.8, 200)
    fit = dbh_and_location(stem, np.full(200, STEM), dtm)
    assert fit.dbh == pytest.approx(20.0, abs=1e-6)
    assert fit.location == pytest.approx((4.0, 6.0), abs=1e-6)
    assert not fit.fallback


def test_dbh_fallback_without_stem():
    dtm = _flat_dtm(0.0)
    pts = np.array([[1.0, 1.0, 5.0], [3.0, 1.0, 6.0], [2.0, 4.0, 7.0]])
    fit = dbh_and_location(pts, np.full(3, LIVE), dtm)
    assert fit.dbh is None and fit.fallback
    assert fit.location == pytest.approx((2.0, 2.0))


def test_dbh_widens_slice():
    dtm = _flat_dtm(0.0)
    # stem points only well above breast height
    stem = _cylinder((5.0, 5.0), 0.2, 2.5, 3.0, 40)
    fit = dbh_and_location(stem, np.full(40, STEM), dtm)
    assert not fit.fallback and fit.half_width > 1.0
    assert fit.dbh == pytest.approx(40.0, abs=1e-6)


def test_dbh_noisy_cylinder_with_outliers():
    rng = np.random.default_rng(7)
    dtm = _flat_dtm(0.0)
    stem = _cylinder((5.0, 5.0), 0.15, 0.9, 1.7, 160, rng, 0.005)
    twigs = np.column_stack([rng.uniform(4.7, 5.3, (40, 2)), rng.uniform(0.9, 1.7, 40)])
    twigs = twigs[np.abs(np.hypot(twigs[:, 0] - 5, twigs[:, 1] - 5) - 0.15) > 0.05]
    pts = np.vstack([stem, twigs])
    fit = dbh_and_location(pts, np.full(len(pts), STEM), dtm)
    assert abs(fit.dbh - 30.0) / 30.0 <= 0.05


# ---------------------------------------------------------------- plot level


def test_three_tree_plot_matches_generator():
    plot = generate_plot(n_trees=3, seed=1)
    inv = build_inventory(plot.cloud)
    assert len(inv.trees) == 3
    for rec, truth in zip(inv.trees, plot.trees):
        assert rec.height == pytest.approx(truth.height, abs=0.2)
        assert rec.crown_diameter == pytest.approx(truth.crown_diameter, abs=0.2)
        assert rec.dbh == pytest.approx(truth.dbh_cm, rel=0.05)
        assert rec.location == pytest.approx(truth.location, abs=0.02)
        assert rec.crown_volume_live <= rec.crown_volume_all
    assert inv.stand_density * inv.hull_area / 1e4 == pytest.approx(3, rel=1e-12)


def test_single_instance_density_by_definition():
    plot = generate_plot(n_trees=1, seed=2)
    inv = build_inventory(plot.cloud)
    assert inv.stand_density == pytest.approx(1e4 / inv.hull_area, rel=1e-12)


def test_instance_permutation_invariance():
    plot = generate_plot(n_trees=4, seed=8)
    inv = build_inventory(plot.cloud)
    mapping = np.array([2, 0, 3, 1])
    inst = plot.cloud.instance.copy()
    tree = inst >= 0
    inst[tree] = mapping[inst[tree]]
    renamed = build_inventory(plot.cloud.replace(instance=inst))
    by_id = {r.tree_id: r for r in renamed.trees}
    for rec in inv.trees:
        other = by_id[int(mapping[rec.tree_id])]
        assert other.height == rec.height and other.dbh == rec.dbh and other.location == rec.location
        assert other.crown_volume_all == rec.crown_volume_all and other.crown_diameter == rec.crown_diameter


def test_translation_invariance():
    plot = generate_plot(n_trees=2, seed=9)
    inv = build_inventory(plot.cloud)
    moved = build_inventory(plot.cloud.replace(xyz=plot.cloud.xyz + [1000.0, -250.0, 40.0]))
    for a, b in zip(inv.trees, moved.trees):
        assert b.height == pytest.approx(a.height, rel=1e-9)
        assert b.crown_volume_all == pytest.approx(a.crown_volume_all, rel=1e-9)
        assert b.dbh == pytest.approx(a.dbh, rel=1e-9)
        assert b.location == pytest.approx((a.location[0] + 1000.0, a.location[1] - 250.0), abs=1e-6)


def test_config_round_trip_and_validation():
    cfg = InventoryConfig(dtm_cell=1.0, stem_hdbscan=HdbscanParams(4, 3, 0.2))
    assert InventoryConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        InventoryConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        InventoryConfig(dtm_cell=0.0)
    with pytest.raises(ValueError):
        HdbscanParams(1)


def test_dtm_raster_validates():
    with pytest.raises(ValueError):
        DtmRaster((0, 0), 0.5, np.full((2, 2), np.nan), np.ones((2, 2), bool))
