"""Acceptance criteria, one test per criterion.

Each test records a PASS or FAIL line (printed in the terminal summary) before asserting, so the outcome of every
criterion is visible even when a run is interrupted by a failure elsewhere.
"""

import dataclasses
import json
import math
import time

import numpy as np
import pytest

from forestscan.augment import AugmentConfig, TreeMixConfig, augment, treemix
from forestscan.cli import EXIT_OK, main
from forestscan.clustering import mean_shift, mutual_reachability_mst, region_grow_shifted
from forestscan.core import ClassHistogram, SemanticClass, voxel_subsample
from forestscan.evaluation import DetectionCounts, detection_metrics
from forestscan.geometry import UnfittableError, convex_hull_3d, ransac_circle, welzl_sec
from forestscan.inventory import InventoryConfig, build_inventory
from forestscan.io import write_ply
from forestscan.pipeline import ClusterConfig, cluster_cloud
from forestscan.sampling import class_balanced_seed_sampler, region_weighted_sampler
from forestscan.synthetic import generate_plot

from oracles import (
    MonteCarloVolume,
    mutual_reachability_matrix,
    prim_mst,
    random_ball,
    ransac_max_consensus,
    sec_bruteforce,
    union_find_components,
)
from published_counts import PER_PLOT, STRATA, TOLERANCE_PP


def _sets(candidates):
    return {frozenset(c.indices.tolist()) for c in candidates}


def _best_iou_per_instance(reference, predicted):
    """IoU of every reference instance with the predicted instance sharing most of its points."""
    out = {}
    for t in np.unique(reference[reference >= 0]):
        members = reference == t
        ids, counts = np.unique(predicted[members], return_counts=True)
        best = ids[np.argmax(counts)]
        if best < 0:
            out[int(t)] = 0.0
            continue
        inter = np.sum(members & (predicted == best))
        out[int(t)] = inter / np.sum(members | (predicted == best))
    return out


# ---------------------------------------------------------------- metric reproduction


def test_published_detection_metrics(acceptance_report):
    start = time.perf_counter()
    worst = 0.0
    for _, n, detected, tp, expected in PER_PLOT + STRATA:
        m = detection_metrics(DetectionCounts.from_detected(n, detected, tp))
        got = (100 * m.completeness, 100 * m.omission, 100 * m.commission, 100 * m.f_score)
        worst = max(worst, max(abs(g - e) for g, e in zip(got, expected)))
    elapsed = time.perf_counter() - start
    passed = worst <= TOLERANCE_PP + 1e-9 and elapsed < 1.0
    acceptance_report("metric reproduction", passed,
                      f"{len(PER_PLOT) + len(STRATA)} rows, worst deviation {worst:.3f} pp (tol {TOLERANCE_PP}), "
                      f"{elapsed * 1e3:.1f} ms (limit 1 s)")
    assert passed


# ---------------------------------------------------------------- geometry oracles


def _noisy_circle_instance(rng):
    n = int(rng.integers(3, 31))
    n_on = int(rng.integers(0, n + 1))
    center, radius = rng.uniform(-5, 5, 2), rng.uniform(0.05, 0.5)
    t = rng.uniform(0, 2 * math.pi, n_on)
    rr = radius + rng.normal(0, 0.01, n_on)
    on = np.column_stack([center[0] + rr * np.cos(t), center[1] + rr * np.sin(t)])
    off = center + rng.uniform(-2 * radius, 2 * radius, size=(n - n_on, 2))
    return np.vstack([on, off])


def test_geometry_oracles(acceptance_report):
    rng = np.random.default_rng(2024)
    mc = MonteCarloVolume(seed=0)
    start = time.perf_counter()

    sec_worst = 0.0
    for _ in range(1000):
        pts = rng.normal(size=(int(rng.integers(1, 40)), 2)) * rng.uniform(0.01, 100) + rng.uniform(-1e3, 1e3, 2)
        circle = welzl_sec(pts, seed=int(rng.integers(1 << 30)))
        _, r = sec_bruteforce(pts)
        sec_worst = max(sec_worst, abs(circle.radius - r) / max(r, 1e-300) if r > 0 else circle.radius)

    hull_worst = 0.0
    for _ in range(1000):
        pts = random_ball(rng, int(rng.integers(30, 300)), tuple(rng.uniform(0.5, 2.0, 3)))
        _, vol = convex_hull_3d(pts)
        ref = mc(pts)
        hull_worst = max(hull_worst, abs(vol - ref) / ref)

    ransac_mismatch = 0
    for _ in range(1000):
        pts = _noisy_circle_instance(rng)
        oracle = ransac_max_consensus(pts, 0.02)
        try:
            got = ransac_circle(pts, 0.02).consensus
        except UnfittableError:
            got = -1
        ransac_mismatch += got != oracle
    elapsed = time.perf_counter() - start

    passed = sec_worst <= 1e-9 and hull_worst <= 0.01 and ransac_mismatch == 0 and elapsed < 60.0
    acceptance_report("geometry oracles", passed,
                      f"SEC worst rel {sec_worst:.1e} (tol 1e-9); hull vs MC worst rel {hull_worst:.4f} (tol 0.01); "
                      f"RANSAC consensus mismatches {ransac_mismatch}/1000; {elapsed:.1f} s (limit 60 s)")
    assert passed


# ---------------------------------------------------------------- clustering oracles


def test_clustering_oracles(acceptance_report):
    rng = np.random.default_rng(7)

    mst_mismatch = 0
    for i in range(50):
        n = int(rng.integers(5, 101))
        if i % 5 == 4:
            # dyadic lattice: equal distances are bit-identical in any summation order, so ties are exact
            pts = np.round(rng.uniform(size=(n, 3)) * 4) / 4 * 2.0 ** int(rng.integers(-3, 4))
        else:
            pts = rng.uniform(size=(n, 3)) * rng.uniform(0.1, 10)
        k = int(rng.integers(2, min(n, 6) + 1))
        got = mutual_reachability_mst(pts, k)
        expected = prim_mst(mutual_reachability_matrix(pts, k))
        same_edges = {(int(a), int(b)) for a, b, _ in got} == {(a, b) for a, b, _ in expected}
        same_weights = np.allclose(sorted(w for *_, w in got), sorted(w for *_, w in expected), rtol=0, atol=1e-12)
        mst_mismatch += not (same_edges and same_weights)

    sigma = 0.05
    ms_mismatch = 0
    ms_runs = 0
    for trial in range(25):
        for k in (1, 2, 3, 5):
            # centers on scaled unit vectors: every pair sits exactly 10 sigma apart
            centers = np.eye(5)[:k] * 10 * sigma / math.sqrt(2)
            x = np.vstack([rng.normal(c, sigma, size=(60, 5)) for c in centers])
            got = _sets(mean_shift(x, 5 * sigma))
            ms_mismatch += got != {frozenset(range(60 * j, 60 * (j + 1))) for j in range(k)}
            ms_runs += 1

    rg_mismatch = 0
    for _ in range(100):
        n = int(rng.integers(2, 2000))
        side = (n / rng.uniform(2, 40)) ** (1 / 3)
        pts = rng.uniform(0, side, size=(n, 3))
        offsets = rng.normal(0, 0.1, size=(n, 3))
        threshold = float(rng.uniform(0.2, 1.0))
        got = _sets(region_grow_shifted(pts, offsets, threshold, 1))
        rg_mismatch += got != union_find_components(pts + offsets, threshold)

    passed = mst_mismatch == 0 and ms_mismatch == 0 and rg_mismatch == 0
    acceptance_report("clustering oracles", passed,
                      f"MST vs Prim mismatches {mst_mismatch}/50; mean shift k in (1,2,3,5) mismatches "
                      f"{ms_mismatch}/{ms_runs}; region growing vs union-find mismatches {rg_mismatch}/100")
    assert passed


# ---------------------------------------------------------------- block merging


def test_block_merge_round_trip(acceptance_report):
    plot = generate_plot(n_trees=20, seed=31, crown_spacing=0.5)
    offsets = plot.perfect_offsets()
    xy = plot.cloud.xyz[plot.cloud.tree_mask, :2]
    spacing = float((xy.max(axis=0) - xy.min(axis=0)).max() / 2)
    origin = tuple(xy.min(axis=0) + spacing / 2)
    config = ClusterConfig(block_spacing=spacing, block_radius=0.8 * spacing, block_origin=origin)
    n_blocks = len(config.layout().blocks(xy))

    whole = cluster_cloud(plot.cloud, offsets, config=ClusterConfig(use_blocks=False))
    blocked = cluster_cloud(plot.cloud, offsets, config=config)
    ious = _best_iou_per_instance(whole.instance, blocked.instance)
    worst = min(ious.values())
    passed = n_blocks == 4 and len(ious) == 20 and worst >= 0.99
    acceptance_report("block merge round trip", passed,
                      f"{n_blocks} blocks, {len(ious)} trees, worst per-tree IoU {worst:.4f} (tol 0.99)")
    assert passed


# ---------------------------------------------------------------- end-to-end inventory


def test_end_to_end_inventory(acceptance_report):
    plot = generate_plot(n_trees=20, seed=0, stem_noise=0.005)
    start = time.perf_counter()
    inv = build_inventory(plot.cloud)
    elapsed = time.perf_counter() - start

    by_id = {r.tree_id: r for r in inv.trees}
    truth = plot.trees
    height_rmse = math.sqrt(np.mean([(by_id[t.tree_id].height - t.height) ** 2 for t in truth]))
    crown_rmse = math.sqrt(np.mean([(by_id[t.tree_id].crown_diameter - t.crown_diameter) ** 2 for t in truth]))
    vol_err = max(
        max(abs(by_id[t.tree_id].crown_volume_all - t.crown_volume_all) / t.crown_volume_all,
            abs(by_id[t.tree_id].crown_volume_live - t.crown_volume_live) / t.crown_volume_live)
        for t in truth
    )
    dbh_trees = [t for t in truth if t.slice_points >= 50]
    dbh_err = max(abs(by_id[t.tree_id].dbh - t.dbh_cm) / t.dbh_cm for t in dbh_trees)
    density_err = abs(inv.stand_density - plot.stand_density) / plot.stand_density

    passed = (len(inv.trees) == 20 and height_rmse <= 0.2 and crown_rmse <= 0.2 and vol_err <= 0.05
              and dbh_err <= 0.05 and density_err <= 1e-12 and elapsed < 30.0)
    acceptance_report("end-to-end inventory", passed,
                      f"height RMSE {height_rmse:.3f} m, crown diameter RMSE {crown_rmse:.3f} m (tol 0.2); "
                      f"worst crown volume error {100 * vol_err:.2f}% (tol 5%); worst DBH error {100 * dbh_err:.2f}% "
                      f"over {len(dbh_trees)} trees with >= 50 slice points (tol 5%); density rel error "
                      f"{density_err:.1e}; {elapsed:.1f} s (limit 30 s)")
    assert passed


# ---------------------------------------------------------------- invariance and determinism


def _scaled_config(config: InventoryConfig, s: float) -> InventoryConfig:
    """The configuration expressed in units ``s`` times smaller, so every length setting scales with the data."""

    def hdb(params):
        return dataclasses.replace(params, cluster_selection_epsilon=params.cluster_selection_epsilon * s)

    return dataclasses.replace(
        config,
        dtm_cell=config.dtm_cell * s,
        breast_height=config.breast_height * s,
        slice_half_width=config.slice_half_width * s,
        slice_step=config.slice_step * s,
        ransac_tolerance=config.ransac_tolerance * s,
        tree_hdbscan=hdb(config.tree_hdbscan),
        stem_hdbscan=hdb(config.stem_hdbscan),
    )


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def _compare(base, moved, transform, length_scale):
    """Worst relative deviation of ``moved`` from ``base`` mapped through ``transform``."""
    worst = 0.0
    assert len(base.trees) == len(moved.trees)
    for a, b in zip(base.trees, moved.trees):
        for name, power in (("height", 1), ("crown_diameter", 1), ("dbh", 1),
                            ("crown_volume_all", 3), ("crown_volume_live", 3)):
            va, vb = getattr(a, name), getattr(b, name)
            assert (va is None) == (vb is None)
            if va is not None:
                worst = max(worst, _rel(vb, va * length_scale ** power))
        expected = np.asarray(transform(np.array([a.location])))[0]
        worst = max(worst, float(np.linalg.norm(np.asarray(b.location) - expected) / max(np.linalg.norm(expected), 1)))
    worst = max(worst, _rel(moved.stand_density, base.stand_density / length_scale ** 2))
    return worst


def _stochastic_ops_identical():
    """Run every seeded stochastic operation twice; return the names whose outputs differ."""
    plot = generate_plot(n_trees=3, seed=4)
    cloud = plot.cloud
    rng = np.random.default_rng(0)
    circle_pts = np.vstack([rng.normal(0, 0.01, (80, 2)) + [[0.3, 0]], rng.uniform(-1, 1, (40, 2))])
    hist = {r: ClassHistogram(tuple(int(v) for v in rng.integers(1, 500, 5))) for r in range(6)}

    def run_all():
        aug, kept = augment(cloud.xyz, AugmentConfig(seed=11))
        mixed = treemix(cloud, cloud, TreeMixConfig(seed=12))
        fit = ransac_circle(circle_pts, 0.02, 300, seed=13, exhaustive_limit=0)
        sec = welzl_sec(circle_pts, seed=14)
        again = generate_plot(n_trees=2, seed=15)
        return {
            "augment": aug.tobytes() + kept.tobytes(),
            "treemix": mixed.cloud.xyz.tobytes() + mixed.cloud.instance.tobytes() + repr(mixed.insertions).encode(),
            "seed_sampler": class_balanced_seed_sampler(cloud, None, 1000, seed=16).tobytes(),
            "region_sampler": repr(region_weighted_sampler(hist, seed=17).draw(200)).encode(),
            "ransac_circle": repr(fit.circle).encode() + fit.inliers.tobytes(),
            "welzl_sec": repr(sec).encode(),
            "generate_plot": again.cloud.xyz.tobytes() + again.cloud.instance.tobytes(),
            "embeddings": plot.embeddings(0.1, seed=18).tobytes(),
        }

    first, second = run_all(), run_all()
    return [name for name in first if first[name] != second[name]], len(first)


def test_invariance_and_determinism(acceptance_report):
    rng = np.random.default_rng(99)
    base_config = InventoryConfig()
    worst = {"translation": 0.0, "rotation": 0.0, "scaling": 0.0}
    not_idempotent = 0
    for i in range(100):
        # flat ground: a nearest-neighbour terrain raster on an axis-aligned grid is not rotation invariant on a slope
        plot = generate_plot(n_trees=1, seed=1000 + i, slope=(0.0, 0.0), crown_spacing=1.0, ground_density=1.0,
                             low_vegetation=20, stem_noise=0.005)
        cloud = plot.cloud
        base = build_inventory(cloud, base_config)

        d = rng.uniform(-1000, 1000, 3)
        moved = build_inventory(cloud.replace(xyz=cloud.xyz + d), base_config)
        worst["translation"] = max(worst["translation"], _compare(base, moved, lambda p: p + d[:2], 1.0))

        theta = rng.uniform(0, 2 * math.pi)
        rot = np.array([[math.cos(theta), -math.sin(theta), 0], [math.sin(theta), math.cos(theta), 0], [0, 0, 1]])
        moved = build_inventory(cloud.replace(xyz=cloud.xyz @ rot.T + d), base_config)
        worst["rotation"] = max(worst["rotation"], _compare(base, moved, lambda p: p @ rot[:2, :2].T + d[:2], 1.0))

        s = rng.uniform(0.5, 3.0)
        moved = build_inventory(cloud.replace(xyz=cloud.xyz * s), _scaled_config(base_config, s))
        worst["scaling"] = max(worst["scaling"], _compare(base, moved, lambda p: p * s, s))

        edge = rng.uniform(0.05, 0.5)
        once, _ = voxel_subsample(cloud, edge)
        twice, _ = voxel_subsample(once, edge)
        not_idempotent += once.xyz.tobytes() != twice.xyz.tobytes()

    differing, n_ops = _stochastic_ops_identical()
    passed = max(worst.values()) <= 1e-9 and not_idempotent == 0 and not differing
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance_report("invariance suite", passed,
                      f"100 plots, worst relative error {detail} (tol 1e-9); voxel subsampling non-idempotent "
                      f"{not_idempotent}/100; seeded operations differing between runs {differing or 'none'} "
                      f"of {n_ops}")
    assert passed


# ---------------------------------------------------------------- benchmark-scale results


def test_benchmark_scale_results_not_reproducible(acceptance_report):
    acceptance_report("benchmark-scale results", False,
                      "85.1% F-score and 73.5% mIoU need the trained network and the full benchmark data; "
                      "out of scope at desk scale, replaced by the oracle and invariance suites")
    pytest.xfail("benchmark-scale segmentation scores require the trained network")


def _oracle_detection_and_miou(ref_sem, ref_inst, pred_sem, pred_inst):
    """Dense IoU, greedy matching and confusion-matrix mIoU written out from their definitions."""
    ref_ids = sorted(set(ref_inst[ref_inst >= 0].tolist()))
    pred_ids = sorted(set(pred_inst[pred_inst >= 0].tolist()))
    pairs = []
    for r in ref_ids:
        for p in pred_ids:
            inter = np.sum((ref_inst == r) & (pred_inst == p))
            union = np.sum((ref_inst == r) | (pred_inst == p))
            if inter / union >= 0.5:
                pairs.append((-inter / union, r, p))
    used_r, used_p, tp = set(), set(), 0
    for _, r, p in sorted(pairs):
        if r not in used_r and p not in used_p:
            used_r.add(r)
            used_p.add(p)
            tp += 1
    f_score = 2 * tp / (len(ref_ids) + len(pred_ids))
    ious = []
    for c in range(1, 6):
        if np.any(ref_sem == c):
            ious.append(np.sum((ref_sem == c) & (pred_sem == c)) / np.sum((ref_sem == c) | (pred_sem == c)))
    return tp, len(ref_ids), len(pred_ids), f_score, float(np.mean(ious))


def test_evaluate_protocol_end_to_end(acceptance_report, tmp_path):
    plot = generate_plot(n_trees=8, seed=21)
    ref = plot.cloud
    rng = np.random.default_rng(5)
    inst = ref.instance.copy()
    inst[inst == 1] = 0  # merge
    inst[inst == 2] = -1  # miss
    tree3 = np.flatnonzero(inst == 3)
    inst[tree3[ref.xyz[tree3, 0] > np.median(ref.xyz[tree3, 0])]] = 9  # split
    inst[inst >= 0] += 50  # identifiers carry no meaning
    sem = ref.semantic.copy()
    flip = rng.random(len(sem)) < 0.05
    tree = ref.tree_mask
    sem[flip & tree] = rng.choice([SemanticClass.STEM, SemanticClass.LIVE_BRANCHES, SemanticClass.DEAD_BRANCHES],
                                  int(np.sum(flip & tree)))
    sem[flip & ~tree] = rng.choice([SemanticClass.LOW_VEGETATION, SemanticClass.GROUND], int(np.sum(flip & ~tree)))
    pred = ref.replace(semantic=sem, instance=inst)

    write_ply(ref, tmp_path / "reference.ply")
    write_ply(pred, tmp_path / "prediction.ply")
    code = main(["evaluate", str(tmp_path / "prediction.ply"), str(tmp_path / "reference.ply"),
                 "--output-dir", str(tmp_path / "out")])
    report = json.loads((tmp_path / "out" / "evaluation.json").read_text())
    tp, n, detected, f_score, miou = _oracle_detection_and_miou(ref.semantic, ref.instance, sem, inst)
    counts = report["detection"]["counts"]
    passed = (code == EXIT_OK and counts["TP"] == tp and counts["N"] == n and counts["TP"] + counts["FP"] == detected
              and abs(report["detection"]["metrics"]["f_score"] - f_score) <= 1e-12
              and abs(report["semantic"]["mean_iou"] - miou) <= 1e-12)
    acceptance_report("evaluate protocol end to end", passed,
                      f"TP {counts['TP']}/{counts['N']} (oracle {tp}/{n}), F {report['detection']['metrics']['f_score']:.4f} "
                      f"(oracle {f_score:.4f}), mIoU {report['semantic']['mean_iou']:.4f} (oracle {miou:.4f})")
    assert passed
