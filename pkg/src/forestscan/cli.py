"""Command-line front end: ``forestscan <command> [options]``.

Every command writes its outputs plus ``run_manifest.json`` into ``--output-dir``. Exit codes are 0 on success,
2 for unusable inputs, 3 for configuration errors and 4 when a produced result violates an internal invariant.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .augment import augment, treemix
from .clustering import ScoreError
from .config import ConfigError, PipelineConfig
from .core import CloudValidationError, LabeledPointCloud, voxel_subsample
from .evaluation import evaluate_clouds
from .features import FEATURE_NAMES, eigenfeatures
from .inventory import InventoryError, build_inventory
from .io import (
    PlyError,
    ply_vertex_properties,
    read_field_dbh_csv,
    read_ply,
    write_esri_ascii,
    write_json,
    write_ply,
    write_tree_csv,
)
from .pipeline import AnnotationError, cluster_cloud

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_INVARIANT = 4


class InputError(Exception):
    """An input file is missing, unreadable or lacks what the command needs."""


class InvariantError(Exception):
    """A produced result breaks a structural invariant."""


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_cloud(path, require: Sequence[str] = ()) -> LabeledPointCloud:
    """Read a PLY file, first checking that the properties in ``require`` are declared.

    Raises:
        InputError: If the file is missing, malformed, invalid or lacks a required property.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    try:
        names = ply_vertex_properties(path)
        missing = [p for p in require if p not in names]
        if missing:
            raise InputError(f"{path}: missing vertex property {', '.join(repr(m) for m in missing)}")
        return read_ply(path)
    except (PlyError, CloudValidationError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _check_cloud(cloud: LabeledPointCloud) -> LabeledPointCloud:
    try:
        cloud.validate()
    except CloudValidationError as exc:
        raise InvariantError(str(exc)) from exc
    return cloud


class Run:
    """Collects inputs and outputs of one command and writes the manifest."""

    def __init__(self, command: str, args: argparse.Namespace, config: PipelineConfig):
        self.command = command
        self.config = config
        self.output_dir = Path(args.output_dir)
        self.validate_only = bool(args.validate_only)
        self.inputs: List[Dict[str, str]] = []
        self.outputs: List[str] = []
        self.extra: Dict = {}

    def add_input(self, path) -> None:
        self.inputs.append({"path": str(path), "sha256": sha256_file(path)})

    def output(self, name: str) -> Path:
        path = self.output_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return path

    def metadata_comments(self) -> List[str]:
        return [f"seed {self.config.seed}", f"config_sha256 {self.config.digest()}"]

    def manifest(self) -> Dict:
        return {
            "command": self.command,
            "seed": self.config.seed,
            "inputs": self.inputs,
            "config": self.config.to_dict(),
            "config_sha256": self.config.digest(),
            "versions": {
                "forestscan": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "outputs": {name: sha256_file(self.output_dir / name) for name in sorted(self.outputs)},
            **self.extra,
        }

    def finish(self) -> None:
        if self.validate_only:
            return
        self.output_dir.mkdir(parents=True, exist_ok=True)
        write_json(self.manifest(), self.output_dir / "run_manifest.json")


def _write_inventory(cloud: LabeledPointCloud, run: Run, prefix: str) -> Dict:
    inv = build_inventory(cloud, run.config.inventory)
    write_tree_csv(inv.trees, run.output(prefix + "trees.csv"))
    dtm = inv.dtm
    write_esri_ascii(dtm.heights, dtm.covered, dtm.origin, dtm.cell, run.output(prefix + "dtm.asc"))
    summary = {**inv.summary(), "seed": run.config.seed}
    write_json(summary, run.output(prefix + "summary.json"))
    return summary


def cmd_inventory(args: argparse.Namespace, run: Run) -> None:
    clouds = []
    for path in args.inputs:
        clouds.append(load_cloud(path, ("semantic", "instance")))
        run.add_input(path)
    if run.validate_only:
        return
    stems = [Path(p).stem for p in args.inputs]
    if len(set(stems)) != len(stems):
        raise InputError("input plots must have distinct file names")
    prefixes = [""] if len(clouds) == 1 else [f"{s}/" for s in stems]
    jobs = list(zip(clouds, prefixes))
    if run.config.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=run.config.threads) as pool:
            list(pool.map(lambda job: _write_inventory(job[0], run, job[1]), jobs))
    else:
        for cloud, prefix in jobs:
            _write_inventory(cloud, run, prefix)


def _load_annotations(path, n_tree: int):
    try:
        with np.load(path) as data:
            offsets = data["offsets"] if "offsets" in data.files else None
            embeddings = data["embeddings"] if "embeddings" in data.files else None
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: cannot read annotations ({exc})") from exc
    if offsets is None and embeddings is None:
        raise InputError(f"{path}: needs an 'offsets' or an 'embeddings' array")
    for name, arr in (("offsets", offsets), ("embeddings", embeddings)):
        if arr is not None and len(arr) != n_tree:
            raise AnnotationError(f"{name} have {len(arr)} rows but the cloud has {n_tree} tree points")
    return offsets, embeddings


def cmd_cluster(args: argparse.Namespace, run: Run) -> None:
    cloud = load_cloud(args.input, ("semantic",))
    run.add_input(args.input)
    offsets, embeddings = _load_annotations(args.annotations, int(cloud.tree_mask.sum()))
    run.add_input(args.annotations)
    scores = None
    if args.scores:
        run.add_input(args.scores)
        try:
            scores = json.loads(Path(args.scores).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{args.scores}: {exc}") from exc
    if run.validate_only:
        return
    out = _check_cloud(cluster_cloud(cloud, offsets, embeddings, run.config.cluster, scores))
    run.extra["instances"] = int(len(np.unique(out.instance[out.instance >= 0])))
    write_ply(out, run.output(Path(args.input).stem + "_instances.ply"), comments=run.metadata_comments())


def cmd_evaluate(args: argparse.Namespace, run: Run) -> None:
    pred = load_cloud(args.predicted, ("semantic", "instance"))
    run.add_input(args.predicted)
    ref = load_cloud(args.reference, ("semantic", "instance"))
    run.add_input(args.reference)
    if len(pred) != len(ref):
        raise InputError(f"predicted cloud has {len(pred)} points but the reference has {len(ref)}")
    field_dbh = None
    if args.field_dbh:
        try:
            field_dbh = read_field_dbh_csv(args.field_dbh)
        except (OSError, ValueError) as exc:
            raise InputError(f"{args.field_dbh}: {exc}") from exc
        run.add_input(args.field_dbh)
    if run.validate_only:
        return
    try:
        report = evaluate_clouds(pred, ref, args.plot_id or Path(args.reference).stem, run.config.inventory,
                                 run.config.evaluation["iou_min"], field_dbh)
    except ValueError as exc:
        if isinstance(exc, InventoryError):
            raise
        raise InputError(str(exc)) from exc
    write_json({**report.to_dict(), "seed": run.config.seed}, run.output("evaluation.json"))


def cmd_subsample(args: argparse.Namespace, run: Run) -> None:
    cloud = load_cloud(args.input)
    run.add_input(args.input)
    edge = run.config.voxel_edge if args.voxel_edge is None else args.voxel_edge
    if not edge > 0:
        raise ConfigError("voxel edge must be positive")
    if run.validate_only:
        return
    sub, kept = voxel_subsample(cloud, edge)
    _check_cloud(sub)
    run.extra.update({"voxel_edge": edge, "points_in": len(cloud), "points_out": len(sub)})
    write_ply(sub, run.output(Path(args.input).stem + "_subsampled.ply"), comments=run.metadata_comments())


def cmd_augment(args: argparse.Namespace, run: Run) -> None:
    cloud = load_cloud(args.input)
    run.add_input(args.input)
    if run.validate_only:
        return
    if len(cloud) == 0:
        raise InputError(f"{args.input}: empty cloud")
    points, kept = augment(cloud.xyz, run.config.augment)
    out = _check_cloud(cloud.subset(kept).replace(xyz=points))
    write_ply(out, run.output(Path(args.input).stem + "_augmented.ply"), comments=run.metadata_comments())


def cmd_treemix(args: argparse.Namespace, run: Run) -> None:
    target = load_cloud(args.target, ("semantic", "instance"))
    run.add_input(args.target)
    source = load_cloud(args.source, ("semantic", "instance"))
    run.add_input(args.source)
    if run.validate_only:
        return
    result = treemix(target, source, run.config.treemix)
    _check_cloud(result.cloud)
    run.extra["insertions"] = [vars(ins).copy() for ins in result.insertions]
    write_ply(result.cloud, run.output(Path(args.target).stem + "_treemix.ply"), comments=run.metadata_comments())


def cmd_features(args: argparse.Namespace, run: Run) -> None:
    cloud = load_cloud(args.input)
    run.add_input(args.input)
    neighborhood = dict(run.config.features)
    if args.k is not None:
        neighborhood = {"k": args.k}
    elif args.radius is not None:
        neighborhood = {"radius": args.radius}
    if "k" in neighborhood and neighborhood["k"] < 3:
        raise ConfigError("k must be at least 3")
    if "radius" in neighborhood and not neighborhood["radius"] > 0:
        raise ConfigError("radius must be positive")
    if run.validate_only:
        return
    feats = eigenfeatures(cloud, neighborhood)
    run.extra["neighborhood"] = neighborhood
    lines = [",".join(FEATURE_NAMES)]
    lines += [",".join(repr(float(v)) for v in row) for row in feats]
    run.output(Path(args.input).stem + "_features.csv").write_text("\n".join(lines) + "\n")


COMMANDS: Dict[str, Callable[[argparse.Namespace, Run], None]] = {
    "inventory": cmd_inventory,
    "cluster": cmd_cluster,
    "evaluate": cmd_evaluate,
    "subsample": cmd_subsample,
    "augment": cmd_augment,
    "treemix": cmd_treemix,
    "features": cmd_features,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="seed for every stochastic step (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads (overrides the config)")
    common.add_argument("--output-dir", default=".", help="directory receiving outputs and the run manifest")
    common.add_argument("--validate-only", action="store_true", help="check inputs and config, write nothing")

    parser = argparse.ArgumentParser(prog="forestscan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"forestscan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inventory", parents=[common], help="tree table, DTM and plot summary")
    p.add_argument("inputs", nargs="+", help="labeled plot PLY files")

    p = sub.add_parser("cluster", parents=[common], help="instance labels from offsets and embeddings")
    p.add_argument("input", help="semantically labeled PLY")
    p.add_argument("--annotations", required=True,
                   help="NPZ with 'offsets' (M, 3) and/or 'embeddings' (M, D) parallel to the tree points")
    p.add_argument("--scores", help="JSON list of external candidate scores")

    p = sub.add_parser("evaluate", parents=[common], help="compare a prediction against a reference labeling")
    p.add_argument("predicted")
    p.add_argument("reference")
    p.add_argument("--field-dbh", help="CSV with columns tree_id,dbh_cm keyed by reference tree ID")
    p.add_argument("--plot-id")

    p = sub.add_parser("subsample", parents=[common], help="voxel grid subsampling")
    p.add_argument("input")
    p.add_argument("--voxel-edge", type=float)

    p = sub.add_parser("augment", parents=[common], help="geometric augmentation of a sample")
    p.add_argument("input")

    p = sub.add_parser("treemix", parents=[common], help="transplant source trees into a target sample")
    p.add_argument("target")
    p.add_argument("source")

    p = sub.add_parser("features", parents=[common], help="per-point eigenvalue features as CSV")
    p.add_argument("input")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--k", type=int)
    group.add_argument("--radius", type=float)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = PipelineConfig.load(args.config, seed=args.seed, threads=args.threads)
        run = Run(args.command, args, config)
        if args.config:
            run.add_input(Path(args.config))
        COMMANDS[args.command](args, run)
        run.finish()
    except ConfigError as exc:
        print(f"forestscan: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, AnnotationError, ScoreError, InventoryError) as exc:
        print(f"forestscan: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantError as exc:
        print(f"forestscan: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    if args.validate_only:
        print("forestscan: inputs and configuration are valid")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
