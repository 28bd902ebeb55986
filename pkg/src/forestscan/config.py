"""Single JSON document holding every module's settings."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from .augment import AugmentConfig, TreeMixConfig
from .inventory import InventoryConfig
from .pipeline import ClusterConfig


class ConfigError(ValueError):
    """The configuration document is malformed or a value violates a module precondition."""


_SECTIONS = ("augment", "treemix", "cluster", "inventory")
_TOP_LEVEL = {"seed", "threads", "voxel_edge", "cylinder_radius", "features", "evaluation"} | set(_SECTIONS)


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


@dataclass(frozen=True)
class PipelineConfig:
    """All settings of the command-line pipeline.

    The top-level ``seed`` is applied to every seeded module section that does not set its own seed; the
    top-level ``threads`` likewise. Command-line flags override both.
    """

    seed: int = 0
    threads: int = 1
    voxel_edge: float = 0.2
    cylinder_radius: float = 8.0
    features: Dict[str, float] = field(default_factory=lambda: {"k": 10})
    evaluation: Dict[str, float] = field(default_factory=lambda: {"iou_min": 0.5})
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    treemix: TreeMixConfig = field(default_factory=TreeMixConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    inventory: InventoryConfig = field(default_factory=InventoryConfig)

    @classmethod
    def from_dict(cls, document: Mapping[str, Any], seed: Optional[int] = None,
                  threads: Optional[int] = None) -> "PipelineConfig":
        """Build and validate a configuration; ``seed`` and ``threads`` are command-line overrides.

        Raises:
            ConfigError: On unknown keys, wrong types or values outside a module's preconditions.
        """
        if not isinstance(document, Mapping):
            raise ConfigError("the configuration must be a JSON object")
        unknown = set(document) - _TOP_LEVEL
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            top_seed = int(document.get("seed", 0)) if seed is None else int(seed)
            top_threads = int(document.get("threads", 1)) if threads is None else int(threads)
            if top_threads < 1:
                raise ValueError("threads must be at least 1")
            if top_seed < 0:
                raise ValueError("seed must be non-negative")
            voxel_edge = float(document.get("voxel_edge", 0.2))
            if not voxel_edge > 0:
                raise ValueError("voxel_edge must be positive")
            radius = float(document.get("cylinder_radius", 8.0))
            if not radius > 0:
                raise ValueError("cylinder_radius must be positive")
            features = dict(document.get("features", {"k": 10}))
            if set(features) - {"k", "radius"} or len(features) != 1:
                raise ValueError("features must set exactly one of 'k' or 'radius'")
            if "k" in features and int(features["k"]) < 3:
                raise ValueError("features.k must be at least 3")
            if "radius" in features and not float(features["radius"]) > 0:
                raise ValueError("features.radius must be positive")
            evaluation = dict(document.get("evaluation", {"iou_min": 0.5}))
            if set(evaluation) - {"iou_min"}:
                raise ValueError(f"unknown evaluation settings {sorted(set(evaluation) - {'iou_min'})}")
            iou_min = float(evaluation.get("iou_min", 0.5))
            if not 0 < iou_min <= 1:
                raise ValueError("evaluation.iou_min must lie in (0, 1]")

            def section(name: str) -> Dict[str, Any]:
                value = document.get(name, {})
                if not isinstance(value, Mapping):
                    raise ValueError(f"section {name!r} must be an object")
                return dict(value)

            aug = section("augment")
            mix = section("treemix")
            clu = section("cluster")
            inv = section("inventory")
            for sec in (aug, mix):
                if seed is not None or "seed" not in sec:
                    sec["seed"] = top_seed
            if seed is not None or "ransac_seed" not in inv:
                inv["ransac_seed"] = top_seed
            for sec in (clu, inv):
                if threads is not None or "threads" not in sec:
                    sec["threads"] = top_threads
            return cls(
                seed=top_seed,
                threads=top_threads,
                voxel_edge=voxel_edge,
                cylinder_radius=radius,
                features={k: (int(v) if k == "k" else float(v)) for k, v in features.items()},
                evaluation={"iou_min": iou_min},
                augment=AugmentConfig.from_dict(aug),
                treemix=TreeMixConfig.from_dict(mix),
                cluster=ClusterConfig.from_dict(clu),
                inventory=InventoryConfig.from_dict(inv),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None, seed: Optional[int] = None,
             threads: Optional[int] = None) -> "PipelineConfig":
        """Read a JSON file (or use defaults without one) and apply command-line overrides."""
        document: Dict[str, Any] = {}
        if path is not None:
            try:
                document = json.loads(Path(path).read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"configuration {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(document, seed=seed, threads=threads)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()
