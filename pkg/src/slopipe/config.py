"""Deployment configuration: one JSON document, with profiles and pipeline by path.

Relative paths resolve against the directory of the config file. A path of
the form ``builtin:NAME`` names a file bundled in ``slopipe/data``.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from importlib import resources

from .bench import SLOTarget, WorkloadSpec
from .elasticity import Thresholds
from .errors import ConfigError
from .executor import read_profiles
from .planner import DEFAULT_LAYOUTS

MODES = ("simulate", "live")


@dataclass
class ClusterConfig:
    nodes: int = 4
    gpu_gb: int = 24
    standby_nodes: int = 0  # extra full-GPU nodes kept out of the plan for resizing
    layouts: list[list[int]] = field(default_factory=lambda: [list(l) for l in DEFAULT_LAYOUTS])


@dataclass
class ElasticityConfig:
    enabled: bool = False
    preloading: bool = True
    thresholds: Thresholds = field(default_factory=Thresholds)
    stages: list[str] = field(default_factory=list)  # empty: every stage
    tick_ms: float = 100.0


@dataclass
class ResizeStep:
    """Scripted pool growth: ``add`` standby instances join ``stage`` at a query id."""

    at_query: int
    stage: str
    add: int


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 7070


@dataclass
class DeploymentConfig:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    profiles: str = "builtin:retrieval_profiles.csv"
    pipeline: str = "builtin:retrieval_pipeline.json"
    placement: str = "auto"  # auto | monolithic | path to a placement JSON
    standby: dict[str, int] = field(default_factory=dict)  # stage -> instances on standby nodes
    elasticity: ElasticityConfig = field(default_factory=ElasticityConfig)
    resize: list[ResizeStep] = field(default_factory=list)
    workload: WorkloadSpec | None = None
    slos: list[SLOTarget] = field(default_factory=lambda: [SLOTarget(200), SLOTarget(500)])
    mode: str = "simulate"
    seed: int = 0
    jitter: float = 0.05
    load_delay_ms: float = 3000.0
    serve: ServeConfig = field(default_factory=ServeConfig)
    base_dir: str = field(default=".", compare=False)

    # -- paths
    def resolve(self, path: str) -> str:
        if path.startswith("builtin:"):
            return str(resources.files("slopipe").joinpath("data", path[len("builtin:"):]))
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def load_profiles(self):
        try:
            return read_profiles(self.resolve(self.profiles))
        except (OSError, KeyError, ValueError) as e:
            raise ConfigError(f"profiles {self.profiles}: {e}") from e

    def load_pipeline(self):
        from .runtime import PipelineSpec
        try:
            return PipelineSpec.load(self.resolve(self.pipeline))
        except (OSError, KeyError, ValueError, TypeError) as e:
            raise ConfigError(f"pipeline {self.pipeline}: {e}") from e

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cluster.nodes < 1:
            raise ConfigError("cluster.nodes must be >= 1")
        for label, path in (("profiles", self.profiles), ("pipeline", self.pipeline)):
            if not os.path.exists(self.resolve(path)):
                raise ConfigError(f"{label} file not found: {path}")
        if self.placement not in ("auto", "monolithic") and not os.path.exists(self.resolve(self.placement)):
            raise ConfigError(f"placement file not found: {self.placement}")
        if sum(self.standby.values()) > self.cluster.standby_nodes:
            raise ConfigError("standby asks for more instances than cluster.standby_nodes")
        if self.mode == "live" and self.serve.port <= 0:
            raise ConfigError("live mode needs serve.port")
        self.load_profiles()
        self.load_pipeline().validate()

    # -- JSON
    def to_json(self) -> dict:
        d = {
            "cluster": asdict(self.cluster),
            "profiles": self.profiles,
            "pipeline": self.pipeline,
            "placement": self.placement,
            "standby": self.standby,
            "elasticity": {
                "enabled": self.elasticity.enabled,
                "preloading": self.elasticity.preloading,
                "thresholds": asdict(self.elasticity.thresholds),
                "stages": self.elasticity.stages,
                "tick_ms": self.elasticity.tick_ms,
            },
            "resize": [asdict(r) for r in self.resize],
            "slos": [asdict(s) for s in self.slos],
            "mode": self.mode,
            "seed": self.seed,
            "jitter": self.jitter,
            "load_delay_ms": self.load_delay_ms,
            "serve": asdict(self.serve),
        }
        if self.workload is not None:
            d["workload"] = self.workload.to_json()
        return d

    @classmethod
    def from_json(cls, doc: dict, base_dir: str = ".") -> "DeploymentConfig":
        try:
            el = doc.get("elasticity", {})
            cfg = cls(
                cluster=ClusterConfig(**doc.get("cluster", {})),
                profiles=doc.get("profiles", cls.profiles),
                pipeline=doc.get("pipeline", cls.pipeline),
                placement=doc.get("placement", "auto"),
                standby={k: int(v) for k, v in doc.get("standby", {}).items()},
                elasticity=ElasticityConfig(
                    enabled=bool(el.get("enabled", False)),
                    preloading=bool(el.get("preloading", True)),
                    thresholds=Thresholds(**el.get("thresholds", {})),
                    stages=list(el.get("stages", [])),
                    tick_ms=float(el.get("tick_ms", 100.0)),
                ),
                resize=[ResizeStep(**r) for r in doc.get("resize", [])],
                workload=WorkloadSpec.from_json(doc["workload"]) if "workload" in doc else None,
                slos=[SLOTarget(**s) for s in doc["slos"]] if "slos" in doc else [SLOTarget(200), SLOTarget(500)],
                mode=doc.get("mode", "simulate"),
                seed=int(doc.get("seed", 0)),
                jitter=float(doc.get("jitter", 0.05)),
                load_delay_ms=float(doc.get("load_delay_ms", 3000.0)),
                serve=ServeConfig(**doc.get("serve", {})),
                base_dir=base_dir,
            )
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"bad config: {e}") from e
        unknown = set(doc) - (set(cls.__dataclass_fields__) - {"base_dir"})
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cfg

    @classmethod
    def load(cls, path) -> "DeploymentConfig":
        try:
            with open(path) as f:
                doc = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        return cls.from_json(doc, os.path.dirname(os.path.abspath(path)))

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")
