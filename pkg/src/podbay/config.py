"""Platform configuration with file and environment overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

ENV_PREFIX = "PODBAY_"


@dataclass
class PlatformConfig:
    """All tunables of the platform, each with a documented default.

    Precedence: explicit kwargs > environment variables > config file >
    defaults. Environment variables are ``PODBAY_<FIELD_UPPER>``.
    """

    data_dir: str = "./podbay-data"      # store, artifacts, uploads, logs
    api_port: int = 8420                 # control-plane REST port
    gateway_port: int = 8421             # public reverse-proxy port
    pod_port_min: int = 30000            # pod endpoint allocation range
    pod_port_max: int = 32767
    build_mode: str = "record"           # "record" (hermetic) or "execute"
    max_parallel_builds: int = field(default_factory=lambda: max(2, os.cpu_count() or 1))
    worker_max: int = 3                  # upper bound on per-pod workers
    default_workers: int = 3
    default_replicas: int = 1
    drain_timeout: float = 10.0          # seconds to wait for in-flight requests
    startup_timeout: float = 15.0        # seconds for a pod to become READY
    probe_interval: float = 1.0          # health-probe period, seconds
    request_timeout: float = 30.0        # gateway per-request timeout
    restart_budget: int = 3              # pod restarts before the deployment fails
    ready_successes: int = 2             # consecutive probe passes for READY
    crash_failures: int = 3              # consecutive probe failures for CRASHED

    _INT_FIELDS = {
        "api_port", "gateway_port", "pod_port_min", "pod_port_max",
        "max_parallel_builds", "worker_max", "default_workers",
        "default_replicas", "restart_budget", "ready_successes",
        "crash_failures",
    }
    _FLOAT_FIELDS = {
        "drain_timeout", "startup_timeout", "probe_interval",
        "request_timeout",
    }

    def __post_init__(self) -> None:
        if self.build_mode not in ("record", "execute"):
            raise ValueError(f"build_mode must be 'record' or 'execute', got {self.build_mode!r}")
        if not (0 < self.pod_port_min <= self.pod_port_max <= 65535):
            raise ValueError("invalid pod port range")
        if self.worker_max < 1:
            raise ValueError("worker_max must be >= 1")

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> "PlatformConfig":
        """Build a config from an optional YAML file, the environment, and overrides."""
        values: dict = {}
        if path is not None:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
            if not isinstance(doc, dict):
                raise ValueError(f"config file {path} must contain a mapping")
            known = {f.name for f in fields(cls)}
            unknown = set(doc) - known
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            values.update(doc)
        for f in fields(cls):
            env = os.environ.get(ENV_PREFIX + f.name.upper())
            if env is not None:
                values[f.name] = env
        values.update(overrides)
        for name in list(values):
            if name in cls._INT_FIELDS:
                values[name] = int(values[name])
            elif name in cls._FLOAT_FIELDS:
                values[name] = float(values[name])
        return cls(**values)

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir)
