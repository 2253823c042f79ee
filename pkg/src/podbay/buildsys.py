"""Build pipeline: recipe generation, artifact snapshots, registry, cleanup.

An "image" here is an immutable directory snapshot: the package's handler
files under ``functions/``, the HTTP binding table (``bindings.json``),
and the recipe (``recipe.json``). Pods launch straight from the snapshot
with a read-only view. In the default ``record`` build mode install steps
are syntax-checked and logged only, keeping builds hermetic; ``execute``
mode actually installs pip packages into a per-artifact directory.
"""

from __future__ import annotations

import hashlib
import io
import json
import queue
import shutil
import subprocess
import sys
import threading
import time
import zipfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

from enum import Enum

from .manifest import FUNCTIONS_DIR, Manifest, PKG_NAME_RE
from .store import new_id


class BuildError(Exception):
    pass


class JobPhase(str, Enum):
    QUEUED = "QUEUED"
    VALIDATING = "VALIDATING"
    GENERATING = "GENERATING"
    BUILDING = "BUILDING"
    FAILED = "FAILED"
    SUCCEEDED = "SUCCEEDED"


@dataclass(frozen=True)
class BindingEntry:
    http_method: str
    route: str                    # path segment on the pod server
    handler_file: str
    handler_function: str
    params: tuple[tuple[str, str], ...]   # ordered (name, type name)
    file_params: tuple[str, ...]
    returns: str                  # "string" | "file"


@dataclass(frozen=True)
class BuildRecipe:
    base_environment: str
    install_steps: tuple[tuple[str, tuple[str, ...]], ...]  # (manager, packages)
    staged_files: tuple[tuple[str, str], ...]               # (archive path, dest path)
    bindings: tuple[BindingEntry, ...]
    sidecar_command: str

    @property
    def recipe_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class BuildJob:
    job_id: str
    deployment_id: str
    phase: JobPhase = JobPhase.QUEUED
    log_lines: list[str] = field(default_factory=list)
    started_at: float | None = None
    finished_at: float | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def log(self, line: str) -> None:
        with self._lock:
            self.log_lines.append(line)

    def log_text(self) -> str:
        with self._lock:
            return "\n".join(self.log_lines)

    def finish(self, phase: JobPhase) -> None:
        with self._lock:
            self.phase = phase
            self.finished_at = time.time()


@dataclass
class ImageArtifact:
    artifact_id: str
    owner: str
    package_name: str
    version: str
    recipe_hash: str
    snapshot_path: str
    created_at: float = field(default_factory=time.time)


_MANAGER_ORDER = ("apt-get", "pip", "npm")


def generate_recipe(manifest: Manifest) -> BuildRecipe:
    """Derive the deterministic build plan from a validated manifest.

    Equal manifests yield equal ``recipe_hash``.
    """
    steps = []
    for manager, names in (("apt-get", manifest.packages.apt_get),
                           ("pip", manifest.packages.pip),
                           ("npm", manifest.packages.npm)):
        if names:
            steps.append((manager, tuple(names)))
    staged = tuple((f"{FUNCTIONS_DIR}/{f.file_name}", f"{FUNCTIONS_DIR}/{f.file_name}")
                   for f in manifest.files)
    bindings = tuple(
        BindingEntry(
            http_method=fn.http_method.value,
            route=fn.name,
            handler_file=f.file_name,
            handler_function=fn.name,
            params=tuple((n, t.value) for n, t in fn.params),
            file_params=fn.file_params,
            returns=fn.returns.value,
        )
        for f, fn in manifest.functions()
    )
    routes = [b.route for b in bindings]
    if len(routes) != len(set(routes)):
        raise BuildError(f"duplicate route segments in {manifest.name}: {routes}")
    return BuildRecipe(
        base_environment=manifest.environment,
        install_steps=tuple(steps),
        staged_files=staged,
        bindings=bindings,
        sidecar_command=manifest.command,
    )


def snapshot_digest(snapshot_path: str | Path) -> str:
    """Content digest over every file in a snapshot directory."""
    h = hashlib.sha256()
    root = Path(snapshot_path)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class ArtifactRegistry:
    """Executes builds into snapshot directories and tracks the results."""

    def __init__(self, root: str | Path, build_mode: str = "record",
                 allow_system_installs: bool = False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.build_mode = build_mode
        self.allow_system_installs = allow_system_installs
        self._lock = threading.RLock()
        self._index_path = self.root / "artifacts.json"
        self._artifacts: dict[str, ImageArtifact] = {}
        if self._index_path.exists():
            for doc in json.loads(self._index_path.read_text(encoding="utf-8")):
                self._artifacts[doc["artifact_id"]] = ImageArtifact(**doc)

    def _flush(self) -> None:
        docs = [asdict(a) for a in self._artifacts.values()]
        tmp = self._index_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(docs, indent=1), encoding="utf-8")
        tmp.replace(self._index_path)

    def get(self, artifact_id: str) -> ImageArtifact:
        with self._lock:
            if artifact_id not in self._artifacts:
                raise BuildError(f"unknown artifact {artifact_id}")
            return self._artifacts[artifact_id]

    def all(self) -> list[ImageArtifact]:
        with self._lock:
            return list(self._artifacts.values())

    def execute_build(self, recipe: BuildRecipe, archive: bytes, owner: str,
                      package_name: str, version: str,
                      job: BuildJob | None = None) -> ImageArtifact:
        """Materialize a snapshot from a recipe plus the validated archive."""
        job = job or BuildJob(job_id=new_id("job"), deployment_id="")
        job.started_at = job.started_at or time.time()
        artifact_id = new_id("art")
        snapshot = self.root / artifact_id
        try:
            snapshot.mkdir(parents=True)
            zf = zipfile.ZipFile(io.BytesIO(archive))
            names = set(zf.namelist())
            for src, dest in recipe.staged_files:
                if src not in names:
                    raise BuildError(f"staged file {src} missing from archive")
                target = snapshot / dest
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(zf.read(src))
                job.log(f"STAGE {src} -> {dest}")
            self._run_install_steps(recipe, snapshot, job)
            bindings_doc = [asdict(b) for b in recipe.bindings]
            (snapshot / "bindings.json").write_text(
                json.dumps(bindings_doc, indent=1), encoding="utf-8")
            (snapshot / "recipe.json").write_text(
                json.dumps(json.loads(recipe.to_json()) | {"recipe_hash": recipe.recipe_hash},
                           indent=1), encoding="utf-8")
            job.log(f"SNAPSHOT {artifact_id} complete")
        except BuildError as e:
            job.log(f"FAILED {e}")
            job.finish(JobPhase.FAILED)
            shutil.rmtree(snapshot, ignore_errors=True)
            raise
        except OSError as e:
            job.log(f"FAILED snapshot write: {e}")
            job.finish(JobPhase.FAILED)
            shutil.rmtree(snapshot, ignore_errors=True)
            raise BuildError(f"snapshot write failure: {e}") from e

        artifact = ImageArtifact(
            artifact_id=artifact_id, owner=owner, package_name=package_name,
            version=version, recipe_hash=recipe.recipe_hash,
            snapshot_path=str(snapshot))
        with self._lock:
            self._artifacts[artifact_id] = artifact
            self._flush()
        job.finish(JobPhase.SUCCEEDED)
        return artifact

    def _run_install_steps(self, recipe: BuildRecipe, snapshot: Path,
                           job: BuildJob) -> None:
        for manager, names in recipe.install_steps:
            for name in names:
                if not PKG_NAME_RE.match(name):
                    raise BuildError(f"invalid package name for {manager}: {name!r}")
            if self.build_mode == "record":
                job.log(f"RECORD {manager} install {' '.join(names)}")
                continue
            if manager == "pip":
                target = snapshot / "site-packages"
                cmd = [sys.executable, "-m", "pip", "install", "--target",
                       str(target), "--no-deps", *names]
                job.log(f"RUN {' '.join(cmd)}")
                proc = subprocess.run(cmd, capture_output=True, text=True)
                for line in (proc.stdout + proc.stderr).splitlines():
                    job.log(f"  {line}")
                if proc.returncode != 0:
                    raise BuildError(f"pip install failed for {' '.join(names)}")
            elif self.allow_system_installs:
                cmd = {"apt-get": ["apt-get", "install", "-y"],
                       "npm": ["npm", "install", "--prefix", str(snapshot / "node_modules")]}[manager]
                job.log(f"RUN {' '.join(cmd + list(names))}")
                proc = subprocess.run(cmd + list(names), capture_output=True, text=True)
                if proc.returncode != 0:
                    raise BuildError(f"{manager} install failed for {' '.join(names)}")
            else:
                job.log(f"SKIPPED {manager} install {' '.join(names)} (host opt-in required)")

    def remove(self, artifact_id: str) -> None:
        with self._lock:
            artifact = self._artifacts.pop(artifact_id, None)
            if artifact is None:
                return
            self._flush()
        shutil.rmtree(artifact.snapshot_path, ignore_errors=True)

    def cleanup_artifacts(self, referenced_ids: set[str],
                          keep_newest: int = 2) -> list[str]:
        """Remove unreferenced artifacts beyond the newest ``keep_newest`` per
        (owner, package, version). Referenced artifacts are never removed."""
        removed: list[str] = []
        with self._lock:
            by_key: dict[tuple, list[ImageArtifact]] = {}
            for a in self._artifacts.values():
                by_key.setdefault((a.owner, a.package_name, a.version), []).append(a)
            for group in by_key.values():
                group.sort(key=lambda a: a.created_at, reverse=True)
                for a in group[keep_newest:]:
                    if a.artifact_id not in referenced_ids:
                        removed.append(a.artifact_id)
        for artifact_id in removed:
            self.remove(artifact_id)
        return removed


class BuildQueue:
    """FIFO build admission with a fixed concurrency ceiling."""

    def __init__(self, max_parallel: int, probe=None):
        if max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        self.max_parallel = max_parallel
        self._queue: queue.Queue = queue.Queue()
        self._probe = probe  # called with the running-build count, for tests
        self._running = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._threads = [threading.Thread(target=self._worker, daemon=True,
                                          name=f"build-worker-{i}")
                         for i in range(max_parallel)]
        for t in self._threads:
            t.start()

    def submit(self, fn) -> None:
        self._queue.put(fn)

    def _worker(self) -> None:
        while not self._stop.is_set():
            try:
                fn = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            with self._lock:
                self._running += 1
                if self._probe:
                    self._probe(self._running)
            try:
                fn()
            except Exception:
                pass  # job-level failures are recorded on the job itself
            finally:
                with self._lock:
                    self._running -= 1
                self._queue.task_done()

    def join(self) -> None:
        self._queue.join()

    def shutdown(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2)
