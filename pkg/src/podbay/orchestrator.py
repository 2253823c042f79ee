"""Pod lifecycle over a pluggable executor: spawn, probe, scale, drain, reap.

Pods are processes launched from an artifact snapshot through the agent-host
argv contract. One supervisory monitor thread runs per deployment; scale and
teardown serialize against it through a per-deployment lock. Live pods are
recorded on disk so a restarted platform can terminate orphans.
"""

from __future__ import annotations

import json
import os
import re
import signal
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import httpx

from .buildsys import ImageArtifact
from .config import PlatformConfig
from .gateway import Gateway, RouteEntry, external_path
from .store import (DeploymentRecord, DocumentStore, NotFound, StatusPhase,
                    new_id)


class OrchestratorError(Exception):
    pass


class QuotaExceeded(OrchestratorError):
    pass


class SpawnError(OrchestratorError):
    pass


class PortExhausted(OrchestratorError):
    pass


class PodState(str, Enum):
    STARTING = "STARTING"
    READY = "READY"
    DRAINING = "DRAINING"
    TERMINATED = "TERMINATED"
    CRASHED = "CRASHED"


@dataclass(frozen=True)
class Namespace:
    namespace_id: str
    owner: str


def sanitize_namespace(owner: str) -> str:
    cleaned = re.sub(r"[^a-z0-9]+", "-", owner.lower()).strip("-")
    return f"user-{cleaned}"


@dataclass
class PodInstance:
    pod_id: str
    deployment_id: str
    port: int
    worker_count: int
    state: PodState = PodState.STARTING
    process: subprocess.Popen | None = None
    restarts: int = 0
    consecutive_ok: int = 0
    consecutive_fail: int = 0
    log_path: str = ""

    @property
    def endpoint(self) -> str:
        return f"127.0.0.1:{self.port}"


class PortAllocator:
    """Loopback port pool; a port stays reserved until released."""

    def __init__(self, port_min: int, port_max: int):
        self._min, self._max = port_min, port_max
        self._next = port_min
        self._reserved: set[int] = set()
        self._lock = threading.Lock()

    def allocate(self) -> int:
        with self._lock:
            span = self._max - self._min + 1
            for _ in range(span):
                port = self._next
                self._next = self._min + (self._next - self._min + 1) % span
                if port in self._reserved:
                    continue
                if self._bindable(port):
                    self._reserved.add(port)
                    return port
            raise PortExhausted(f"no free port in [{self._min}, {self._max}]")

    @staticmethod
    def _bindable(port: int) -> bool:
        with socket.socket() as s:
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                s.bind(("127.0.0.1", port))
                return True
            except OSError:
                return False

    def release(self, port: int) -> None:
        with self._lock:
            self._reserved.discard(port)

    def reserved(self) -> set[int]:
        with self._lock:
            return set(self._reserved)


class ProcessExecutor:
    """The shipped executor backend: plain OS processes."""

    def spawn(self, argv: list[str], cwd: str, log_file) -> subprocess.Popen:
        return subprocess.Popen(argv, cwd=cwd, stdout=log_file, stderr=log_file)

    def alive(self, process: subprocess.Popen) -> bool:
        return process is not None and process.poll() is None

    def terminate(self, process: subprocess.Popen, grace: float = 5.0) -> None:
        if process is None or process.poll() is not None:
            return
        process.terminate()
        try:
            process.wait(timeout=grace)
        except subprocess.TimeoutExpired:
            process.kill()
            process.wait(timeout=grace)


class Orchestrator:
    def __init__(self, store: DocumentStore, gateway: Gateway,
                 config: PlatformConfig, executor: ProcessExecutor | None = None):
        self.store = store
        self.gateway = gateway
        self.config = config
        self.executor = executor or ProcessExecutor()
        self.ports = PortAllocator(config.pod_port_min, config.pod_port_max)
        self.pods: dict[str, list[PodInstance]] = {}
        self._namespaces: dict[str, Namespace] = {}
        self._artifacts: dict[str, ImageArtifact] = {}   # per deployment
        self._locks: dict[str, threading.RLock] = {}
        self._closing: dict[str, threading.Event] = {}
        self._monitors: dict[str, threading.Thread] = {}
        self._global_lock = threading.Lock()
        self._log_dir = config.data_path / "logs"
        self._log_dir.mkdir(parents=True, exist_ok=True)
        self._pids_path = config.data_path / "pods.json"
        self._pids_lock = threading.Lock()

    # -- namespaces ---------------------------------------------------------

    def ensure_namespace(self, owner: str) -> Namespace:
        with self._global_lock:
            ns = self._namespaces.get(owner)
            if ns is None:
                ns = Namespace(namespace_id=sanitize_namespace(owner), owner=owner)
                self._namespaces[owner] = ns
            return ns

    # -- endpoints ----------------------------------------------------------

    def allocate_endpoint(self) -> str:
        return f"127.0.0.1:{self.ports.allocate()}"

    # -- pid registry (orphan reaping) --------------------------------------

    def _record_pid(self, pod: PodInstance) -> None:
        with self._pids_lock:
            doc = {}
            if self._pids_path.exists():
                doc = json.loads(self._pids_path.read_text())
            doc[pod.pod_id] = {"pid": pod.process.pid,
                               "deployment_id": pod.deployment_id,
                               "port": pod.port}
            self._pids_path.write_text(json.dumps(doc, indent=1))

    def _forget_pid(self, pod_id: str) -> None:
        with self._pids_lock:
            if not self._pids_path.exists():
                return
            doc = json.loads(self._pids_path.read_text())
            doc.pop(pod_id, None)
            self._pids_path.write_text(json.dumps(doc, indent=1))

    def reap_orphans(self) -> list[str]:
        """Terminate recorded pods whose deployment no longer exists/runs."""
        reaped = []
        with self._pids_lock:
            if not self._pids_path.exists():
                return reaped
            doc = json.loads(self._pids_path.read_text())
        for pod_id, info in list(doc.items()):
            dep_id = info["deployment_id"]
            live = any(p.pod_id == pod_id for p in self.pods.get(dep_id, []))
            if live:
                continue
            keep = False
            try:
                record = self.store.get("deployments", dep_id)
                keep = record.status not in (StatusPhase.DELETED, StatusPhase.FAILED)
            except NotFound:
                keep = False
            if not keep or not self._pid_alive(info["pid"]):
                if self._pid_alive(info["pid"]):
                    try:
                        os.kill(info["pid"], signal.SIGTERM)
                    except OSError:
                        pass
                    reaped.append(pod_id)
                self._forget_pid(pod_id)
        return reaped

    @staticmethod
    def _pid_alive(pid: int) -> bool:
        try:
            os.kill(pid, 0)
            return True
        except OSError:
            return False

    # -- deployment lifecycle -----------------------------------------------

    def _lock_for(self, deployment_id: str) -> threading.RLock:
        with self._global_lock:
            return self._locks.setdefault(deployment_id, threading.RLock())

    def create_deployment(self, artifact: ImageArtifact, replicas: int,
                          workers: int, owner: str,
                          deployment_id: str | None = None) -> DeploymentRecord:
        """Spawn pods from the artifact and expose the package's routes.

        The deployment record may pre-exist (pipeline use); otherwise one is
        created. RUNNING is reached once every pod is READY and the routes
        are registered.
        """
        if not (1 <= workers <= self.config.worker_max):
            raise OrchestratorError(
                f"workers must be in [1, {self.config.worker_max}]")
        allow, reason = self.store.check_quota(owner, replicas,
                                               new_deployment=deployment_id is None)
        if not allow:
            raise QuotaExceeded(reason)
        ns = self.ensure_namespace(owner)

        if deployment_id is None:
            deployment_id = new_id("dep")
            self.store.put_record("deployments", DeploymentRecord(
                deployment_id=deployment_id, owner=owner, namespace=ns.namespace_id,
                package_name=artifact.package_name, version=artifact.version,
                artifact_id=artifact.artifact_id, replicas_desired=replicas,
                worker_count=workers, status=StatusPhase.DEPLOYING))
        else:
            record = self.store.get("deployments", deployment_id)
            if record.status is not StatusPhase.DEPLOYING:
                self.store.transition_status(deployment_id, StatusPhase.DEPLOYING)
            self.store.update("deployments", deployment_id,
                              artifact_id=artifact.artifact_id,
                              replicas_desired=replicas, worker_count=workers)

        lock = self._lock_for(deployment_id)
        with lock:
            self._closing[deployment_id] = threading.Event()
            self._artifacts[deployment_id] = artifact
            bindings = self._load_bindings(artifact)
            pods: list[PodInstance] = []
            try:
                for _ in range(replicas):
                    pods.append(self._spawn_pod(deployment_id, artifact, workers))
                self._wait_ready(deployment_id, pods)
            except Exception:
                for pod in pods:
                    self._terminate_pod(pod)
                raise
            self.pods[deployment_id] = pods

            services = []
            for b in bindings:
                path = external_path(ns.namespace_id, artifact.package_name,
                                     artifact.version, b["route"])
                self.gateway.register_route(RouteEntry(
                    external_path=path, http_method=b["http_method"],
                    deployment_id=deployment_id,
                    backends=[p.endpoint for p in pods],
                    returns=b["returns"], backend_route=b["route"]))
                services.append((b["handler_function"], path))
            self.store.update("deployments", deployment_id, services=services)
            record = self.store.transition_status(deployment_id, StatusPhase.RUNNING)
            self._start_monitor(deployment_id)
            return record

    def _load_bindings(self, artifact: ImageArtifact) -> list[dict]:
        path = Path(artifact.snapshot_path) / "bindings.json"
        return json.loads(path.read_text(encoding="utf-8"))

    def _spawn_pod(self, deployment_id: str, artifact: ImageArtifact,
                   workers: int) -> PodInstance:
        if self._closing.get(deployment_id, threading.Event()).is_set():
            raise SpawnError("deployment is being torn down")
        port = self.ports.allocate()
        pod = PodInstance(pod_id=new_id("pod"), deployment_id=deployment_id,
                          port=port, worker_count=workers)
        pod.log_path = str(self._log_dir / f"{pod.pod_id}.log")
        snapshot = artifact.snapshot_path
        argv = [sys.executable, "-m", "agenthost",
                "--bindings", f"{snapshot}/bindings.json",
                "--port", str(port), "--workers", str(workers),
                "--workdir", snapshot]
        log_file = open(pod.log_path, "ab")
        try:
            pod.process = self.executor.spawn(argv, cwd=snapshot, log_file=log_file)
        except OSError as e:
            self.ports.release(port)
            raise SpawnError(f"pod spawn failed: {e}") from e
        finally:
            log_file.close()
        self._record_pid(pod)
        return pod

    def _wait_ready(self, deployment_id: str, pods: list[PodInstance]) -> None:
        deadline = time.time() + self.config.startup_timeout
        pending = list(pods)
        with httpx.Client(timeout=1.0) as client:
            while pending and time.time() < deadline:
                if self._closing.get(deployment_id, threading.Event()).is_set():
                    raise SpawnError("deployment is being torn down")
                for pod in list(pending):
                    if not self.executor.alive(pod.process):
                        raise SpawnError(
                            f"pod {pod.pod_id} exited during startup "
                            f"(see {pod.log_path})")
                    if self._probe(client, pod):
                        pod.consecutive_ok += 1
                        if pod.consecutive_ok >= self.config.ready_successes:
                            pod.state = PodState.READY
                            pending.remove(pod)
                    else:
                        pod.consecutive_ok = 0
                if pending:
                    time.sleep(0.05)
        if pending:
            raise SpawnError(
                f"{len(pending)} pod(s) not READY within "
                f"{self.config.startup_timeout}s")

    @staticmethod
    def _probe(client: httpx.Client, pod: PodInstance) -> bool:
        try:
            r = client.get(f"http://{pod.endpoint}/healthz")
            return r.status_code == 200
        except httpx.HTTPError:
            return False

    def health_check(self, pod: PodInstance) -> PodState:
        """One monitor-tick observation of a pod; updates its state."""
        if pod.state in (PodState.DRAINING, PodState.TERMINATED):
            return pod.state
        if not self.executor.alive(pod.process):
            pod.state = PodState.CRASHED
            return pod.state
        with httpx.Client(timeout=1.0) as client:
            ok = self._probe(client, pod)
        if ok:
            pod.consecutive_ok += 1
            pod.consecutive_fail = 0
            if pod.state is PodState.STARTING \
                    and pod.consecutive_ok >= self.config.ready_successes:
                pod.state = PodState.READY
        else:
            pod.consecutive_fail += 1
            pod.consecutive_ok = 0
            if pod.consecutive_fail >= self.config.crash_failures:
                pod.state = PodState.CRASHED
        return pod.state

    # -- monitoring ---------------------------------------------------------

    def _start_monitor(self, deployment_id: str) -> None:
        if deployment_id in self._monitors:
            return
        t = threading.Thread(target=self._monitor_loop, args=(deployment_id,),
                             name=f"monitor-{deployment_id}", daemon=True)
        self._monitors[deployment_id] = t
        t.start()

    def _monitor_loop(self, deployment_id: str) -> None:
        closing = self._closing[deployment_id]
        while not closing.wait(self.config.probe_interval):
            lock = self._lock_for(deployment_id)
            with lock:
                if closing.is_set():
                    break
                pods = self.pods.get(deployment_id, [])
                for pod in list(pods):
                    state = self.health_check(pod)
                    if state is PodState.CRASHED:
                        self._handle_crash(deployment_id, pod)

    def _handle_crash(self, deployment_id: str, pod: PodInstance) -> None:
        self.gateway.table.remove_backend(deployment_id, pod.endpoint)
        self._terminate_pod(pod)
        self.pods[deployment_id].remove(pod)
        if pod.restarts >= self.config.restart_budget:
            try:
                self.store.transition_status(deployment_id, StatusPhase.FAILED)
            except Exception:
                pass
            return
        artifact = self._artifacts.get(deployment_id)
        if artifact is None:
            return
        try:
            replacement = self._spawn_pod(deployment_id, artifact, pod.worker_count)
            replacement.restarts = pod.restarts + 1
            self._wait_ready(deployment_id, [replacement])
        except (SpawnError, PortExhausted):
            try:
                self.store.transition_status(deployment_id, StatusPhase.FAILED)
            except Exception:
                pass
            return
        self.pods[deployment_id].append(replacement)
        self.gateway.table.set_backends(
            deployment_id,
            [p.endpoint for p in self.pods[deployment_id]
             if p.state is PodState.READY])

    # -- scaling ------------------------------------------------------------

    def scale(self, deployment_id: str, replicas: int,
              workers: int | None = None) -> DeploymentRecord:
        """Reach the target replica count; optionally change the worker pool
        size, which replaces every pod."""
        record = self.store.get("deployments", deployment_id)
        if record.status not in (StatusPhase.RUNNING, StatusPhase.DEPLOYING):
            raise OrchestratorError(
                f"cannot scale deployment in status {record.status.value}")
        allow, reason = self.store.check_quota(record.owner, replicas)
        if not allow:
            raise QuotaExceeded(reason)
        workers = workers if workers is not None else record.worker_count
        if not (1 <= workers <= self.config.worker_max):
            raise OrchestratorError(
                f"workers must be in [1, {self.config.worker_max}]")

        lock = self._lock_for(deployment_id)
        with lock:
            pods = self.pods.get(deployment_id, [])
            artifact = self._artifacts[deployment_id]
            replace_all = workers != record.worker_count
            current = len(pods)
            if not replace_all and replicas == current:
                self.store.update("deployments", deployment_id,
                                  replicas_desired=replicas)
                return self.store.get("deployments", deployment_id)

            self.store.transition_status(deployment_id, StatusPhase.DEPLOYING)
            try:
                if replace_all:
                    new_pods = [self._spawn_pod(deployment_id, artifact, workers)
                                for _ in range(replicas)]
                    self._wait_ready(deployment_id, new_pods)
                    old = pods
                    self.pods[deployment_id] = new_pods
                    self.gateway.table.set_backends(
                        deployment_id, [p.endpoint for p in new_pods])
                    for pod in old:
                        self._drain_and_terminate(deployment_id, pod)
                elif replicas > current:
                    new_pods = [self._spawn_pod(deployment_id, artifact, workers)
                                for _ in range(replicas - current)]
                    self._wait_ready(deployment_id, new_pods)
                    pods.extend(new_pods)
                    self.gateway.table.set_backends(
                        deployment_id, [p.endpoint for p in pods])
                else:
                    goners = pods[replicas:]
                    keep = pods[:replicas]
                    self.pods[deployment_id] = keep
                    for pod in goners:
                        pod.state = PodState.DRAINING
                        self.gateway.table.remove_backend(deployment_id,
                                                          pod.endpoint)
                    for pod in goners:
                        self._drain_and_terminate(deployment_id, pod,
                                                  already_unpublished=True)
            except Exception:
                self.store.transition_status(deployment_id, StatusPhase.FAILED)
                raise
            self.store.update("deployments", deployment_id,
                              replicas_desired=replicas, worker_count=workers)
            return self.store.transition_status(deployment_id, StatusPhase.RUNNING)

    def _drain_and_terminate(self, deployment_id: str, pod: PodInstance,
                             already_unpublished: bool = False) -> None:
        if not already_unpublished:
            pod.state = PodState.DRAINING
            self.gateway.table.remove_backend(deployment_id, pod.endpoint)
        deadline = time.time() + self.config.drain_timeout
        while time.time() < deadline:
            if self.gateway.table.inflight(pod.endpoint) == 0:
                break
            time.sleep(0.05)
        self._terminate_pod(pod)

    def _terminate_pod(self, pod: PodInstance) -> None:
        self.executor.terminate(pod.process)
        pod.state = PodState.TERMINATED
        self.ports.release(pod.port)
        self._forget_pid(pod.pod_id)

    # -- teardown -----------------------------------------------------------

    def teardown(self, deployment_id: str) -> None:
        """Unregister routes, drain and terminate pods, mark DELETED."""
        record = self.store.get("deployments", deployment_id)
        if record.status is StatusPhase.DELETED:
            raise NotFound(f"deployment {deployment_id} already deleted")
        closing = self._closing.get(deployment_id)
        if closing is not None:
            closing.set()   # aborts any in-progress spawn loop
        lock = self._lock_for(deployment_id)
        with lock:
            record = self.store.get("deployments", deployment_id)
            if record.status is StatusPhase.DELETED:
                raise NotFound(f"deployment {deployment_id} already deleted")
            for fn, path in record.services:
                try:
                    self.gateway.unregister_route(path)
                except Exception:
                    pass
            pods = self.pods.pop(deployment_id, [])
            for pod in pods:
                pod.state = PodState.DRAINING
            for pod in pods:
                self._drain_and_terminate(deployment_id, pod,
                                          already_unpublished=True)
            self._artifacts.pop(deployment_id, None)
            self._monitors.pop(deployment_id, None)
            if record.status in (StatusPhase.RUNNING, StatusPhase.FAILED):
                self.store.transition_status(deployment_id, StatusPhase.DELETED)
            else:
                # deployment was mid-pipeline; fail it first, then delete
                self.store.transition_status(deployment_id, StatusPhase.FAILED)
                self.store.transition_status(deployment_id, StatusPhase.DELETED)

    def stop_all(self) -> None:
        """Terminate every pod (platform shutdown, not deployment deletion)."""
        for deployment_id, closing in list(self._closing.items()):
            closing.set()
        for deployment_id, pods in list(self.pods.items()):
            for pod in pods:
                self._terminate_pod(pod)
        self.pods.clear()

    # -- introspection ------------------------------------------------------

    def pod_views(self, deployment_id: str) -> list[dict]:
        return [{"pod_id": p.pod_id, "state": p.state.value,
                 "endpoint": p.endpoint, "restarts": p.restarts,
                 "workers": p.worker_count}
                for p in self.pods.get(deployment_id, [])]
