"""Platform wiring and the REST control API.

``Platform`` owns every subsystem: document store, artifact registry,
build queue, gateway, and orchestrator. An upload enters a pipeline that
walks the deployment status machine (QUEUED, VALIDATING, GENERATING,
BUILDING, DEPLOYING, RUNNING) on a build-queue worker; any stage failure
parks the deployment in FAILED with the stage named in its build log.

``create_app`` exposes the platform over HTTP with bearer-token
authentication; tokens are stored hashed.
"""

from __future__ import annotations

import threading
import time
from pathlib import Path

from fastapi import Depends, FastAPI, Form, HTTPException, Request, Response, UploadFile
from fastapi.responses import JSONResponse, PlainTextResponse

from . import apigen
from .buildsys import (ArtifactRegistry, BuildJob, BuildQueue, JobPhase,
                       generate_recipe, new_id)
from .config import PlatformConfig
from .gateway import Gateway
from .manifest import (Manifest, ManifestError, parse_manifest,
                       read_manifest_from_archive, serialize_manifest,
                       validate_archive)
from .orchestrator import Orchestrator, OrchestratorError, QuotaExceeded
from .store import (DeploymentRecord, DocumentStore, DuplicateKey, GroupRecord,
                    NotFound, StatusPhase, UserRecord, hash_token)

LOG_STAGES = ("build", "deploy", "runtime")


class ControlPlaneError(Exception):
    pass


class UploadRejected(ControlPlaneError):
    """The archive could not be accepted (unreadable or invalid manifest)."""


class Platform:
    """All subsystems behind one facade; the API layer stays thin."""

    def __init__(self, config: PlatformConfig):
        self.config = config
        self.store = DocumentStore(config.data_path / "db")
        self.registry = ArtifactRegistry(config.data_path / "artifacts",
                                         build_mode=config.build_mode)
        self.gateway = Gateway(port=config.gateway_port,
                               request_timeout=config.request_timeout)
        self.orchestrator = Orchestrator(self.store, self.gateway, config)
        self.builds = BuildQueue(config.max_parallel_builds)
        self.jobs: dict[str, BuildJob] = {}          # deployment_id -> job
        self._manifest_dir = config.data_path / "manifests"
        self._manifest_dir.mkdir(parents=True, exist_ok=True)
        self._build_log_dir = config.data_path / "logs"
        self._build_log_dir.mkdir(parents=True, exist_ok=True)
        if not self.store.exists("groups", "default"):
            self.store.put_record("groups", GroupRecord(group_id="default"))

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        self.gateway.start()
        self.orchestrator.reap_orphans()

    def stop(self) -> None:
        self.builds.shutdown()
        self.orchestrator.stop_all()
        self.gateway.stop()

    # -- accounts -----------------------------------------------------------

    def ensure_group(self, group_id: str, max_pods: int = 3,
                     max_deployments: int = 10) -> None:
        if not self.store.exists("groups", group_id):
            self.store.put_record("groups", GroupRecord(
                group_id=group_id, max_pods_per_deployment=max_pods,
                max_deployments=max_deployments))

    def ensure_user(self, username: str, token: str,
                    group: str = "default") -> None:
        if self.store.exists("users", username):
            self.store.update("users", username, token_hash=hash_token(token),
                              group=group)
        else:
            self.store.put_record("users", UserRecord(
                username=username, token_hash=hash_token(token), group=group))

    def authenticate(self, token: str) -> str | None:
        digest = hash_token(token)
        for user in self.store.all("users"):
            if user.token_hash and user.token_hash == digest:
                return user.username
        return None

    # -- upload pipeline ----------------------------------------------------

    def upload(self, owner: str, archive: bytes, replicas: int | None = None,
               workers: int | None = None) -> DeploymentRecord:
        """Accept an archive and queue its deployment pipeline.

        Raises ``UploadRejected`` for an unusable archive, ``DuplicateKey``
        when the owner already runs this package version, and
        ``QuotaExceeded`` when the request is over quota.
        """
        replicas = self.config.default_replicas if replicas is None else replicas
        workers = self.config.default_workers if workers is None else workers
        try:
            manifest = read_manifest_from_archive(archive)
        except ManifestError as e:
            raise UploadRejected(str(e)) from e
        if not (1 <= workers <= self.config.worker_max):
            raise UploadRejected(
                f"workers must be in [1, {self.config.worker_max}]")

        with self.store.owner_lock(owner):
            allow, reason = self.store.check_quota(owner, replicas,
                                                   new_deployment=True)
            if not allow:
                raise QuotaExceeded(reason)
            ns = self.orchestrator.ensure_namespace(owner)
            deployment_id = new_id("dep")
            record = DeploymentRecord(
                deployment_id=deployment_id, owner=owner,
                namespace=ns.namespace_id, package_name=manifest.name,
                version=manifest.version, replicas_desired=replicas,
                worker_count=workers, status=StatusPhase.QUEUED)
            self.store.put_record("deployments", record)

        (self._manifest_dir / f"{deployment_id}.yaml").write_text(
            serialize_manifest(manifest), encoding="utf-8")
        job = BuildJob(job_id=new_id("job"), deployment_id=deployment_id)
        self.jobs[deployment_id] = job
        self.builds.submit(lambda: self._pipeline(deployment_id, manifest,
                                                  archive, replicas, workers,
                                                  job))
        return record

    def _pipeline(self, deployment_id: str, manifest: Manifest, archive: bytes,
                  replicas: int, workers: int, job: BuildJob) -> None:
        stage = "validate"
        try:
            record = self.store.get("deployments", deployment_id)
            self.store.transition_status(deployment_id, StatusPhase.VALIDATING)
            job.phase = JobPhase.VALIDATING
            report = validate_archive(archive)
            for issue in report.issues:
                job.log(f"{issue.severity} {issue.code} at {issue.location}: "
                        f"{issue.message}")
            if not report.ok:
                raise ControlPlaneError("archive validation failed")

            stage = "generate"
            self.store.transition_status(deployment_id, StatusPhase.GENERATING)
            job.phase = JobPhase.GENERATING
            recipe = generate_recipe(manifest)
            job.log(f"RECIPE {recipe.recipe_hash}")

            stage = "build"
            self.store.transition_status(deployment_id, StatusPhase.BUILDING)
            artifact = self.registry.execute_build(
                recipe, archive, record.owner, manifest.name,
                manifest.version, job=job)

            stage = "deploy"
            self.orchestrator.create_deployment(artifact, replicas, workers,
                                                record.owner,
                                                deployment_id=deployment_id)
            job.log("DEPLOY complete")
        except Exception as e:  # noqa: BLE001 - stage failures park in FAILED
            job.log(f"FAILED at stage {stage}: {e}")
            job.finish(JobPhase.FAILED)
            try:
                self.store.transition_status(deployment_id, StatusPhase.FAILED)
            except Exception:
                pass    # already FAILED/DELETED (e.g. torn down mid-pipeline)
        finally:
            (self._build_log_dir / f"build-{deployment_id}.log").write_text(
                job.log_text() + "\n", encoding="utf-8")

    def wait_for_status(self, deployment_id: str, phases: set[StatusPhase],
                        timeout: float = 60.0) -> DeploymentRecord:
        deadline = time.time() + timeout
        while True:
            record = self.store.get("deployments", deployment_id)
            if record.status in phases:
                return record
            if time.time() > deadline:
                raise TimeoutError(
                    f"deployment {deployment_id} stuck in "
                    f"{record.status.value} after {timeout}s")
            time.sleep(0.1)

    # -- queries ------------------------------------------------------------

    def get_deployment(self, owner: str, deployment_id: str) -> DeploymentRecord:
        record = self.store.get("deployments", deployment_id)
        if record.owner != owner:
            raise NotFound(f"deployments:{deployment_id}")
        return record

    def status(self, owner: str, deployment_id: str) -> dict:
        record = self.get_deployment(owner, deployment_id)
        job = self.jobs.get(deployment_id)
        return {
            "deployment_id": record.deployment_id,
            "owner": record.owner,
            "namespace": record.namespace,
            "package_name": record.package_name,
            "version": record.version,
            "status": record.status.value,
            "replicas_desired": record.replicas_desired,
            "worker_count": record.worker_count,
            "services": [{"function": fn, "path": path}
                         for fn, path in record.services],
            "pods": self.orchestrator.pod_views(deployment_id),
            "build_phase": job.phase.value if job else None,
            "created_at": record.created_at,
            "updated_at": record.updated_at,
        }

    def list_deployments(self, owner: str, query: str = "",
                         include_deleted: bool = False) -> list[dict]:
        records = self.store.search_deployments(query=query, owner=owner,
                                                include_deleted=include_deleted)
        return [self.status(owner, r.deployment_id) for r in records]

    def logs(self, owner: str, deployment_id: str, stage: str = "build") -> str:
        record = self.get_deployment(owner, deployment_id)
        if stage == "build":
            job = self.jobs.get(deployment_id)
            if job is not None:
                return job.log_text()
            path = self._build_log_dir / f"build-{deployment_id}.log"
            return path.read_text(encoding="utf-8") if path.exists() else ""
        if stage == "deploy":
            return "\n".join(
                f"{e['at']:.3f} {e['from']} -> {e['to']}"
                for e in self.store.audit_log(deployment_id))
        if stage == "runtime":
            chunks = []
            for pod in self.orchestrator.pods.get(deployment_id, []):
                try:
                    text = Path(pod.log_path).read_text(encoding="utf-8")
                except OSError:
                    continue
                chunks.extend(f"[{pod.pod_id}] {line}"
                              for line in text.splitlines())
            return "\n".join(chunks)
        raise ControlPlaneError(f"unknown log stage {stage!r}; "
                                f"expected one of {LOG_STAGES}")

    # -- mutation -----------------------------------------------------------

    def scale(self, owner: str, deployment_id: str, replicas: int,
              workers: int | None = None) -> DeploymentRecord:
        self.get_deployment(owner, deployment_id)
        return self.orchestrator.scale(deployment_id, replicas, workers=workers)

    def teardown(self, owner: str, deployment_id: str) -> None:
        self.get_deployment(owner, deployment_id)
        self.orchestrator.teardown(deployment_id)
        self.jobs.pop(deployment_id, None)

    def cleanup_artifacts(self) -> list[str]:
        referenced = {r.artifact_id
                      for r in self.store.all("deployments")
                      if r.status is not StatusPhase.DELETED and r.artifact_id}
        return self.registry.cleanup_artifacts(referenced)

    # -- generated interfaces ------------------------------------------------

    def _manifest_for(self, deployment_id: str) -> Manifest:
        path = self._manifest_dir / f"{deployment_id}.yaml"
        if not path.exists():
            raise NotFound(f"manifest for {deployment_id}")
        return parse_manifest(path.read_text(encoding="utf-8"))

    def service_base_url(self, record: DeploymentRecord) -> str:
        return (f"{self.gateway.base_url}/svc/{record.namespace}"
                f"/{record.package_name}/{record.version}")

    def openapi_document(self, owner: str, deployment_id: str) -> apigen.InterfaceDocument:
        record = self.get_deployment(owner, deployment_id)
        manifest = self._manifest_for(deployment_id)
        return apigen.generate_openapi(manifest, self.service_base_url(record))

    def client_stub(self, owner: str, deployment_id: str,
                    template: str) -> apigen.ClientStub:
        doc = self.openapi_document(owner, deployment_id)
        return apigen.generate_client_stub(doc, template)


# -- HTTP layer --------------------------------------------------------------


def create_app(platform: Platform) -> FastAPI:
    app = FastAPI(title="pod platform control api", docs_url=None,
                  redoc_url=None)

    def current_user(request: Request) -> str:
        auth = request.headers.get("Authorization", "")
        scheme, _, token = auth.partition(" ")
        if scheme.lower() != "bearer" or not token:
            raise HTTPException(401, "missing bearer token")
        username = platform.authenticate(token.strip())
        if username is None:
            raise HTTPException(401, "invalid token")
        return username

    @app.get("/api/healthz")
    def healthz():
        return PlainTextResponse("ok")

    @app.post("/api/packages", status_code=202)
    async def upload_package(archive: UploadFile,
                             replicas: int | None = Form(default=None),
                             workers: int | None = Form(default=None),
                             user: str = Depends(current_user)):
        payload = await archive.read()
        try:
            record = platform.upload(user, payload, replicas=replicas,
                                     workers=workers)
        except UploadRejected as e:
            raise HTTPException(422, str(e)) from e
        except DuplicateKey as e:
            raise HTTPException(409, str(e)) from e
        except QuotaExceeded as e:
            raise HTTPException(409, str(e)) from e
        return {"deployment_id": record.deployment_id,
                "status": record.status.value}

    @app.get("/api/deployments")
    def list_deployments(query: str = "", include_deleted: bool = False,
                         user: str = Depends(current_user)):
        return platform.list_deployments(user, query=query,
                                         include_deleted=include_deleted)

    @app.get("/api/deployments/{deployment_id}")
    def deployment_status(deployment_id: str,
                          user: str = Depends(current_user)):
        try:
            return platform.status(user, deployment_id)
        except NotFound as e:
            raise HTTPException(404, str(e)) from e

    @app.get("/api/deployments/{deployment_id}/logs")
    def deployment_logs(deployment_id: str, stage: str = "build",
                        user: str = Depends(current_user)):
        try:
            return PlainTextResponse(platform.logs(user, deployment_id, stage))
        except NotFound as e:
            raise HTTPException(404, str(e)) from e
        except ControlPlaneError as e:
            raise HTTPException(422, str(e)) from e

    @app.post("/api/deployments/{deployment_id}/scale")
    def scale_deployment(deployment_id: str, body: dict,
                         user: str = Depends(current_user)):
        replicas = body.get("replicas")
        if not isinstance(replicas, int) or replicas < 0:
            raise HTTPException(422, "replicas must be a non-negative integer")
        workers = body.get("workers")
        if workers is not None and not isinstance(workers, int):
            raise HTTPException(422, "workers must be an integer")
        try:
            record = platform.scale(user, deployment_id, replicas,
                                    workers=workers)
        except NotFound as e:
            raise HTTPException(404, str(e)) from e
        except QuotaExceeded as e:
            raise HTTPException(409, str(e)) from e
        except OrchestratorError as e:
            raise HTTPException(422, str(e)) from e
        return {"deployment_id": record.deployment_id,
                "status": record.status.value,
                "replicas_desired": record.replicas_desired,
                "worker_count": record.worker_count}

    @app.delete("/api/deployments/{deployment_id}", status_code=204)
    def delete_deployment(deployment_id: str,
                          user: str = Depends(current_user)):
        try:
            platform.teardown(user, deployment_id)
        except NotFound as e:
            raise HTTPException(404, str(e)) from e
        return Response(status_code=204)

    @app.get("/api/deployments/{deployment_id}/openapi.json")
    def deployment_openapi(deployment_id: str,
                           user: str = Depends(current_user)):
        try:
            doc = platform.openapi_document(user, deployment_id)
        except NotFound as e:
            raise HTTPException(404, str(e)) from e
        return JSONResponse(doc.document)

    @app.get("/api/deployments/{deployment_id}/clients/{template}")
    def deployment_client(deployment_id: str, template: str,
                          user: str = Depends(current_user)):
        try:
            stub = platform.client_stub(user, deployment_id, template)
        except NotFound as e:
            raise HTTPException(404, str(e)) from e
        except apigen.UnknownTemplate as e:
            raise HTTPException(404, f"unknown template {template!r}") from e
        return PlainTextResponse(stub.source)

    return app


class ApiServer:
    """Run the control API on a background uvicorn server."""

    def __init__(self, platform: Platform, host: str = "127.0.0.1",
                 port: int | None = None):
        import uvicorn

        self.platform = platform
        self.port = platform.config.api_port if port is None else port
        config = uvicorn.Config(create_app(platform), host=host,
                                port=self.port, log_level="warning")
        self._server = uvicorn.Server(config)
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        port = self.port
        if self._server.servers:
            port = self._server.servers[0].sockets[0].getsockname()[1]
        return f"http://127.0.0.1:{port}"

    def start(self, timeout: float = 10.0) -> None:
        self._thread = threading.Thread(target=self._server.run,
                                        name="control-api", daemon=True)
        self._thread.start()
        deadline = time.time() + timeout
        while not self._server.started:
            if time.time() > deadline:
                raise ControlPlaneError("API server failed to start")
            time.sleep(0.05)

    def stop(self) -> None:
        self._server.should_exit = True
        if self._thread:
            self._thread.join(timeout=10)
