"""Control API: auth, upload pipeline, status, scaling, logs, teardown."""

from __future__ import annotations

import io
import json
import zipfile

import httpx
import pytest
from fastapi.testclient import TestClient

from podbay.config import PlatformConfig
from podbay.controlplane import Platform, create_app
from podbay.store import StatusPhase
from tests.conftest import (DEPLOYABLE_MANIFEST, build_archive,
                            build_deployable_archive)

TOKEN = "alice-token-1"
AUTH = {"Authorization": f"Bearer {TOKEN}"}


@pytest.fixture
def platform(tmp_path):
    config = PlatformConfig(data_dir=str(tmp_path / "data"), gateway_port=0,
                            probe_interval=0.2, ready_successes=2,
                            crash_failures=2, restart_budget=1)
    p = Platform(config)
    p.ensure_user("alice", TOKEN)
    p.start()
    yield p
    p.stop()


@pytest.fixture
def client(platform):
    with TestClient(create_app(platform)) as c:
        yield c


def upload_and_run(client, platform, archive=None, replicas=1, workers=3):
    archive = archive if archive is not None else build_deployable_archive()
    r = client.post("/api/packages",
                    data={"replicas": str(replicas), "workers": str(workers)},
                    files={"archive": ("pkg.zip", io.BytesIO(archive))},
                    headers=AUTH)
    assert r.status_code == 202, r.text
    deployment_id = r.json()["deployment_id"]
    platform.wait_for_status(deployment_id,
                             {StatusPhase.RUNNING, StatusPhase.FAILED},
                             timeout=30.0)
    return deployment_id


class TestAuth:
    def test_healthz_is_open(self, client):
        assert client.get("/api/healthz").status_code == 200

    def test_missing_token_401(self, client):
        assert client.get("/api/deployments").status_code == 401

    def test_bad_token_401(self, client):
        r = client.get("/api/deployments",
                       headers={"Authorization": "Bearer nope"})
        assert r.status_code == 401

    def test_good_token_ok(self, client):
        assert client.get("/api/deployments", headers=AUTH).status_code == 200


class TestUploadPipeline:
    def test_upload_reaches_running(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        doc = client.get(f"/api/deployments/{deployment_id}",
                         headers=AUTH).json()
        assert doc["status"] == "RUNNING"
        assert len(doc["pods"]) == 1
        assert {s["function"] for s in doc["services"]} == \
            {"add_two_ints", "sendmyfile"}
        path = next(s["path"] for s in doc["services"]
                    if s["function"] == "add_two_ints")
        r = httpx.post(platform.gateway.base_url + path,
                       data={"a": "4", "b": "5"})
        assert r.status_code == 200 and r.text == "9"

    def test_duplicate_version_409(self, client, platform):
        upload_and_run(client, platform)
        r = client.post("/api/packages",
                        files={"archive": ("pkg.zip",
                                           io.BytesIO(build_deployable_archive()))},
                        headers=AUTH)
        assert r.status_code == 409

    def test_unreadable_archive_422(self, client):
        r = client.post("/api/packages",
                        files={"archive": ("pkg.zip", io.BytesIO(b"not a zip"))},
                        headers=AUTH)
        assert r.status_code == 422

    def test_missing_manifest_422(self, client):
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w") as zf:
            zf.writestr("functions/x.py", "def x():\n    return 1\n")
        r = client.post("/api/packages",
                        files={"archive": ("pkg.zip", io.BytesIO(buf.getvalue()))},
                        headers=AUTH)
        assert r.status_code == 422

    def test_missing_handler_fails_with_staged_log(self, client, platform):
        archive = build_archive(DEPLOYABLE_MANIFEST, files={})  # no handlers
        deployment_id = upload_and_run(client, platform, archive=archive)
        doc = client.get(f"/api/deployments/{deployment_id}",
                         headers=AUTH).json()
        assert doc["status"] == "FAILED"
        log = client.get(f"/api/deployments/{deployment_id}/logs",
                         params={"stage": "build"}, headers=AUTH).text
        assert "MISSING_FUNCTION_FILE" in log
        assert "FAILED at stage validate" in log

    def test_over_quota_upload_409(self, client):
        r = client.post("/api/packages", data={"replicas": "99"},
                        files={"archive": ("pkg.zip",
                                           io.BytesIO(build_deployable_archive()))},
                        headers=AUTH)
        assert r.status_code == 409


class TestScaleAndTeardown:
    def test_scale_up(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        r = client.post(f"/api/deployments/{deployment_id}/scale",
                        json={"replicas": 2}, headers=AUTH)
        assert r.status_code == 200
        assert r.json()["replicas_desired"] == 2
        assert len(platform.orchestrator.pods[deployment_id]) == 2

    def test_scale_beyond_quota_409(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        r = client.post(f"/api/deployments/{deployment_id}/scale",
                        json={"replicas": 99}, headers=AUTH)
        assert r.status_code == 409

    def test_scale_bad_body_422(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        r = client.post(f"/api/deployments/{deployment_id}/scale",
                        json={"replicas": "two"}, headers=AUTH)
        assert r.status_code == 422

    def test_scale_workers_change(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        r = client.post(f"/api/deployments/{deployment_id}/scale",
                        json={"replicas": 1, "workers": 1}, headers=AUTH)
        assert r.status_code == 200
        assert r.json()["worker_count"] == 1

    def test_delete_then_404_on_repeat(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        assert client.delete(f"/api/deployments/{deployment_id}",
                             headers=AUTH).status_code == 204
        assert client.delete(f"/api/deployments/{deployment_id}",
                             headers=AUTH).status_code == 404
        listed = client.get("/api/deployments", headers=AUTH).json()
        assert deployment_id not in [d["deployment_id"] for d in listed]

    def test_referenced_artifact_survives_cleanup(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        record = platform.store.get("deployments", deployment_id)
        removed = platform.cleanup_artifacts()
        assert record.artifact_id not in removed
        assert platform.registry.get(record.artifact_id) is not None


class TestLogsAndInterfaces:
    def test_deploy_log_shows_status_walk(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        log = client.get(f"/api/deployments/{deployment_id}/logs",
                         params={"stage": "deploy"}, headers=AUTH).text
        for hop in ("QUEUED -> VALIDATING", "VALIDATING -> GENERATING",
                    "GENERATING -> BUILDING", "BUILDING -> DEPLOYING",
                    "DEPLOYING -> RUNNING"):
            assert hop in log

    def test_runtime_log_prefixed_by_pod(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        doc = client.get(f"/api/deployments/{deployment_id}",
                         headers=AUTH).json()
        path = next(s["path"] for s in doc["services"]
                    if s["function"] == "add_two_ints")
        httpx.post(platform.gateway.base_url + path, data={"a": "1", "b": "2"})
        log = client.get(f"/api/deployments/{deployment_id}/logs",
                         params={"stage": "runtime"}, headers=AUTH).text
        pod_id = doc["pods"][0]["pod_id"]
        assert f"[{pod_id}]" in log
        assert "INVOKE add_two_ints" in log

    def test_unknown_log_stage_422(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        r = client.get(f"/api/deployments/{deployment_id}/logs",
                       params={"stage": "bogus"}, headers=AUTH)
        assert r.status_code == 422

    def test_openapi_served(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        doc = client.get(f"/api/deployments/{deployment_id}/openapi.json",
                         headers=AUTH).json()
        assert doc["openapi"].startswith("3.0")
        assert set(doc["paths"]) == {"/add_two_ints", "/sendmyfile"}
        assert doc["servers"][0]["url"].startswith(platform.gateway.base_url)

    def test_client_stub_served(self, client, platform):
        deployment_id = upload_and_run(client, platform)
        r = client.get(f"/api/deployments/{deployment_id}/clients/python",
                       headers=AUTH)
        assert r.status_code == 200
        assert "def add_two_ints(a, b):" in r.text
        r = client.get(f"/api/deployments/{deployment_id}/clients/golang",
                       headers=AUTH)
        assert r.status_code == 404


class TestOwnership:
    def test_other_user_sees_404(self, client, platform):
        platform.ensure_user("bob", "bob-token")
        deployment_id = upload_and_run(client, platform)
        r = client.get(f"/api/deployments/{deployment_id}",
                       headers={"Authorization": "Bearer bob-token"})
        assert r.status_code == 404
        r = client.delete(f"/api/deployments/{deployment_id}",
                          headers={"Authorization": "Bearer bob-token"})
        assert r.status_code == 404


class TestCli:
    def test_help_lists_verbs(self):
        from click.testing import CliRunner

        from podbay.cli import main
        result = CliRunner().invoke(main, ["--help"])
        assert result.exit_code == 0
        for verb in ("serve", "upload", "status", "logs", "scale", "list",
                     "invoke", "teardown", "bench"):
            assert verb in result.output

    def test_bench_against_gateway(self, platform, client):
        from click.testing import CliRunner

        from podbay.cli import main
        deployment_id = upload_and_run(client, platform)
        doc = client.get(f"/api/deployments/{deployment_id}",
                         headers=AUTH).json()
        path = next(s["path"] for s in doc["services"]
                    if s["function"] == "add_two_ints")
        url = platform.gateway.base_url + path
        result = CliRunner().invoke(
            main, ["bench", url, "-n", "10", "-c", "5",
                   "-d", "a=1", "-d", "b=2", "--format", "csv"])
        assert result.exit_code == 0, result.output
        assert "concurrency,connect" in result.output
        assert "ok=10" in result.output
