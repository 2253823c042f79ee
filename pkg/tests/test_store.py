"""Document store: CRUD, uniqueness, status machine, quota, search."""

from __future__ import annotations

import itertools

import pytest

from podbay.store import (COLLECTIONS, LEGAL_TRANSITIONS, DeploymentRecord,
                          DeviceRecord, DocumentStore, DuplicateKey, GroupRecord,
                          IllegalTransition, NotFound, ReferentialError,
                          StatusPhase, UnknownCollection, UserRecord)


@pytest.fixture
def store(tmp_path):
    s = DocumentStore(tmp_path / "db")
    s.put_record("groups", GroupRecord(group_id="default",
                                       max_pods_per_deployment=3, max_deployments=10))
    return s


def make_deployment(store, owner="alice", name="test", version="v1", **kw):
    if not store.exists("users", owner):
        store.put_record("users", UserRecord(username=owner))
    dep = DeploymentRecord(deployment_id=f"dep-{owner}-{name}-{version}", owner=owner,
                           namespace=f"user-{owner}", package_name=name, version=version,
                           **kw)
    store.put_record("deployments", dep)
    return dep


class TestCrud:
    def test_insert_and_read_back(self, store):
        key = store.put_record("users", UserRecord(username="alice", group="default"))
        assert key == "alice"
        assert store.get("users", "alice").username == "alice"

    def test_duplicate_username(self, store):
        store.put_record("users", UserRecord(username="alice"))
        with pytest.raises(DuplicateKey):
            store.put_record("users", UserRecord(username="alice"))

    def test_deployment_with_unknown_owner(self, store):
        with pytest.raises(ReferentialError):
            store.put_record("deployments", DeploymentRecord(
                deployment_id="d1", owner="ghost", namespace="user-ghost",
                package_name="p", version="v1"))

    def test_unknown_collection(self, store):
        with pytest.raises(UnknownCollection):
            store.put_record("blobs", UserRecord(username="x"))

    def test_user_with_unknown_group(self, store):
        with pytest.raises(ReferentialError):
            store.put_record("users", UserRecord(username="bob", group="nope"))

    def test_device_requires_owner(self, store):
        store.put_record("users", UserRecord(username="alice"))
        store.put_record("devices", DeviceRecord(device_id="dev1", owner="alice"))
        with pytest.raises(ReferentialError):
            store.put_record("devices", DeviceRecord(device_id="dev2", owner="ghost"))

    def test_dict_records_accepted(self, store):
        store.put_record("users", {"username": "carol", "group": "default"})
        assert store.get("users", "carol").group == "default"

    def test_persistence_across_reopen(self, store, tmp_path):
        store.put_record("users", UserRecord(username="alice"))
        make_deployment(store)
        reopened = DocumentStore(tmp_path / "db")
        assert reopened.get("users", "alice").username == "alice"
        dep = reopened.search_deployments("test")[0]
        assert dep.status is StatusPhase.QUEUED

    def test_name_version_unique_among_non_deleted(self, store):
        make_deployment(store)
        with pytest.raises(DuplicateKey):
            store.put_record("deployments", DeploymentRecord(
                deployment_id="d2", owner="alice", namespace="user-alice",
                package_name="test", version="v1"))
        # after soft delete the slot frees up
        store.transition_status("dep-alice-test-v1", StatusPhase.FAILED)
        store.transition_status("dep-alice-test-v1", StatusPhase.DELETED)
        store.put_record("deployments", DeploymentRecord(
            deployment_id="d2", owner="alice", namespace="user-alice",
            package_name="test", version="v1"))


class TestStatusMachine:
    def test_pipeline_walk(self, store):
        dep = make_deployment(store)
        for phase in [StatusPhase.VALIDATING, StatusPhase.GENERATING,
                      StatusPhase.BUILDING, StatusPhase.DEPLOYING, StatusPhase.RUNNING]:
            record = store.transition_status(dep.deployment_id, phase)
            assert record.status is phase

    def test_backward_edge_rejected(self, store):
        dep = make_deployment(store, status=StatusPhase.RUNNING)
        with pytest.raises(IllegalTransition):
            store.transition_status(dep.deployment_id, StatusPhase.BUILDING)

    def test_failure_edge(self, store):
        dep = make_deployment(store, status=StatusPhase.BUILDING)
        assert store.transition_status(dep.deployment_id, StatusPhase.FAILED).status \
            is StatusPhase.FAILED

    def test_unknown_deployment(self, store):
        with pytest.raises(NotFound):
            store.transition_status("nope", StatusPhase.FAILED)

    def test_exhaustive_pairwise(self, store):
        for src, dst in itertools.product(StatusPhase, StatusPhase):
            dep_id = f"dep-{src.value}-{dst.value}".lower()
            if not store.exists("users", "alice"):
                store.put_record("users", UserRecord(username="alice"))
            store.put_record("deployments", DeploymentRecord(
                deployment_id=dep_id, owner="alice", namespace="user-alice",
                package_name=dep_id, version="v1", status=src))
            if (src, dst) in LEGAL_TRANSITIONS:
                assert store.transition_status(dep_id, dst).status is dst
            else:
                with pytest.raises(IllegalTransition):
                    store.transition_status(dep_id, dst)

    def test_updated_at_bumped_and_audit_appended(self, store):
        dep = make_deployment(store)
        before = store.get("deployments", dep.deployment_id).updated_at
        store.transition_status(dep.deployment_id, StatusPhase.VALIDATING)
        after = store.get("deployments", dep.deployment_id)
        assert after.updated_at >= before
        log = store.audit_log(dep.deployment_id)
        assert log[-1]["from"] == "QUEUED" and log[-1]["to"] == "VALIDATING"

    def test_audit_replay_reaches_every_stored_status(self, store):
        dep = make_deployment(store)
        for phase in [StatusPhase.VALIDATING, StatusPhase.GENERATING,
                      StatusPhase.BUILDING, StatusPhase.FAILED, StatusPhase.DELETED]:
            store.transition_status(dep.deployment_id, phase)
        current = StatusPhase.QUEUED
        for entry in store.audit_log(dep.deployment_id):
            assert (current, StatusPhase(entry["to"])) in LEGAL_TRANSITIONS
            current = StatusPhase(entry["to"])
        assert current is store.get("deployments", dep.deployment_id).status


class TestQuota:
    def test_boundary_allowed(self, store):
        store.put_record("users", UserRecord(username="alice"))
        assert store.check_quota("alice", 3) == (True, "")

    def test_over_boundary_denied(self, store):
        store.put_record("groups", GroupRecord(group_id="small",
                                               max_pods_per_deployment=2))
        store.put_record("users", UserRecord(username="bob", group="small"))
        allow, reason = store.check_quota("bob", 3)
        assert not allow and reason == "pod quota exceeded"

    def test_zero_replicas_allowed(self, store):
        store.put_record("users", UserRecord(username="alice"))
        assert store.check_quota("alice", 0) == (True, "")

    def test_max_deployments(self, store):
        store.put_record("groups", GroupRecord(group_id="one", max_pods_per_deployment=3,
                                               max_deployments=1))
        store.put_record("users", UserRecord(username="dora", group="one"))
        assert store.check_quota("dora", 1, new_deployment=True) == (True, "")
        make_deployment(store, owner="dora", name="p1")
        allow, reason = store.check_quota("dora", 1, new_deployment=True)
        assert not allow and reason == "deployment quota exceeded"


class TestSearch:
    def test_substring_match(self, store):
        make_deployment(store, name="test")
        assert len(store.search_deployments("test")) == 1
        assert store.search_deployments("zzz") == []

    def test_empty_query_returns_all_non_deleted(self, store):
        make_deployment(store, name="one")
        make_deployment(store, name="two")
        assert len(store.search_deployments("")) == 2

    def test_deleted_excluded(self, store):
        dep = make_deployment(store)
        store.transition_status(dep.deployment_id, StatusPhase.FAILED)
        store.transition_status(dep.deployment_id, StatusPhase.DELETED)
        assert store.search_deployments("test") == []
        assert len(store.search_deployments("test", include_deleted=True)) == 1


def test_export_jsonl(store, tmp_path):
    store.put_record("users", UserRecord(username="alice"))
    make_deployment(store)
    paths = store.export_jsonl(tmp_path / "export")
    assert {p.name for p in paths} == {f"{c}.jsonl" for c in COLLECTIONS}
    users = (tmp_path / "export" / "users.jsonl").read_text().strip().splitlines()
    assert len(users) == 1
