"""Embedded document store: users, groups, devices, and deployments.

One JSON file per collection under a data directory, guarded by a single
process-wide lock with atomic rewrite on every mutation. Deployment
status changes go through a fixed transition graph and are appended to an
audit log so the full history can be replayed.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path


class StoreError(Exception):
    """Base class for store failures."""


class UnknownCollection(StoreError):
    pass


class DuplicateKey(StoreError):
    pass


class ReferentialError(StoreError):
    pass


class NotFound(StoreError):
    pass


class IllegalTransition(StoreError):
    def __init__(self, deployment_id: str, src: "StatusPhase", dst: "StatusPhase"):
        self.src, self.dst = src, dst
        super().__init__(f"deployment {deployment_id}: illegal transition {src.value} -> {dst.value}")


class StatusPhase(str, Enum):
    QUEUED = "QUEUED"
    VALIDATING = "VALIDATING"
    GENERATING = "GENERATING"
    BUILDING = "BUILDING"
    DEPLOYING = "DEPLOYING"
    RUNNING = "RUNNING"
    FAILED = "FAILED"
    DELETED = "DELETED"


_PIPELINE = [StatusPhase.QUEUED, StatusPhase.VALIDATING, StatusPhase.GENERATING,
             StatusPhase.BUILDING, StatusPhase.DEPLOYING, StatusPhase.RUNNING]

LEGAL_TRANSITIONS: frozenset[tuple[StatusPhase, StatusPhase]] = frozenset(
    [(a, b) for a, b in zip(_PIPELINE, _PIPELINE[1:])]
    + [(p, StatusPhase.FAILED) for p in _PIPELINE]
    + [(StatusPhase.RUNNING, StatusPhase.DEPLOYING),
       (StatusPhase.RUNNING, StatusPhase.DELETED),
       (StatusPhase.FAILED, StatusPhase.DELETED)]
)


@dataclass
class UserRecord:
    username: str
    display_name: str = ""
    token_hash: str = ""
    group: str = "default"
    created_at: float = field(default_factory=time.time)


@dataclass
class GroupRecord:
    group_id: str
    max_pods_per_deployment: int = 3
    max_deployments: int = 10


@dataclass
class DeviceRecord:
    device_id: str
    owner: str
    label: str = ""
    registered_at: float = field(default_factory=time.time)


@dataclass
class DeploymentRecord:
    deployment_id: str
    owner: str
    namespace: str
    package_name: str
    version: str
    artifact_id: str = ""
    replicas_desired: int = 1
    worker_count: int = 3
    status: StatusPhase = StatusPhase.QUEUED
    services: list = field(default_factory=list)   # [(function name, external path)]
    logs_ref: str = ""
    created_at: float = field(default_factory=time.time)
    updated_at: float = field(default_factory=time.time)


COLLECTIONS = {
    "users": (UserRecord, "username"),
    "groups": (GroupRecord, "group_id"),
    "devices": (DeviceRecord, "device_id"),
    "deployments": (DeploymentRecord, "deployment_id"),
}

_SAFE_COMPONENT = re.compile(r"[^a-z0-9-]+")


def hash_token(token: str) -> str:
    return hashlib.sha256(token.encode("utf-8")).hexdigest()


def new_id(prefix: str) -> str:
    return f"{prefix}-{uuid.uuid4().hex[:12]}"


class DocumentStore:
    """Collection CRUD with uniqueness and referential checks.

    Thread-safe: one re-entrant lock serializes writers; readers take the
    same lock briefly and return copies.
    """

    def __init__(self, data_dir: str | Path):
        self._dir = Path(data_dir)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._owner_locks: dict[str, threading.Lock] = {}
        self._data: dict[str, dict[str, dict]] = {name: {} for name in COLLECTIONS}
        self._audit_path = self._dir / "status_audit.jsonl"
        self._load()

    # -- persistence --------------------------------------------------------

    def _path(self, collection: str) -> Path:
        return self._dir / f"{collection}.json"

    def _load(self) -> None:
        for name in COLLECTIONS:
            p = self._path(name)
            if p.exists():
                self._data[name] = json.loads(p.read_text(encoding="utf-8"))

    def _flush(self, collection: str) -> None:
        p = self._path(collection)
        tmp = p.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self._data[collection], indent=1), encoding="utf-8")
        os.replace(tmp, p)

    # -- generic CRUD -------------------------------------------------------

    def _check(self, collection: str):
        if collection not in COLLECTIONS:
            raise UnknownCollection(collection)
        return COLLECTIONS[collection]

    def put_record(self, collection: str, record) -> str:
        """Insert a record; returns its id. Enforces uniqueness and references."""
        cls, key_field = self._check(collection)
        if isinstance(record, dict):
            record = cls(**record)
        if not isinstance(record, cls):
            raise StoreError(f"{collection} expects {cls.__name__}, got {type(record).__name__}")
        self._validate(collection, record)
        with self._lock:
            key = getattr(record, key_field)
            if key in self._data[collection]:
                raise DuplicateKey(f"{collection}:{key}")
            self._check_references(collection, record)
            if collection == "deployments":
                self._check_name_version_unique(record)
            self._data[collection][key] = _to_doc(record)
            self._flush(collection)
            return key

    def get(self, collection: str, key: str):
        cls, _ = self._check(collection)
        with self._lock:
            doc = self._data[collection].get(key)
            if doc is None:
                raise NotFound(f"{collection}:{key}")
            return _from_doc(cls, doc)

    def exists(self, collection: str, key: str) -> bool:
        self._check(collection)
        with self._lock:
            return key in self._data[collection]

    def all(self, collection: str) -> list:
        cls, _ = self._check(collection)
        with self._lock:
            return [_from_doc(cls, d) for d in self._data[collection].values()]

    def update(self, collection: str, key: str, **changes):
        cls, _ = self._check(collection)
        with self._lock:
            doc = self._data[collection].get(key)
            if doc is None:
                raise NotFound(f"{collection}:{key}")
            record = _from_doc(cls, doc)
            for name, value in changes.items():
                if not hasattr(record, name):
                    raise StoreError(f"{cls.__name__} has no field {name!r}")
                setattr(record, name, value)
            if hasattr(record, "updated_at"):
                record.updated_at = time.time()
            self._validate(collection, record)
            self._data[collection][key] = _to_doc(record)
            self._flush(collection)
            return record

    def delete(self, collection: str, key: str) -> None:
        self._check(collection)
        with self._lock:
            if key not in self._data[collection]:
                raise NotFound(f"{collection}:{key}")
            del self._data[collection][key]
            self._flush(collection)

    # -- constraints --------------------------------------------------------

    def _validate(self, collection: str, record) -> None:
        if isinstance(record, GroupRecord):
            if record.max_pods_per_deployment < 1:
                raise StoreError("max_pods_per_deployment must be >= 1")
            if record.max_deployments < 1:
                raise StoreError("max_deployments must be >= 1")
        elif isinstance(record, DeploymentRecord):
            if record.replicas_desired < 0:
                raise StoreError("replicas_desired must be >= 0")
            if record.worker_count < 1:
                raise StoreError("worker_count must be >= 1")

    def _check_references(self, collection: str, record) -> None:
        if isinstance(record, UserRecord):
            if record.group not in self._data["groups"]:
                raise ReferentialError(f"group {record.group!r} does not exist")
        elif isinstance(record, (DeviceRecord, DeploymentRecord)):
            if record.owner not in self._data["users"]:
                raise ReferentialError(f"user {record.owner!r} does not exist")

    def _check_name_version_unique(self, record: DeploymentRecord) -> None:
        for doc in self._data["deployments"].values():
            if (doc["owner"], doc["package_name"], doc["version"]) == \
                    (record.owner, record.package_name, record.version) \
                    and doc["status"] != StatusPhase.DELETED.value:
                raise DuplicateKey(
                    f"deployment {record.package_name}:{record.version} already exists "
                    f"for {record.owner}")

    # -- deployments --------------------------------------------------------

    def transition_status(self, deployment_id: str, to: StatusPhase) -> DeploymentRecord:
        """Move a deployment along the status graph; append to the audit log."""
        to = StatusPhase(to)
        with self._lock:
            doc = self._data["deployments"].get(deployment_id)
            if doc is None:
                raise NotFound(f"deployments:{deployment_id}")
            src = StatusPhase(doc["status"])
            if (src, to) not in LEGAL_TRANSITIONS:
                raise IllegalTransition(deployment_id, src, to)
            record = self.update("deployments", deployment_id, status=to)
            with self._audit_path.open("a", encoding="utf-8") as f:
                f.write(json.dumps({"deployment_id": deployment_id, "from": src.value,
                                    "to": to.value, "at": time.time()}) + "\n")
            return record

    def audit_log(self, deployment_id: str | None = None) -> list[dict]:
        if not self._audit_path.exists():
            return []
        entries = [json.loads(line) for line in
                   self._audit_path.read_text(encoding="utf-8").splitlines() if line]
        if deployment_id is not None:
            entries = [e for e in entries if e["deployment_id"] == deployment_id]
        return entries

    def check_quota(self, owner: str, requested_replicas: int,
                    new_deployment: bool = False) -> tuple[bool, str]:
        """Returns (allow, reason); reason is empty when allowed."""
        with self._lock:
            user_doc = self._data["users"].get(owner)
            if user_doc is None:
                raise NotFound(f"users:{owner}")
            group = self.get("groups", user_doc["group"])
            if requested_replicas > group.max_pods_per_deployment:
                return False, "pod quota exceeded"
            if new_deployment:
                active = sum(1 for d in self._data["deployments"].values()
                             if d["owner"] == owner
                             and d["status"] != StatusPhase.DELETED.value)
                if active + 1 > group.max_deployments:
                    return False, "deployment quota exceeded"
            return True, ""

    def owner_lock(self, owner: str) -> threading.Lock:
        """Mutual exclusion for quota-check-then-create sequences per owner."""
        with self._lock:
            return self._owner_locks.setdefault(owner, threading.Lock())

    def search_deployments(self, query: str = "", include_deleted: bool = False,
                           owner: str | None = None) -> list[DeploymentRecord]:
        """Substring match over package name and owner; DELETED excluded by default."""
        with self._lock:
            out = []
            for doc in self._data["deployments"].values():
                if not include_deleted and doc["status"] == StatusPhase.DELETED.value:
                    continue
                if owner is not None and doc["owner"] != owner:
                    continue
                if query and query not in doc["package_name"] and query not in doc["owner"]:
                    continue
                out.append(_from_doc(DeploymentRecord, doc))
            return sorted(out, key=lambda d: d.created_at)

    # -- debugging ----------------------------------------------------------

    def export_jsonl(self, out_dir: str | Path) -> list[Path]:
        """Dump each collection as line-delimited JSON; returns written paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        with self._lock:
            for name in COLLECTIONS:
                p = out / f"{name}.jsonl"
                with p.open("w", encoding="utf-8") as f:
                    for doc in self._data[name].values():
                        f.write(json.dumps(doc) + "\n")
                written.append(p)
        return written


def _to_doc(record) -> dict:
    doc = asdict(record)
    for k, v in doc.items():
        if isinstance(v, Enum):
            doc[k] = v.value
    return doc


def _from_doc(cls, doc: dict):
    record = cls(**doc)
    if hasattr(record, "status"):
        record.status = StatusPhase(record.status)
    if hasattr(record, "services"):
        record.services = [tuple(s) for s in record.services]
    return record
