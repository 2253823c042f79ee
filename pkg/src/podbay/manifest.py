"""Parsing and validation of package manifests and upload archives.

A package travels as a ZIP file: the manifest (``srca.yaml``) at the
archive root and handler source files under ``functions/``. The manifest
declares the package name/version, the handler files and their typed
functions, the packages to install at build time, and the single sidecar
command launched next to each pod.
"""

from __future__ import annotations

import io
import re
import zipfile
from dataclasses import dataclass
from enum import Enum

import yaml

MANIFEST_FILENAME = "srca.yaml"
FUNCTIONS_DIR = "functions"

NAME_RE = re.compile(r"^[a-z][a-z0-9_-]{0,62}$")
IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
# package-manager names: letters, digits, and the separators the three
# managers use; deliberately excludes shell metacharacters.
PKG_NAME_RE = re.compile(r"^[A-Za-z0-9@/_.+:~^=<>-]+$")
_INT_RE = re.compile(r"^[+-]?[0-9]+$")


class ManifestError(Exception):
    """Base class for manifest-level failures."""


class ManifestSyntaxError(ManifestError):
    """The manifest document is not well-formed YAML."""


class SchemaError(ManifestError):
    """The manifest parses but violates the schema.

    ``path`` locates the offending node, e.g. ``files[0].functions[0].returns``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ArchiveError(ManifestError):
    """The upload is not a readable ZIP archive."""


class CoercionError(ManifestError):
    """Base class for request-parameter coercion failures."""

    def __init__(self, param: str, message: str):
        self.param = param
        super().__init__(message)


class MissingParam(CoercionError):
    def __init__(self, param: str):
        super().__init__(param, f"missing required parameter {param!r}")


class TypeMismatch(CoercionError):
    def __init__(self, param: str, expected: str, raw: str):
        self.expected = expected
        super().__init__(param, f"parameter {param!r} is not a valid {expected}: {raw!r}")


class UnexpectedParam(CoercionError):
    def __init__(self, param: str):
        super().__init__(param, f"unexpected parameter {param!r}")


class ParamType(str, Enum):
    INTEGER = "integer"
    FLOAT = "float"
    STRING = "string"
    BOOLEAN = "boolean"


class ReturnKind(str, Enum):
    STRING = "string"
    FILE = "file"


class HttpMethod(str, Enum):
    GET = "GET"
    POST = "POST"


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    params: tuple[tuple[str, ParamType], ...]  # ordered (name, type)
    file_params: tuple[str, ...]               # ordered multipart file-part names
    http_method: HttpMethod
    returns: ReturnKind

    @property
    def param_map(self) -> dict[str, ParamType]:
        return dict(self.params)


@dataclass(frozen=True)
class FileSpec:
    file_name: str
    functions: tuple[FunctionSpec, ...]


@dataclass(frozen=True)
class InstallSpec:
    apt_get: tuple[str, ...] = ()
    pip: tuple[str, ...] = ()
    npm: tuple[str, ...] = ()

    def is_empty(self) -> bool:
        return not (self.apt_get or self.pip or self.npm)


@dataclass(frozen=True)
class Manifest:
    name: str
    version: str
    environment: str
    files: tuple[FileSpec, ...]
    packages: InstallSpec
    command: str
    warnings: tuple[str, ...] = ()  # unknown-key notices, not part of identity

    def functions(self) -> list[tuple[FileSpec, FunctionSpec]]:
        return [(f, fn) for f in self.files for fn in f.functions]


@dataclass(frozen=True)
class Issue:
    severity: str  # "ERROR" | "WARNING"
    code: str
    message: str
    location: str


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[Issue, ...]

    @property
    def ok(self) -> bool:
        return not any(i.severity == "ERROR" for i in self.issues)

    def errors(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "ERROR"]


_TOP_LEVEL_KEYS = {"name", "version", "environment", "files", "packages", "command",
                   "apt-get", "pip", "npm"}
_FUNCTION_KEYS = {"name", "arguments", "http-method", "returns"}


def _require(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise SchemaError(path, f"missing required key {key!r}")
    return mapping[key]


def _as_str(value, path: str) -> str:
    if value is None:
        return ""
    if isinstance(value, (str, int, float, bool)):
        return str(value)
    raise SchemaError(path, f"expected a string, got {type(value).__name__}")


def _parse_pkg_list(value, path: str) -> tuple[str, ...]:
    """Accept a space-separated string, a list, or nothing."""
    if value is None:
        return ()
    if isinstance(value, str):
        names = value.split()
    elif isinstance(value, list):
        names = [_as_str(v, f"{path}[{i}]") for i, v in enumerate(value)]
    else:
        raise SchemaError(path, f"expected a string or list, got {type(value).__name__}")
    for i, n in enumerate(names):
        if not PKG_NAME_RE.match(n):
            raise SchemaError(f"{path}[{i}]", f"invalid package name {n!r}")
    return tuple(names)


def _parse_function(raw, path: str) -> FunctionSpec:
    if not isinstance(raw, dict):
        raise SchemaError(path, "function entry must be a mapping")
    name = _as_str(_require(raw, "name", path), f"{path}.name")
    if not IDENT_RE.match(name):
        raise SchemaError(f"{path}.name", f"invalid function name {name!r}")

    params: list[tuple[str, ParamType]] = []
    file_params: list[str] = []
    arguments = raw.get("arguments") or {}
    if not isinstance(arguments, dict):
        raise SchemaError(f"{path}.arguments", "must be a mapping")
    raw_params = arguments.get("params") or {}
    if not isinstance(raw_params, dict):
        raise SchemaError(f"{path}.arguments.params", "must be a mapping")
    for pname, ptype in raw_params.items():
        ppath = f"{path}.arguments.params.{pname}"
        if not IDENT_RE.match(str(pname)):
            raise SchemaError(ppath, f"invalid parameter name {pname!r}")
        type_name = _as_str(ptype, ppath)
        try:
            params.append((str(pname), ParamType(type_name)))
        except ValueError:
            raise SchemaError(ppath, f"unknown parameter type {type_name!r}") from None
    raw_files = arguments.get("files")
    if raw_files is not None:
        # Fig-style: a mapping of part name -> (ignored) content-type hint,
        # usually empty; a plain list is accepted too.
        if isinstance(raw_files, dict):
            file_params = [str(k) for k in raw_files]
        elif isinstance(raw_files, list):
            file_params = [_as_str(v, f"{path}.arguments.files[{i}]") for i, v in enumerate(raw_files)]
        else:
            raise SchemaError(f"{path}.arguments.files", "must be a mapping or list")
        for i, fp in enumerate(file_params):
            if not IDENT_RE.match(fp):
                raise SchemaError(f"{path}.arguments.files.{fp}", f"invalid file-part name {fp!r}")

    seen = set()
    for pname, _ in params:
        if pname in seen:
            raise SchemaError(f"{path}.arguments.params.{pname}", "duplicate parameter name")
        seen.add(pname)
    for fp in file_params:
        if fp in seen:
            raise SchemaError(f"{path}.arguments.files.{fp}",
                              "file-part name collides with a parameter name")
        seen.add(fp)

    method_raw = _as_str(raw.get("http-method", "post"), f"{path}.http-method")
    try:
        method = HttpMethod(method_raw.upper())
    except ValueError:
        raise SchemaError(f"{path}.http-method", f"unknown http-method {method_raw!r}") from None

    returns_raw = _as_str(_require(raw, "returns", path), f"{path}.returns")
    try:
        returns = ReturnKind(returns_raw.lower())
    except ValueError:
        raise SchemaError(f"{path}.returns", f"unknown returns value {returns_raw!r}") from None

    if method is HttpMethod.GET and file_params:
        raise SchemaError(f"{path}.http-method", "functions with file parts must use POST")

    unknown = set(raw) - _FUNCTION_KEYS
    if unknown:
        raise SchemaError(path, f"unknown keys: {sorted(unknown)}")

    return FunctionSpec(name=name, params=tuple(params), file_params=tuple(file_params),
                        http_method=method, returns=returns)


def _parse_file(raw, path: str) -> FileSpec:
    if not isinstance(raw, dict):
        raise SchemaError(path, "file entry must be a mapping")
    file_name = _as_str(_require(raw, "file_name", path), f"{path}.file_name")
    parts = file_name.replace("\\", "/").split("/")
    if not file_name or any(p in ("", ".", "..") for p in parts):
        raise SchemaError(f"{path}.file_name", f"invalid file name {file_name!r}")
    raw_fns = _require(raw, "functions", path)
    if not isinstance(raw_fns, list) or not raw_fns:
        raise SchemaError(f"{path}.functions", "must be a nonempty list")
    functions = tuple(_parse_function(fn, f"{path}.functions[{i}]")
                      for i, fn in enumerate(raw_fns))
    return FileSpec(file_name=file_name, functions=functions)


def parse_manifest(text: str) -> Manifest:
    """Parse a manifest document into a :class:`Manifest`.

    Unknown top-level keys are collected as warnings rather than rejected,
    so newer manifests degrade gracefully.

    Raises:
        ManifestSyntaxError: malformed YAML.
        SchemaError: missing/invalid keys or values; carries the offending path.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ManifestSyntaxError(str(e)) from e
    if not isinstance(doc, dict):
        raise SchemaError("$", "manifest must be a mapping")

    name = _as_str(_require(doc, "name", "$"), "name").strip().lower()
    if not NAME_RE.match(name):
        raise SchemaError("name", f"invalid package name {name!r}")
    version = _as_str(_require(doc, "version", "$"), "version").strip()
    if not version:
        raise SchemaError("version", "version must be nonempty")
    environment = _as_str(doc.get("environment", ""), "environment").strip()

    raw_files = _require(doc, "files", "$")
    if not isinstance(raw_files, list) or not raw_files:
        raise SchemaError("files", "must be a nonempty list")
    files = tuple(_parse_file(f, f"files[{i}]") for i, f in enumerate(raw_files))

    seen_files: set[str] = set()
    for i, f in enumerate(files):
        if f.file_name in seen_files:
            raise SchemaError(f"files[{i}].file_name", f"duplicate file name {f.file_name!r}")
        seen_files.add(f.file_name)
    # function names double as routes, so they are unique across files
    seen_fns: set[str] = set()
    for i, f in enumerate(files):
        for j, fn in enumerate(f.functions):
            if fn.name in seen_fns:
                raise SchemaError(f"files[{i}].functions[{j}].name",
                                  f"duplicate function {fn.name!r}")
            seen_fns.add(fn.name)

    # The packages section is accepted both nested under ``packages:`` and
    # with the three manager keys at top level (the flat layout some
    # hand-written manifests use).
    pkg_section = doc.get("packages")
    if pkg_section is not None and not isinstance(pkg_section, dict):
        raise SchemaError("packages", "must be a mapping")
    pkg_section = pkg_section or {}
    unknown_pkg = set(pkg_section) - {"apt-get", "pip", "npm"}
    if unknown_pkg:
        raise SchemaError("packages", f"unknown package managers: {sorted(unknown_pkg)}")

    def _mgr(key: str) -> tuple[str, ...]:
        value = pkg_section.get(key)
        if value is None:
            value = doc.get(key)
        return _parse_pkg_list(value, f"packages.{key}")

    packages = InstallSpec(apt_get=_mgr("apt-get"), pip=_mgr("pip"), npm=_mgr("npm"))
    command = _as_str(doc.get("command", ""), "command").strip()

    warnings = tuple(f"unknown top-level key {k!r}" for k in doc if k not in _TOP_LEVEL_KEYS)
    return Manifest(name=name, version=version, environment=environment,
                    files=files, packages=packages, command=command, warnings=warnings)


def serialize_manifest(manifest: Manifest) -> str:
    """Render a manifest back to its canonical document form.

    ``parse_manifest(serialize_manifest(m))`` equals ``m`` (warnings aside);
    serialization of that re-parse is a fixed point.
    """
    doc: dict = {
        "name": manifest.name,
        "version": manifest.version,
        "environment": manifest.environment,
        "files": [],
        "packages": {
            "apt-get": list(manifest.packages.apt_get),
            "pip": list(manifest.packages.pip),
            "npm": list(manifest.packages.npm),
        },
        "command": manifest.command,
    }
    for f in manifest.files:
        entry: dict = {"file_name": f.file_name, "functions": []}
        for fn in f.functions:
            arguments: dict = {}
            if fn.file_params:
                arguments["files"] = {fp: None for fp in fn.file_params}
            if fn.params:
                arguments["params"] = {n: t.value for n, t in fn.params}
            fn_doc: dict = {"name": fn.name}
            if arguments:
                fn_doc["arguments"] = arguments
            fn_doc["http-method"] = fn.http_method.value.lower()
            fn_doc["returns"] = fn.returns.value
            entry["functions"].append(fn_doc)
        doc["files"].append(entry)
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)


def validate_archive(archive: bytes) -> ValidationReport:
    """Check an upload archive: readable ZIP, manifest present and valid,
    every declared handler file present under ``functions/``.

    Pure: the same bytes always yield the same report.

    Raises:
        ArchiveError: the bytes are not a readable ZIP container.
    """
    try:
        zf = zipfile.ZipFile(io.BytesIO(archive))
        bad = zf.testzip()
    except (zipfile.BadZipFile, OSError) as e:
        raise ArchiveError(f"unreadable archive: {e}") from e
    if bad is not None:
        raise ArchiveError(f"corrupt archive member: {bad}")

    names = set(zf.namelist())
    issues: list[Issue] = []

    if MANIFEST_FILENAME not in names:
        issues.append(Issue("ERROR", "MISSING_MANIFEST",
                            f"no {MANIFEST_FILENAME} at archive root", MANIFEST_FILENAME))
        return ValidationReport(tuple(issues))

    try:
        text = zf.read(MANIFEST_FILENAME).decode("utf-8")
        manifest = parse_manifest(text)
    except UnicodeDecodeError:
        issues.append(Issue("ERROR", "MANIFEST_INVALID", "manifest is not UTF-8",
                            MANIFEST_FILENAME))
        return ValidationReport(tuple(issues))
    except ManifestSyntaxError as e:
        issues.append(Issue("ERROR", "MANIFEST_SYNTAX", str(e), MANIFEST_FILENAME))
        return ValidationReport(tuple(issues))
    except SchemaError as e:
        issues.append(Issue("ERROR", "MANIFEST_INVALID", str(e), e.path))
        return ValidationReport(tuple(issues))

    for w in manifest.warnings:
        issues.append(Issue("WARNING", "UNKNOWN_KEY", w, MANIFEST_FILENAME))

    declared = set()
    for f in manifest.files:
        member = f"{FUNCTIONS_DIR}/{f.file_name}"
        declared.add(member)
        if member not in names:
            issues.append(Issue("ERROR", "MISSING_FUNCTION_FILE",
                                f"declared file {f.file_name!r} not found in the archive",
                                member))

    for member in sorted(names):
        if member.startswith(f"{FUNCTIONS_DIR}/") and not member.endswith("/") \
                and member not in declared:
            issues.append(Issue("WARNING", "UNREFERENCED_FILE",
                                f"{member} is not referenced by the manifest", member))

    return ValidationReport(tuple(issues))


def read_manifest_from_archive(archive: bytes) -> Manifest:
    """Extract and parse the manifest of an already-validated archive."""
    try:
        zf = zipfile.ZipFile(io.BytesIO(archive))
        raw = zf.read(MANIFEST_FILENAME)
    except zipfile.BadZipFile as e:
        raise ArchiveError(f"not a readable archive: {e}") from e
    except KeyError as e:
        raise ArchiveError(f"{MANIFEST_FILENAME} missing from archive") from e
    return parse_manifest(raw.decode("utf-8"))


def coerce_params(spec: FunctionSpec, raw: dict[str, str]) -> dict[str, object]:
    """Convert decoded form/query fields to the function's declared types.

    Every declared parameter must be present; extra keys are rejected.
    Booleans accept exactly ``"true"`` and ``"false"``.
    """
    declared = spec.param_map
    for key in raw:
        if key not in declared:
            raise UnexpectedParam(key)
    out: dict[str, object] = {}
    for pname, ptype in spec.params:
        if pname not in raw:
            raise MissingParam(pname)
        out[pname] = coerce_value(pname, ptype, raw[pname])
    return out


def coerce_value(name: str, ptype: ParamType, raw: str) -> object:
    if ptype is ParamType.INTEGER:
        if not _INT_RE.match(raw.strip()):
            raise TypeMismatch(name, "integer", raw)
        return int(raw)
    if ptype is ParamType.FLOAT:
        try:
            return float(raw)
        except ValueError:
            raise TypeMismatch(name, "float", raw) from None
    if ptype is ParamType.BOOLEAN:
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise TypeMismatch(name, "boolean", raw)
    return raw
