"""OpenAPI 3.0 document generation and template-based client stubs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template

from .manifest import HttpMethod, Manifest, ParamType, ReturnKind

_PARAM_SCHEMAS = {
    ParamType.INTEGER: {"type": "integer"},
    ParamType.FLOAT: {"type": "number", "format": "float"},
    ParamType.STRING: {"type": "string"},
    ParamType.BOOLEAN: {"type": "boolean"},
}

_FUNCTION_MARKER = "### FUNCTION ###\n"

TEMPLATES = {
    "python": "client_python.py.tmpl",
    "javascript": "client_javascript.js.tmpl",
}


class UnknownTemplate(Exception):
    pass


@dataclass(frozen=True)
class InterfaceDocument:
    document: dict

    def to_json(self) -> str:
        return json.dumps(self.document, indent=2, sort_keys=True)


@dataclass(frozen=True)
class ClientStub:
    language: str
    source: str


def generate_openapi(manifest: Manifest, base_url: str) -> InterfaceDocument:
    """Describe every function of the package as an OpenAPI 3.0 path.

    Deterministic: equal manifests and base URLs yield byte-identical
    serializations.
    """
    paths: dict = {}
    for _file, fn in manifest.functions():
        operation: dict = {
            "operationId": fn.name,
            "responses": {
                "200": _response_for(fn.returns),
                "422": {"description": "parameter validation failed"},
            },
        }
        if fn.http_method is HttpMethod.GET:
            operation["parameters"] = [
                {"name": name, "in": "query", "required": True,
                 "schema": dict(_PARAM_SCHEMAS[ptype])}
                for name, ptype in fn.params
            ]
        else:
            body = _request_body_for(fn)
            if body is not None:
                operation["requestBody"] = body
        paths[f"/{fn.name}"] = {fn.http_method.value.lower(): operation}

    document = {
        "openapi": "3.0.3",
        "info": {"title": manifest.name, "version": manifest.version},
        "servers": [{"url": base_url}],
        "paths": paths,
    }
    return InterfaceDocument(document=document)


def _response_for(returns: ReturnKind) -> dict:
    if returns is ReturnKind.FILE:
        return {
            "description": "file result",
            "content": {"application/octet-stream": {
                "schema": {"type": "string", "format": "binary"}}},
        }
    return {
        "description": "text result",
        "content": {"text/plain": {"schema": {"type": "string"}}},
    }


def _request_body_for(fn) -> dict | None:
    properties: dict = {}
    required: list[str] = []
    for part in fn.file_params:
        properties[part] = {"type": "string", "format": "binary"}
        required.append(part)
    for name, ptype in fn.params:
        properties[name] = dict(_PARAM_SCHEMAS[ptype])
        required.append(name)
    if not properties:
        return None
    content_type = ("multipart/form-data" if fn.file_params
                    else "application/x-www-form-urlencoded")
    schema: dict = {"type": "object", "properties": properties,
                    "required": required}
    return {"required": True, "content": {content_type: {"schema": schema}}}


def _load_template(template: str, template_dir: str | Path | None) -> str:
    if template_dir is not None:
        path = Path(template_dir) / f"{template}.tmpl"
        if not path.is_file():
            raise UnknownTemplate(template)
        return path.read_text(encoding="utf-8")
    filename = TEMPLATES.get(template)
    if filename is None:
        raise UnknownTemplate(template)
    return (resources.files("podbay") / "templates" / filename).read_text(
        encoding="utf-8")


def generate_client_stub(doc: InterfaceDocument, template: str,
                         template_dir: str | Path | None = None) -> ClientStub:
    """Render a callable-per-function client from a stub template.

    A template file has a module header and a per-function block separated
    by a ``### FUNCTION ###`` line; both use ``$placeholder`` substitution.
    Extra templates are drop-in files in ``template_dir``.
    """
    text = _load_template(template, template_dir)
    if _FUNCTION_MARKER in text:
        header_tmpl, fn_tmpl = text.split(_FUNCTION_MARKER, 1)
    else:
        header_tmpl, fn_tmpl = text, ""

    document = doc.document
    base_url = document.get("servers", [{"url": ""}])[0]["url"]
    blocks = []
    for path, methods in document.get("paths", {}).items():
        for method, operation in methods.items():
            blocks.append(_render_function(fn_tmpl, path, method, operation))
    header = Template(header_tmpl).substitute(
        title=document["info"]["title"],
        version=document["info"]["version"],
        base_url=base_url,
    )
    return ClientStub(language=template, source=header + "".join(blocks))


def _operation_arguments(path: str, method: str, operation: dict):
    """Extract (field names, file-part names, returns-binary) for a stub."""
    fields: list[str] = []
    files: list[str] = []
    for param in operation.get("parameters", []):
        if param.get("in") == "query":
            fields.append(param["name"])
    body = operation.get("requestBody", {})
    for content in body.get("content", {}).values():
        schema = content.get("schema", {})
        for name, prop in schema.get("properties", {}).items():
            if prop.get("format") == "binary":
                files.append(name)
            else:
                fields.append(name)
    ok = operation.get("responses", {}).get("200", {})
    binary = "application/octet-stream" in ok.get("content", {})
    return fields, files, binary


def _render_function(fn_tmpl: str, path: str, method: str, operation: dict) -> str:
    fields, files, binary = _operation_arguments(path, method, operation)
    name = operation.get("operationId") or path.strip("/").replace("/", "_")
    signature = ", ".join(files + fields)

    data_map = ", ".join(f'"{f}": str({f})' for f in fields)
    files_map = ", ".join(f'"{f}": {f}' for f in files)
    if method.upper() == "GET":
        py_args = f", params={{{data_map}}}" if fields else ""
    else:
        py_args = ""
        if fields:
            py_args += f", data={{{data_map}}}"
        if files:
            py_args += f", files={{{files_map}}}"

    if method.upper() == "GET":
        js_setup = "\n".join(
            f'  url.searchParams.set("{f}", String({f}));' for f in fields)
        js_body = ""
    elif fields or files:
        lines = ["  const form = new FormData();"]
        lines += [f'  form.append("{f}", {f});' for f in files]
        lines += [f'  form.append("{f}", String({f}));' for f in fields]
        js_setup = "\n".join(lines)
        js_body = ", body: form"
    else:
        js_setup = ""
        js_body = ""

    return Template(fn_tmpl).substitute(
        name=name,
        path=path,
        method=method.upper(),
        signature=signature,
        py_args=py_args,
        js_setup=js_setup,
        js_body=js_body,
        result="resp.content" if binary else "resp.text",
        js_result="await resp.arrayBuffer()" if binary else "await resp.text()",
    )
