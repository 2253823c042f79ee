// Build invocation forms from a deployment's OpenAPI document.

import type { OpenApiDocument, OpenApiOperation } from "./types.js";

export type FieldKind = "text" | "number" | "checkbox" | "file";

export interface FormField {
  name: string;
  kind: FieldKind;
  required: boolean;
}

export interface InvokeForm {
  functionName: string;
  method: string;
  url: string;
  fields: FormField[];
  returnsFile: boolean;
}

function fieldKind(schema?: { type?: string; format?: string }): FieldKind {
  if (schema?.format === "binary") return "file";
  if (schema?.type === "integer" || schema?.type === "number") return "number";
  if (schema?.type === "boolean") return "checkbox";
  return "text";
}

function fieldsOf(operation: OpenApiOperation): FormField[] {
  const fields: FormField[] = [];
  for (const param of operation.parameters ?? []) {
    if (param.in !== "query") continue;
    fields.push({
      name: param.name,
      kind: fieldKind(param.schema),
      required: param.required ?? false,
    });
  }
  const content = operation.requestBody?.content ?? {};
  for (const media of Object.values(content)) {
    for (const [name, prop] of Object.entries(media.schema?.properties ?? {})) {
      fields.push({ name, kind: fieldKind(prop), required: true });
    }
  }
  return fields;
}

/** One form description per function in the document, in path order. */
export function formsFromDocument(doc: OpenApiDocument): InvokeForm[] {
  const base = doc.servers[0]?.url ?? "";
  const forms: InvokeForm[] = [];
  for (const [path, operations] of Object.entries(doc.paths)) {
    for (const [method, operation] of Object.entries(operations)) {
      const ok = operation.responses["200"];
      forms.push({
        functionName: operation.operationId ?? path.replace(/^\//, ""),
        method: method.toUpperCase(),
        url: base + path,
        fields: fieldsOf(operation),
        returnsFile: "application/octet-stream" in (ok?.content ?? {}),
      });
    }
  }
  return forms;
}

export interface PreparedRequest {
  url: string;
  method: string;
  query: [string, string][];
  body: [string, string | Blob][] | null;
}

/**
 * Turn filled-in form values into a request plan: GET fields become query
 * parameters, POST fields become multipart/urlencoded body entries.
 */
export function prepareRequest(
  form: InvokeForm,
  values: Record<string, string | Blob>,
): PreparedRequest {
  for (const field of form.fields) {
    if (field.required && !(field.name in values)) {
      throw new Error(`missing required field ${field.name}`);
    }
  }
  const entries = form.fields
    .filter((f) => f.name in values)
    .map((f): [string, string | Blob] => [f.name, values[f.name]]);
  if (form.method === "GET") {
    return {
      url: form.url,
      method: "GET",
      query: entries.map(([k, v]) => [k, String(v)]),
      body: null,
    };
  }
  return { url: form.url, method: form.method, query: [], body: entries };
}
