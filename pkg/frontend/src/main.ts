// Dashboard entry point: wires the API client to the DOM. All logic that
// is worth testing lives in the sibling modules; this file only renders.

import { ApiClient } from "./api.js";
import { formsFromDocument, prepareRequest } from "./invokeform.js";
import { LogBuffer } from "./logbuffer.js";
import { clampReplicas, clampWorkers } from "./scale.js";
import { DeploymentPoller, timelineFor } from "./timeline.js";
import type { DeploymentDoc } from "./types.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function apiFromForm(): ApiClient {
  const base = el<HTMLInputElement>("api-url").value.replace(/\/$/, "");
  const token = el<HTMLInputElement>("api-token").value;
  return new ApiClient(base, token);
}

function renderTimeline(doc: DeploymentDoc): void {
  const steps = timelineFor(doc.status)
    .map((s) => `<li class="step ${s.state}">${s.phase}</li>`)
    .join("");
  el("timeline").innerHTML = `<ol>${steps}</ol>`;
}

function renderDeployments(docs: DeploymentDoc[]): void {
  const rows = docs
    .map(
      (d) => `
      <tr data-id="${d.deployment_id}">
        <td>${d.deployment_id}</td>
        <td>${d.package_name}:${d.version}</td>
        <td>${d.status}</td>
        <td>${d.pods.length}</td>
      </tr>`,
    )
    .join("");
  el("deployments").innerHTML =
    `<table><tr><th>id</th><th>package</th><th>status</th><th>pods</th></tr>${rows}</table>`;
}

async function refreshList(): Promise<void> {
  renderDeployments(await apiFromForm().listDeployments());
}

function watchDeployment(id: string): void {
  const poller = new DeploymentPoller(
    apiFromForm(),
    id,
    (doc) => {
      renderTimeline(doc);
      void refreshList();
    },
    (err) => {
      el("timeline").textContent = `poll error: ${String(err)}`;
    },
  );
  poller.start();
}

async function onUpload(): Promise<void> {
  const input = el<HTMLInputElement>("archive");
  const file = input.files?.[0];
  if (!file) return;
  const replicas = clampReplicas(Number(el<HTMLInputElement>("replicas").value));
  const workers = clampWorkers(Number(el<HTMLInputElement>("workers").value));
  const result = await apiFromForm().upload(file, replicas, workers);
  watchDeployment(result.deployment_id);
}

async function onScale(): Promise<void> {
  const id = el<HTMLInputElement>("scale-id").value;
  const replicas = clampReplicas(
    Number(el<HTMLInputElement>("scale-replicas").value),
  );
  await apiFromForm().scale(id, replicas);
  watchDeployment(id);
}

const logs = new LogBuffer();

async function onFetchLogs(): Promise<void> {
  const id = el<HTMLInputElement>("log-id").value;
  const stage = el<HTMLSelectElement>("log-stage")
    .value as "build" | "deploy" | "runtime";
  logs.replace(await apiFromForm().logs(id, stage));
  const pre = el<HTMLPreElement>("log-window");
  pre.textContent = logs.snapshot().join("\n");
  if (logs.follow) pre.scrollTop = pre.scrollHeight;
}

async function onShowFunctions(): Promise<void> {
  const id = el<HTMLInputElement>("invoke-id").value;
  const api = apiFromForm();
  const doc = await api.openapi(id);
  const panel = el("invoke-panel");
  panel.innerHTML = "";
  for (const form of formsFromDocument(doc)) {
    const container = document.createElement("form");
    container.innerHTML =
      `<strong>${form.functionName}</strong> ` +
      form.fields
        .map(
          (f) =>
            `<label>${f.name} <input name="${f.name}" ` +
            `type="${f.kind === "file" ? "file" : f.kind === "number" ? "number" : "text"}"></label>`,
        )
        .join(" ") +
      ` <button type="submit">invoke</button> <output></output>`;
    container.addEventListener("submit", (event) => {
      event.preventDefault();
      void (async () => {
        const values: Record<string, string | Blob> = {};
        for (const field of form.fields) {
          const input = container.elements.namedItem(
            field.name,
          ) as HTMLInputElement;
          values[field.name] =
            field.kind === "file" ? (input.files?.[0] ?? "") : input.value;
        }
        const plan = prepareRequest(form, values);
        const url = new URL(plan.url);
        for (const [k, v] of plan.query) url.searchParams.set(k, v);
        let body: FormData | undefined;
        if (plan.body) {
          body = new FormData();
          for (const [k, v] of plan.body) body.append(k, v);
        }
        const r = await fetch(url, { method: plan.method, body });
        const out = container.querySelector("output")!;
        out.textContent = form.returnsFile
          ? `${(await r.arrayBuffer()).byteLength} bytes`
          : await r.text();
      })();
    });
    panel.appendChild(container);
  }
}

export function init(): void {
  el("upload-btn").addEventListener("click", () => void onUpload());
  el("scale-btn").addEventListener("click", () => void onScale());
  el("log-btn").addEventListener("click", () => void onFetchLogs());
  el("log-follow").addEventListener("click", () => logs.toggleFollow());
  el("invoke-btn").addEventListener("click", () => void onShowFunctions());
  el("refresh-btn").addEventListener("click", () => void refreshList());
}

if (typeof document !== "undefined" && document.readyState !== "loading") {
  init();
} else if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", init);
}
