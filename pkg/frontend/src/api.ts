// Thin typed client for the control API. The fetch implementation is
// injectable so tests can run without a server or a DOM.

import type {
  DeploymentDoc,
  OpenApiDocument,
  ScaleResult,
  UploadResult,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(`${status}: ${detail}`);
  }
}

async function fail(response: Response): Promise<never> {
  let detail = response.statusText;
  try {
    const body = (await response.json()) as { detail?: string };
    if (body.detail) detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(response.status, detail);
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly token: string,
    private readonly fetchFn: FetchLike = fetch,
  ) {}

  private headers(): Record<string, string> {
    return { Authorization: `Bearer ${this.token}` };
  }

  private async getJson<T>(path: string): Promise<T> {
    const r = await this.fetchFn(this.baseUrl + path, {
      headers: this.headers(),
    });
    if (!r.ok) await fail(r);
    return (await r.json()) as T;
  }

  listDeployments(includeDeleted = false): Promise<DeploymentDoc[]> {
    const qs = includeDeleted ? "?include_deleted=true" : "";
    return this.getJson(`/api/deployments${qs}`);
  }

  getDeployment(id: string): Promise<DeploymentDoc> {
    return this.getJson(`/api/deployments/${id}`);
  }

  async upload(
    archive: Blob,
    replicas?: number,
    workers?: number,
  ): Promise<UploadResult> {
    const form = new FormData();
    form.append("archive", archive, "package.zip");
    if (replicas !== undefined) form.append("replicas", String(replicas));
    if (workers !== undefined) form.append("workers", String(workers));
    const r = await this.fetchFn(`${this.baseUrl}/api/packages`, {
      method: "POST",
      headers: this.headers(),
      body: form,
    });
    if (!r.ok) await fail(r);
    return (await r.json()) as UploadResult;
  }

  async scale(
    id: string,
    replicas: number,
    workers?: number,
  ): Promise<ScaleResult> {
    const body: Record<string, number> = { replicas };
    if (workers !== undefined) body.workers = workers;
    const r = await this.fetchFn(`${this.baseUrl}/api/deployments/${id}/scale`, {
      method: "POST",
      headers: { ...this.headers(), "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!r.ok) await fail(r);
    return (await r.json()) as ScaleResult;
  }

  async teardown(id: string): Promise<void> {
    const r = await this.fetchFn(`${this.baseUrl}/api/deployments/${id}`, {
      method: "DELETE",
      headers: this.headers(),
    });
    if (!r.ok && r.status !== 204) await fail(r);
  }

  async logs(
    id: string,
    stage: "build" | "deploy" | "runtime",
  ): Promise<string> {
    const r = await this.fetchFn(
      `${this.baseUrl}/api/deployments/${id}/logs?stage=${stage}`,
      { headers: this.headers() },
    );
    if (!r.ok) await fail(r);
    return r.text();
  }

  openapi(id: string): Promise<OpenApiDocument> {
    return this.getJson(`/api/deployments/${id}/openapi.json`);
  }
}
