// Payload shapes of the control API.

export type DeploymentStatus =
  | "QUEUED"
  | "VALIDATING"
  | "GENERATING"
  | "BUILDING"
  | "DEPLOYING"
  | "RUNNING"
  | "FAILED"
  | "DELETED";

export interface ServiceEntry {
  function: string;
  path: string;
}

export interface PodView {
  pod_id: string;
  state: string;
  endpoint: string;
  restarts: number;
  workers: number;
}

export interface DeploymentDoc {
  deployment_id: string;
  owner: string;
  namespace: string;
  package_name: string;
  version: string;
  status: DeploymentStatus;
  replicas_desired: number;
  worker_count: number;
  services: ServiceEntry[];
  pods: PodView[];
  build_phase: string | null;
  created_at: number;
  updated_at: number;
}

export interface UploadResult {
  deployment_id: string;
  status: DeploymentStatus;
}

export interface ScaleResult {
  deployment_id: string;
  status: DeploymentStatus;
  replicas_desired: number;
  worker_count: number;
}

// The slice of an OpenAPI 3.0 document the invoke panel consumes.
export interface OpenApiDocument {
  openapi: string;
  info: { title: string; version: string };
  servers: { url: string }[];
  paths: Record<string, Record<string, OpenApiOperation>>;
}

export interface OpenApiOperation {
  operationId?: string;
  parameters?: {
    name: string;
    in: string;
    required?: boolean;
    schema?: { type?: string; format?: string };
  }[];
  requestBody?: {
    content: Record<
      string,
      { schema?: { properties?: Record<string, { type?: string; format?: string }> } }
    >;
  };
  responses: Record<string, { content?: Record<string, unknown> }>;
}
