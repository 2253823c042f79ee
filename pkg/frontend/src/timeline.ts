// Pipeline timeline derivation and the 1 s status poller behind it.

import type { ApiClient } from "./api.js";
import type { DeploymentDoc, DeploymentStatus } from "./types.js";

export const PIPELINE_ORDER: DeploymentStatus[] = [
  "QUEUED",
  "VALIDATING",
  "GENERATING",
  "BUILDING",
  "DEPLOYING",
  "RUNNING",
];

export type StepState = "done" | "current" | "pending" | "failed";

export interface TimelineStep {
  phase: DeploymentStatus;
  state: StepState;
}

/** Map a deployment status onto a per-phase progress view. */
export function timelineFor(status: DeploymentStatus): TimelineStep[] {
  if (status === "FAILED" || status === "DELETED") {
    // terminal off-pipeline states: everything reached so far is unknown,
    // so show the whole pipeline struck through
    return PIPELINE_ORDER.map((phase) => ({
      phase,
      state: status === "FAILED" ? "failed" : "done",
    }));
  }
  const position = PIPELINE_ORDER.indexOf(status);
  return PIPELINE_ORDER.map((phase, i) => ({
    phase,
    state: i < position ? "done" : i === position ? "current" : "pending",
  }));
}

export function isSettled(status: DeploymentStatus): boolean {
  return status === "RUNNING" || status === "FAILED" || status === "DELETED";
}

export interface PollerTimer {
  set(fn: () => void, ms: number): unknown;
  clear(handle: unknown): void;
}

const realTimer: PollerTimer = {
  set: (fn, ms) => setInterval(fn, ms),
  clear: (handle) => clearInterval(handle as Parameters<typeof clearInterval>[0]),
};

/**
 * Poll one deployment every second until it settles, pushing each
 * snapshot to the listener. The timer is injectable for tests.
 */
export class DeploymentPoller {
  private handle: unknown = null;
  private inFlight = false;

  constructor(
    private readonly api: ApiClient,
    private readonly deploymentId: string,
    private readonly onUpdate: (doc: DeploymentDoc) => void,
    private readonly onError: (err: unknown) => void = () => undefined,
    private readonly intervalMs = 1000,
    private readonly timer: PollerTimer = realTimer,
  ) {}

  start(): void {
    if (this.handle !== null) return;
    this.handle = this.timer.set(() => void this.tick(), this.intervalMs);
    void this.tick();
  }

  stop(): void {
    if (this.handle !== null) {
      this.timer.clear(this.handle);
      this.handle = null;
    }
  }

  async tick(): Promise<void> {
    if (this.inFlight) return; // never stack requests on a slow server
    this.inFlight = true;
    try {
      const doc = await this.api.getDeployment(this.deploymentId);
      this.onUpdate(doc);
      if (isSettled(doc.status)) this.stop();
    } catch (err) {
      this.onError(err);
    } finally {
      this.inFlight = false;
    }
  }
}
