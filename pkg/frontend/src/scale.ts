// Scale-control helpers: clamp operator input to what the platform accepts.

export interface ScaleLimits {
  maxPods: number;
  maxWorkers: number;
}

export const DEFAULT_LIMITS: ScaleLimits = { maxPods: 3, maxWorkers: 3 };

/** Clamp a requested replica count into [0, maxPods]. */
export function clampReplicas(
  requested: number,
  limits: ScaleLimits = DEFAULT_LIMITS,
): number {
  if (!Number.isFinite(requested)) return 0;
  const whole = Math.trunc(requested);
  return Math.min(Math.max(whole, 0), limits.maxPods);
}

/** Clamp a requested worker count into [1, maxWorkers]. */
export function clampWorkers(
  requested: number,
  limits: ScaleLimits = DEFAULT_LIMITS,
): number {
  if (!Number.isFinite(requested)) return 1;
  const whole = Math.trunc(requested);
  return Math.min(Math.max(whole, 1), limits.maxWorkers);
}
