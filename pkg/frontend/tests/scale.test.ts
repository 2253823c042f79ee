import { describe, expect, it } from "vitest";
import { clampReplicas, clampWorkers, DEFAULT_LIMITS } from "../src/scale.js";

describe("clampReplicas", () => {
  it("passes in-range values through", () => {
    expect(clampReplicas(2)).toBe(2);
    expect(clampReplicas(0)).toBe(0);
  });

  it("clamps to the pod ceiling", () => {
    expect(clampReplicas(99)).toBe(DEFAULT_LIMITS.maxPods);
  });

  it("floors negatives to zero", () => {
    expect(clampReplicas(-4)).toBe(0);
  });

  it("truncates fractional input", () => {
    expect(clampReplicas(2.9)).toBe(2);
  });

  it("treats NaN and infinities as zero", () => {
    expect(clampReplicas(Number.NaN)).toBe(0);
    expect(clampReplicas(Number.POSITIVE_INFINITY)).toBe(0);
  });

  it("honours custom limits", () => {
    expect(clampReplicas(9, { maxPods: 5, maxWorkers: 1 })).toBe(5);
  });
});

describe("clampWorkers", () => {
  it("never goes below one worker", () => {
    expect(clampWorkers(0)).toBe(1);
    expect(clampWorkers(-3)).toBe(1);
    expect(clampWorkers(Number.NaN)).toBe(1);
  });

  it("clamps to the worker ceiling", () => {
    expect(clampWorkers(50)).toBe(DEFAULT_LIMITS.maxWorkers);
  });

  it("passes in-range values through", () => {
    expect(clampWorkers(2)).toBe(2);
  });
});
