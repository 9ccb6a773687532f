import { describe, expect, it } from "vitest";

import {
  CANONICAL_JAW_PITCH,
  DEFAULT_DISTANCE,
  EXPOSED_PSI,
  JAW_PITCH_RANGE,
  JAW_YAW_RANGE,
  NECK_PITCH_RANGE,
  NECK_YAW_RANGE,
  PSI_COUNT,
  PSI_RANGE,
  ServiceInfo,
  canonicalState,
  clampState,
  parseAdvancedPsi,
} from "../src/state.js";

const info: ServiceInfo = {
  n_e: 50,
  n_j: 5,
  joint_names: ["global", "neck", "jaw", "eye_left", "eye_right"],
  canonical_pose: [0, 0, 0, 0, 0, 0, 0.2, 0, 0, 0, 0, 0, 0, 0, 0],
  latent_dim: 32,
  max_image_side: 512,
  checkpoint_hash: "abc",
};

describe("canonicalState", () => {
  it("is the resting pose with zero expression", () => {
    const state = canonicalState(info);
    expect(state.psi).toEqual(new Array(EXPOSED_PSI).fill(0));
    expect(state.jawPitch).toBeCloseTo(0.2, 12);
    expect(state.jawYaw).toBe(0);
    expect(state.neckPitch).toBe(0);
    expect(state.neckYaw).toBe(0);
    expect(state.azimuth).toBe(0);
    expect(state.elevation).toBe(0);
    expect(state.distance).toBe(DEFAULT_DISTANCE);
    expect(state.output).toBe("rgb");
  });

  it("reads the resting jaw from the service pose vector", () => {
    const tilted = { ...info, canonical_pose: info.canonical_pose.slice() };
    tilted.canonical_pose[6] = 0.31;
    tilted.canonical_pose[3] = -0.05;
    const state = canonicalState(tilted);
    expect(state.jawPitch).toBeCloseTo(0.31, 12);
    expect(state.neckPitch).toBeCloseTo(-0.05, 12);
  });

  it("falls back to the built-in resting jaw without service info", () => {
    expect(canonicalState().jawPitch).toBe(CANONICAL_JAW_PITCH);
  });
});

describe("clampState", () => {
  it("clamps every slider to its declared range", () => {
    const wild = {
      ...canonicalState(info),
      psi: [9, -9, 0.5],
      jawPitch: 5,
      jawYaw: -5,
      neckPitch: 5,
      neckYaw: -5,
      azimuth: 9,
      elevation: -9,
      distance: 0,
    };
    const s = clampState(wild);
    expect(s.psi[0]).toBe(PSI_RANGE.max);
    expect(s.psi[1]).toBe(PSI_RANGE.min);
    expect(s.psi[2]).toBe(0.5);
    expect(s.jawPitch).toBe(JAW_PITCH_RANGE.max);
    expect(s.jawYaw).toBe(JAW_YAW_RANGE.min);
    expect(s.neckPitch).toBe(NECK_PITCH_RANGE.max);
    expect(s.neckYaw).toBe(NECK_YAW_RANGE.min);
    expect(s.azimuth).toBeLessThanOrEqual(Math.PI);
    expect(s.elevation).toBeGreaterThanOrEqual(-1.2);
    expect(s.distance).toBeGreaterThan(0);
  });

  it("leaves advanced expression components beyond the sliders alone", () => {
    const state = { ...canonicalState(info), psi: new Array(PSI_COUNT).fill(7) };
    const s = clampState(state);
    expect(s.psi[0]).toBe(PSI_RANGE.max); // slider components clamp
    expect(s.psi[EXPOSED_PSI]).toBe(7); // advanced tail passes through
    expect(s.psi[PSI_COUNT - 1]).toBe(7);
  });

  it("does not mutate its input", () => {
    const state = { ...canonicalState(info), psi: [9] };
    clampState(state);
    expect(state.psi[0]).toBe(9);
  });
});

describe("parseAdvancedPsi", () => {
  it("accepts a full-length vector", () => {
    const text = JSON.stringify(new Array(PSI_COUNT).fill(0.25));
    expect(parseAdvancedPsi(text)).toHaveLength(PSI_COUNT);
  });

  it("accepts a short vector", () => {
    expect(parseAdvancedPsi("[1, -2, 3.5]")).toEqual([1, -2, 3.5]);
  });

  it.each([
    ["not json", "{nope"],
    ["not an array", '{"psi": []}'],
    ["too long", JSON.stringify(new Array(PSI_COUNT + 1).fill(0))],
    ["non-numeric entry", '[1, "two", 3]'],
    ["non-finite entry", "[1, 2, null]"],
  ])("rejects %s", (_label, text) => {
    expect(() => parseAdvancedPsi(text)).toThrow();
  });

  it("names the offending component", () => {
    expect(() => parseAdvancedPsi('[0, "x"]')).toThrow(/component 1/);
  });
});
