import { describe, expect, it } from "vitest";

import { toRenderRequest } from "../src/request.js";
import { PSI_COUNT, THETA_COUNT, canonicalState } from "../src/state.js";

describe("toRenderRequest", () => {
  it("maps the canonical state to the service's default render", () => {
    const body = toRenderRequest(canonicalState());
    // exactly the fields the service accepts, nothing extra
    expect(Object.keys(body).sort()).toEqual([
      "camera",
      "height",
      "output",
      "psi",
      "theta",
      "width",
    ]);
    expect(Object.keys(body.camera).sort()).toEqual([
      "distance",
      "orbit_azimuth",
      "orbit_elevation",
    ]);
    expect(body.theta).toHaveLength(THETA_COUNT);
    expect(body.theta[6]).toBeCloseTo(0.2, 12); // resting jaw pitch
    expect(body.theta.filter((v) => v !== 0)).toHaveLength(1);
    expect(body.psi).toEqual(new Array(PSI_COUNT).fill(0));
    expect(body.width).toBe(body.height);
    expect(body.output).toBe("rgb");
  });

  it("zero-pads the expression vector to the full service length", () => {
    const body = toRenderRequest({ ...canonicalState(), psi: [1, 2, 3] });
    expect(body.psi).toHaveLength(PSI_COUNT);
    expect(body.psi.slice(0, 4)).toEqual([1, 2, 3, 0]);
    expect(body.psi[PSI_COUNT - 1]).toBe(0);
  });

  it("passes a full-length expression vector through untouched", () => {
    const psi = Array.from({ length: PSI_COUNT }, (_, i) => i / 10);
    const body = toRenderRequest({ ...canonicalState(), psi });
    expect(body.psi).toEqual(psi);
  });

  it("rejects an over-long expression vector", () => {
    const psi = new Array(PSI_COUNT + 1).fill(0);
    expect(() => toRenderRequest({ ...canonicalState(), psi })).toThrow(/limit/);
  });

  it("routes each pose slider to its joint's axis-angle slot", () => {
    const body = toRenderRequest({
      ...canonicalState(),
      neckPitch: 0.11,
      neckYaw: -0.12,
      jawPitch: 0.33,
      jawYaw: 0.14,
    });
    expect(body.theta[3]).toBeCloseTo(0.11, 12);
    expect(body.theta[4]).toBeCloseTo(-0.12, 12);
    expect(body.theta[6]).toBeCloseTo(0.33, 12);
    expect(body.theta[7]).toBeCloseTo(0.14, 12);
    const touched = [3, 4, 6, 7];
    body.theta.forEach((v, i) => {
      if (!touched.includes(i)) expect(v).toBe(0);
    });
  });

  it("maps camera and output settings verbatim", () => {
    const body = toRenderRequest({
      ...canonicalState(),
      azimuth: 0.4,
      elevation: -0.2,
      distance: 2.5,
      output: "normal",
      resolution: 256,
    });
    expect(body.camera).toEqual({
      orbit_azimuth: 0.4,
      orbit_elevation: -0.2,
      distance: 2.5,
    });
    expect(body.output).toBe("normal");
    expect(body.width).toBe(256);
    expect(body.height).toBe(256);
  });

  it("is pure: same state in, same body out, input untouched", () => {
    const state = { ...canonicalState(), psi: [0.5, -1] };
    const a = toRenderRequest(state);
    const b = toRenderRequest(state);
    expect(a).toEqual(b);
    expect(a).not.toBe(b);
    expect(state.psi).toEqual([0.5, -1]);
    a.psi[0] = 99;
    expect(toRenderRequest(state).psi[0]).toBe(0.5);
  });

  it("serializes to JSON without loss", () => {
    const body = toRenderRequest({ ...canonicalState(), psi: [0.125] });
    const round = JSON.parse(JSON.stringify(body));
    expect(round).toEqual(body);
  });
});
