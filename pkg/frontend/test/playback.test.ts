import { describe, expect, it } from "vitest";

import { createPlayback, frameName, samplePath } from "../src/playback.js";
import { RenderRequestBody } from "../src/request.js";
import { RenderResult } from "../src/renderClient.js";
import { ControlState, canonicalState } from "../src/state.js";

const PNG_BLOB = new Blob([new Uint8Array([137, 80, 78, 71])], { type: "image/png" });

function keyframe(psi0: number): ControlState {
  return { ...canonicalState(), psi: [psi0] };
}

function recordingPoster() {
  const bodies: RenderRequestBody[] = [];
  const post = async (body: RenderRequestBody): Promise<RenderResult> => {
    bodies.push(body);
    return { blob: PNG_BLOB };
  };
  return { post, bodies };
}

describe("samplePath", () => {
  it("two keyframes and five steps sweep the demonstrated [-4, 4] range", () => {
    const states = samplePath([keyframe(-4), keyframe(4)], 5);
    expect(states.map((s) => s.psi[0])).toEqual([-4, -2, 0, 2, 4]);
  });

  it("hits intermediate keyframes exactly", () => {
    const states = samplePath([keyframe(0), keyframe(1), keyframe(-1)], 5);
    expect(states.map((s) => s.psi[0])).toEqual([0, 0.5, 1, 0, -1]);
  });

  it("interpolates pose and camera alongside expression", () => {
    const a = { ...keyframe(0), jawPitch: 0, azimuth: -1 };
    const b = { ...keyframe(0), jawPitch: 0.4, azimuth: 1 };
    const mid = samplePath([a, b], 3)[1];
    expect(mid.jawPitch).toBeCloseTo(0.2, 12);
    expect(mid.azimuth).toBeCloseTo(0, 12);
  });

  it("identical keyframes produce a constant sequence", () => {
    const states = samplePath([keyframe(0.7), keyframe(0.7)], 4);
    for (const s of states) {
      expect(s).toEqual(states[0]);
    }
  });

  it("pads mismatched expression lengths with zeros", () => {
    const a = { ...canonicalState(), psi: [2] };
    const b = { ...canonicalState(), psi: [0, 4] };
    const mid = samplePath([a, b], 3)[1];
    expect(mid.psi).toEqual([1, 2]);
  });

  it.each([
    ["one keyframe", [keyframe(0)], 5],
    ["one step", [keyframe(0), keyframe(1)], 1],
    ["fractional steps", [keyframe(0), keyframe(1)], 2.5],
  ])("rejects %s", (_label, frames, steps) => {
    expect(() => samplePath(frames as ControlState[], steps as number)).toThrow();
  });
});

describe("createPlayback", () => {
  it("two keyframes and five steps issue exactly five render requests", async () => {
    const { post, bodies } = recordingPoster();
    const progress: Array<[number, number]> = [];
    let done = 0;
    const playback = createPlayback(post, {
      onProgress: (d, t) => progress.push([d, t]),
      onDone: () => {
        done += 1;
      },
    });

    await playback.play([keyframe(-4), keyframe(4)], 5);

    expect(bodies).toHaveLength(5);
    expect(bodies.map((b) => b.psi[0])).toEqual([-4, -2, 0, 2, 4]);
    expect(progress).toEqual([
      [1, 5],
      [2, 5],
      [3, 5],
      [4, 5],
      [5, 5],
    ]);
    expect(done).toBe(1);
    expect(playback.frames.map((f) => f.name)).toEqual([
      "frame_000.png",
      "frame_001.png",
      "frame_002.png",
      "frame_003.png",
      "frame_004.png",
    ]);
  });

  it("renders strictly one frame at a time", async () => {
    let inFlight = 0;
    let maxInFlight = 0;
    const post = async (_body: RenderRequestBody): Promise<RenderResult> => {
      inFlight += 1;
      maxInFlight = Math.max(maxInFlight, inFlight);
      await new Promise((resolve) => setTimeout(resolve, 1));
      inFlight -= 1;
      return { blob: PNG_BLOB };
    };
    const playback = createPlayback(post);
    await playback.play([keyframe(-1), keyframe(1)], 6);
    expect(maxInFlight).toBe(1);
  });

  it("pauses on a failed render and resumes from the failed frame", async () => {
    let calls = 0;
    const bodies: RenderRequestBody[] = [];
    const post = async (body: RenderRequestBody): Promise<RenderResult> => {
      calls += 1;
      if (calls === 3) throw new Error("render failed");
      bodies.push(body);
      return { blob: PNG_BLOB };
    };
    const paused: Array<[string, number]> = [];
    let done = 0;
    const playback = createPlayback(post, {
      onPause: (m, at) => paused.push([m, at]),
      onDone: () => {
        done += 1;
      },
    });

    await playback.play([keyframe(-4), keyframe(4)], 5);
    expect(paused).toEqual([["render failed", 2]]);
    expect(playback.paused).toBe(true);
    expect(playback.frames).toHaveLength(2);
    expect(done).toBe(0);

    await playback.resume();
    expect(playback.paused).toBe(false);
    expect(playback.frames).toHaveLength(5);
    expect(done).toBe(1);
    // the failed frame was retried, nothing skipped
    expect(bodies.map((b) => b.psi[0])).toEqual([-4, -2, 0, 2, 4]);
  });

  it("stop() abandons the remaining frames", async () => {
    let release: (() => void) | null = null;
    let calls = 0;
    const post = (_body: RenderRequestBody): Promise<RenderResult> => {
      calls += 1;
      return new Promise((resolve) => {
        release = () => resolve({ blob: PNG_BLOB });
      });
    };
    const playback = createPlayback(post);
    const run = playback.play([keyframe(-1), keyframe(1)], 4);
    playback.stop();
    release!();
    await run;
    expect(calls).toBe(1);
    expect(playback.frames).toHaveLength(0);
    expect(playback.running).toBe(false);
  });

  it("resume() with nothing paused is a no-op", async () => {
    const { post, bodies } = recordingPoster();
    const playback = createPlayback(post);
    await playback.resume();
    expect(bodies).toHaveLength(0);
  });
});

describe("frameName", () => {
  it("zero-pads export names so sequences sort", () => {
    expect(frameName(0)).toBe("frame_000.png");
    expect(frameName(42)).toBe("frame_042.png");
  });
});
