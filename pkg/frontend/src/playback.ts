/** Keyframe playback: linear interpolation across a keyframe path,
 *  sequential rendering with pause/resume, and PNG export naming. */

import { ControlState } from "./state.js";
import { Poster } from "./renderClient.js";
import { toRenderRequest } from "./request.js";

function lerp(a: number, b: number, t: number): number {
  return a + (b - a) * t;
}

function lerpState(a: ControlState, b: ControlState, t: number): ControlState {
  const n = Math.max(a.psi.length, b.psi.length);
  const psi = new Array(n);
  for (let i = 0; i < n; i++) {
    psi[i] = lerp(a.psi[i] ?? 0, b.psi[i] ?? 0, t);
  }
  return {
    psi,
    jawPitch: lerp(a.jawPitch, b.jawPitch, t),
    jawYaw: lerp(a.jawYaw, b.jawYaw, t),
    neckPitch: lerp(a.neckPitch, b.neckPitch, t),
    neckYaw: lerp(a.neckYaw, b.neckYaw, t),
    azimuth: lerp(a.azimuth, b.azimuth, t),
    elevation: lerp(a.elevation, b.elevation, t),
    distance: lerp(a.distance, b.distance, t),
    output: t < 1 ? a.output : b.output,
    resolution: a.resolution,
  };
}

/** Sample `steps` states evenly along the keyframe polyline, endpoints
 *  included: 2 keyframes with 5 steps yields t = 0, .25, .5, .75, 1. */
export function samplePath(keyframes: ControlState[], steps: number): ControlState[] {
  if (keyframes.length < 2) {
    throw new Error("playback needs at least 2 keyframes");
  }
  if (!Number.isInteger(steps) || steps < 2) {
    throw new Error("steps must be an integer of at least 2");
  }
  const states: ControlState[] = [];
  const span = keyframes.length - 1;
  for (let i = 0; i < steps; i++) {
    const u = (i / (steps - 1)) * span;
    const seg = Math.min(Math.floor(u), span - 1);
    states.push(lerpState(keyframes[seg], keyframes[seg + 1], u - seg));
  }
  return states;
}

export function frameName(index: number): string {
  return `frame_${String(index).padStart(3, "0")}.png`;
}

export interface PlaybackFrame {
  index: number;
  name: string;
  blob: Blob;
}

export interface PlaybackCallbacks {
  onFrame?: (frame: PlaybackFrame) => void;
  onProgress?: (done: number, total: number) => void;
  /** A render failed; playback is paused at the failing frame. */
  onPause?: (message: string, atIndex: number) => void;
  onDone?: (frames: PlaybackFrame[]) => void;
}

export interface Playback {
  play(keyframes: ControlState[], steps: number): Promise<void>;
  /** Retry the frame that failed and continue the remaining sequence. */
  resume(): Promise<void>;
  stop(): void;
  readonly frames: PlaybackFrame[];
  readonly running: boolean;
  readonly paused: boolean;
}

export function createPlayback(post: Poster, callbacks: PlaybackCallbacks = {}): Playback {
  let schedule: ControlState[] = [];
  let cursor = 0;
  let running = false;
  let paused = false;
  let frames: PlaybackFrame[] = [];

  async function run(): Promise<void> {
    running = true;
    paused = false;
    while (cursor < schedule.length) {
      const index = cursor;
      let blob: Blob;
      try {
        blob = (await post(toRenderRequest(schedule[index]))).blob;
      } catch (err) {
        running = false;
        paused = true;
        callbacks.onPause?.(err instanceof Error ? err.message : String(err), index);
        return;
      }
      if (!running) return; // stopped while the request was out
      const frame = { index, name: frameName(index), blob };
      frames.push(frame);
      cursor += 1;
      callbacks.onFrame?.(frame);
      callbacks.onProgress?.(cursor, schedule.length);
    }
    running = false;
    callbacks.onDone?.(frames);
  }

  return {
    play(keyframes: ControlState[], steps: number) {
      schedule = samplePath(keyframes, steps);
      cursor = 0;
      frames = [];
      return run();
    },
    resume() {
      if (!paused) return Promise.resolve();
      return run();
    },
    stop() {
      running = false;
      paused = false;
      cursor = schedule.length;
    },
    get frames() {
      return frames;
    },
    get running() {
      return running;
    },
    get paused() {
      return paused;
    },
  };
}
