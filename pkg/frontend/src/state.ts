/** Control-panel state and its invariants (ranges, clamping, padding). */

export const PSI_COUNT = 50; // full expression vector the service expects
export const EXPOSED_PSI = 10; // leading components that get their own slider
export const THETA_COUNT = 15; // 5 joints x 3 axis-angle components

// theta layout: [global 0:3, neck 3:6, jaw 6:9, eye_left 9:12, eye_right 12:15]
// with pitch on the x axis (offset 0) and yaw on the y axis (offset 1).
export const NECK_PITCH_INDEX = 3;
export const NECK_YAW_INDEX = 4;
export const JAW_PITCH_INDEX = 6;
export const JAW_YAW_INDEX = 7;

export interface Range {
  min: number;
  max: number;
}

export const PSI_RANGE: Range = { min: -4, max: 4 };
export const JAW_PITCH_RANGE: Range = { min: -0.2, max: 0.6 };
export const JAW_YAW_RANGE: Range = { min: -0.3, max: 0.3 };
export const NECK_PITCH_RANGE: Range = { min: -0.5, max: 0.5 };
export const NECK_YAW_RANGE: Range = { min: -0.5, max: 0.5 };
export const AZIMUTH_RANGE: Range = { min: -Math.PI, max: Math.PI };
export const ELEVATION_RANGE: Range = { min: -1.2, max: 1.2 };
export const DISTANCE_RANGE: Range = { min: 0.9, max: 4 };

export const OUTPUT_MODES = ["rgb", "normal", "mask"] as const;
export type OutputMode = (typeof OUTPUT_MODES)[number];

export const RESOLUTION_PRESETS = [64, 128, 256, 512] as const;

export const DEFAULT_DISTANCE = 1.7;
export const DEFAULT_RESOLUTION = 128;
export const CANONICAL_JAW_PITCH = 0.2;

export interface ControlState {
  /** Expression coefficients; sliders edit the first EXPOSED_PSI, the
   *  advanced editor may set up to PSI_COUNT. Always padded with zeros
   *  when mapped to a request. */
  psi: number[];
  jawPitch: number;
  jawYaw: number;
  neckPitch: number;
  neckYaw: number;
  azimuth: number;
  elevation: number;
  distance: number;
  output: OutputMode;
  resolution: number;
}

export function clamp(value: number, range: Range): number {
  return Math.min(range.max, Math.max(range.min, value));
}

/** Service /info payload fields the UI relies on. */
export interface ServiceInfo {
  n_e: number;
  n_j: number;
  joint_names: string[];
  canonical_pose: number[];
  latent_dim: number;
  max_image_side: number;
  checkpoint_hash: string;
}

/** The resting state: zero expression, the service's canonical pose,
 *  front-facing camera. Matches what the service renders for an empty
 *  request body (aside from the resolution). */
export function canonicalState(info?: ServiceInfo): ControlState {
  const pose = info?.canonical_pose;
  return {
    psi: new Array(EXPOSED_PSI).fill(0),
    jawPitch: pose ? pose[JAW_PITCH_INDEX] : CANONICAL_JAW_PITCH,
    jawYaw: pose ? pose[JAW_YAW_INDEX] : 0,
    neckPitch: pose ? pose[NECK_PITCH_INDEX] : 0,
    neckYaw: pose ? pose[NECK_YAW_INDEX] : 0,
    azimuth: 0,
    elevation: 0,
    distance: DEFAULT_DISTANCE,
    output: "rgb",
    resolution: DEFAULT_RESOLUTION,
  };
}

/** Clamp every slider-driven field to its declared range. Advanced psi
 *  components beyond the sliders pass through unchanged. */
export function clampState(state: ControlState): ControlState {
  const psi = state.psi.slice();
  for (let i = 0; i < Math.min(psi.length, EXPOSED_PSI); i++) {
    psi[i] = clamp(psi[i], PSI_RANGE);
  }
  return {
    ...state,
    psi,
    jawPitch: clamp(state.jawPitch, JAW_PITCH_RANGE),
    jawYaw: clamp(state.jawYaw, JAW_YAW_RANGE),
    neckPitch: clamp(state.neckPitch, NECK_PITCH_RANGE),
    neckYaw: clamp(state.neckYaw, NECK_YAW_RANGE),
    azimuth: clamp(state.azimuth, AZIMUTH_RANGE),
    elevation: clamp(state.elevation, ELEVATION_RANGE),
    distance: clamp(state.distance, DISTANCE_RANGE),
  };
}

/** Parse the advanced editor's JSON into a full expression vector.
 *  Accepts an array of up to PSI_COUNT finite numbers. */
export function parseAdvancedPsi(text: string): number[] {
  let parsed: unknown;
  try {
    parsed = JSON.parse(text);
  } catch {
    throw new Error("expression vector must be valid JSON");
  }
  if (!Array.isArray(parsed)) {
    throw new Error("expression vector must be a JSON array");
  }
  if (parsed.length > PSI_COUNT) {
    throw new Error(`expression vector accepts at most ${PSI_COUNT} numbers`);
  }
  const psi = parsed.map((v, i) => {
    if (typeof v !== "number" || !Number.isFinite(v)) {
      throw new Error(`expression component ${i} must be a finite number`);
    }
    return v;
  });
  return psi;
}
