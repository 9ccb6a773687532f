/** Pure mapping from panel state to the render service's JSON schema. */

import {
  ControlState,
  JAW_PITCH_INDEX,
  JAW_YAW_INDEX,
  NECK_PITCH_INDEX,
  NECK_YAW_INDEX,
  OutputMode,
  PSI_COUNT,
  THETA_COUNT,
} from "./state.js";

export interface RenderRequestBody {
  theta: number[];
  psi: number[];
  camera: {
    orbit_azimuth: number;
    orbit_elevation: number;
    distance: number;
  };
  width: number;
  height: number;
  output: OutputMode;
}

/** Build the POST /render body. Pure: no clamping, no mutation of the
 *  input, same state always yields the same body. The psi vector is
 *  zero-padded to the full service length; slider poses land at their
 *  joint's axis-angle slot and every other component stays zero. */
export function toRenderRequest(state: ControlState): RenderRequestBody {
  if (state.psi.length > PSI_COUNT) {
    throw new Error(`psi has ${state.psi.length} components, limit is ${PSI_COUNT}`);
  }
  const psi = new Array(PSI_COUNT).fill(0);
  state.psi.forEach((v, i) => {
    psi[i] = v;
  });
  const theta = new Array(THETA_COUNT).fill(0);
  theta[NECK_PITCH_INDEX] = state.neckPitch;
  theta[NECK_YAW_INDEX] = state.neckYaw;
  theta[JAW_PITCH_INDEX] = state.jawPitch;
  theta[JAW_YAW_INDEX] = state.jawYaw;
  return {
    theta,
    psi,
    camera: {
      orbit_azimuth: state.azimuth,
      orbit_elevation: state.elevation,
      distance: state.distance,
    },
    width: state.resolution,
    height: state.resolution,
    output: state.output,
  };
}
