/** Wires the control panel, render scheduler, and playback together. */

import {
  AZIMUTH_RANGE,
  ControlState,
  DISTANCE_RANGE,
  ELEVATION_RANGE,
  EXPOSED_PSI,
  JAW_PITCH_RANGE,
  JAW_YAW_RANGE,
  NECK_PITCH_RANGE,
  NECK_YAW_RANGE,
  OUTPUT_MODES,
  PSI_RANGE,
  RESOLUTION_PRESETS,
  ServiceInfo,
  canonicalState,
  clampState,
  parseAdvancedPsi,
} from "./state.js";
import { createRenderClient } from "./renderClient.js";
import { Playback, PlaybackFrame, createPlayback } from "./playback.js";
import { fetchInfo, httpPoster } from "./http.js";
import { SliderHandle, createButton, createSection, createSelect, createSlider } from "./controls.js";

export async function mountApp(root: HTMLElement, base = ""): Promise<void> {
  let info: ServiceInfo;
  try {
    info = await fetchInfo(base);
  } catch (err) {
    const msg = document.createElement("p");
    msg.className = "banner";
    msg.textContent = `render service unreachable: ${err instanceof Error ? err.message : err}`;
    root.append(msg);
    return;
  }

  let state = canonicalState(info);
  const post = httpPoster(base);

  // --- viewport ---------------------------------------------------------
  const viewport = document.createElement("div");
  viewport.className = "viewport";
  const image = document.createElement("img");
  image.alt = "rendered avatar";
  const status = document.createElement("div");
  status.className = "status";
  const banner = document.createElement("div");
  banner.className = "banner hidden";
  const dismiss = createButton("dismiss", () => banner.classList.add("hidden"));
  const bannerText = document.createElement("span");
  banner.append(bannerText, dismiss);
  viewport.append(image, status, banner);

  let currentUrl: string | null = null;
  function showBlob(blob: Blob) {
    const url = URL.createObjectURL(blob);
    const preload = new Image();
    preload.onload = () => {
      image.src = url; // swap only once decoded so the viewport never flashes
      if (currentUrl) URL.revokeObjectURL(currentUrl);
      currentUrl = url;
    };
    preload.src = url;
  }

  function showError(message: string) {
    bannerText.textContent = message;
    banner.classList.remove("hidden");
  }

  const client = createRenderClient(post, {
    onImage: (delivery) => {
      showBlob(delivery.blob);
      status.textContent = `${state.resolution}px · ${delivery.latencyMs.toFixed(0)} ms`;
    },
    onError: showError,
    onBusy: (n) => {
      status.classList.toggle("busy", n > 0);
    },
  });

  const update = (patch: Partial<ControlState>) => {
    state = clampState({ ...state, ...patch });
    client.request(state);
  };

  // --- expression sliders -----------------------------------------------
  const psiSliders: SliderHandle[] = [];
  const psiRows: HTMLElement[] = [];
  for (let i = 0; i < EXPOSED_PSI; i++) {
    const slider = createSlider(`psi ${i}`, PSI_RANGE, 0, 0.05, (v) => {
      const psi = state.psi.slice();
      while (psi.length <= i) psi.push(0);
      psi[i] = v;
      update({ psi });
    });
    psiSliders.push(slider);
    psiRows.push(slider.row);
  }

  // --- pose sliders -------------------------------------------------------
  const jawPitch = createSlider("jaw pitch", JAW_PITCH_RANGE, state.jawPitch, 0.01, (v) =>
    update({ jawPitch: v }),
  );
  const jawYaw = createSlider("jaw yaw", JAW_YAW_RANGE, state.jawYaw, 0.01, (v) =>
    update({ jawYaw: v }),
  );
  const neckPitch = createSlider("neck pitch", NECK_PITCH_RANGE, state.neckPitch, 0.01, (v) =>
    update({ neckPitch: v }),
  );
  const neckYaw = createSlider("neck yaw", NECK_YAW_RANGE, state.neckYaw, 0.01, (v) =>
    update({ neckYaw: v }),
  );

  // --- camera -------------------------------------------------------------
  const azimuth = createSlider("azimuth", AZIMUTH_RANGE, state.azimuth, 0.01, (v) =>
    update({ azimuth: v }),
  );
  const elevation = createSlider("elevation", ELEVATION_RANGE, state.elevation, 0.01, (v) =>
    update({ elevation: v }),
  );
  const distance = createSlider("distance", DISTANCE_RANGE, state.distance, 0.01, (v) =>
    update({ distance: v }),
  );

  // --- output -------------------------------------------------------------
  const output = createSelect("output", OUTPUT_MODES, state.output, (v) =>
    update({ output: v as ControlState["output"] }),
  );
  const presets = RESOLUTION_PRESETS.filter((p) => p <= info.max_image_side).map(String);
  const resolution = createSelect("resolution", presets, String(state.resolution), (v) =>
    update({ resolution: Number(v) }),
  );

  function syncPanel() {
    psiSliders.forEach((s, i) => s.set(state.psi[i] ?? 0));
    jawPitch.set(state.jawPitch);
    jawYaw.set(state.jawYaw);
    neckPitch.set(state.neckPitch);
    neckYaw.set(state.neckYaw);
    azimuth.set(state.azimuth);
    elevation.set(state.elevation);
    distance.set(state.distance);
    output.set(state.output);
    resolution.set(String(state.resolution));
  }

  const reset = createButton("reset to canonical", () => {
    state = canonicalState(info);
    syncPanel();
    client.flush(state);
  });

  // --- advanced expression editor ------------------------------------------
  const textarea = document.createElement("textarea");
  textarea.rows = 3;
  textarea.placeholder = `full expression vector, e.g. [0.5, -1, 0, ...] (up to ${info.n_e})`;
  const applyPsi = createButton("apply expression vector", () => {
    try {
      update({ psi: parseAdvancedPsi(textarea.value) });
      syncPanel();
    } catch (err) {
      showError(err instanceof Error ? err.message : String(err));
    }
  });

  // --- keyframe playback ----------------------------------------------------
  const keyframes: ControlState[] = [];
  const keyframeStatus = document.createElement("span");
  keyframeStatus.className = "status";
  keyframeStatus.textContent = "0 keyframes";
  const stepsInput = document.createElement("input");
  stepsInput.type = "number";
  stepsInput.min = "2";
  stepsInput.value = "10";

  const playback: Playback = createPlayback(post, {
    onFrame: (frame) => showBlob(frame.blob),
    onProgress: (done, total) => {
      keyframeStatus.textContent = `playing ${done}/${total}`;
    },
    onPause: (message, at) => {
      showError(`playback paused at frame ${at}: ${message}`);
      resumeButton.disabled = false;
    },
    onDone: (frames) => {
      keyframeStatus.textContent = `${frames.length} frames ready to export`;
      exportButton.disabled = frames.length === 0;
    },
  });

  const addKeyframe = createButton("add keyframe", () => {
    keyframes.push(state);
    keyframeStatus.textContent = `${keyframes.length} keyframes`;
  });
  const clearKeyframes = createButton("clear", () => {
    keyframes.length = 0;
    keyframeStatus.textContent = "0 keyframes";
  });
  const playButton = createButton("play", () => {
    if (playback.running) return;
    const steps = Number(stepsInput.value);
    try {
      exportButton.disabled = true;
      resumeButton.disabled = true;
      void playback.play(keyframes.slice(), steps);
    } catch (err) {
      showError(err instanceof Error ? err.message : String(err));
    }
  });
  const resumeButton = createButton("resume", () => {
    resumeButton.disabled = true;
    void playback.resume();
  });
  resumeButton.disabled = true;
  const exportButton = createButton("export PNGs", () => {
    for (const frame of playback.frames) {
      downloadBlob(frame);
    }
  });
  exportButton.disabled = true;

  function downloadBlob(frame: PlaybackFrame) {
    const anchor = document.createElement("a");
    anchor.href = URL.createObjectURL(frame.blob);
    anchor.download = frame.name;
    anchor.click();
    URL.revokeObjectURL(anchor.href);
  }

  // --- layout ---------------------------------------------------------------
  const panel = document.createElement("div");
  panel.className = "panel";
  panel.append(
    createSection("Expression", ...psiRows),
    createSection("Pose", jawPitch.row, jawYaw.row, neckPitch.row, neckYaw.row),
    createSection("Camera", azimuth.row, elevation.row, distance.row),
    createSection("Output", output.row, resolution.row, reset),
    createSection("Advanced", textarea, applyPsi),
    createSection(
      "Keyframes",
      rowOf(addKeyframe, clearKeyframes, keyframeStatus),
      rowOf(labelled("steps", stepsInput), playButton, resumeButton, exportButton),
    ),
  );

  root.append(viewport, panel);
  client.flush(state); // first paint: the canonical avatar
}

function rowOf(...children: HTMLElement[]): HTMLElement {
  const row = document.createElement("div");
  row.className = "button-row";
  row.append(...children);
  return row;
}

function labelled(text: string, child: HTMLElement): HTMLElement {
  const label = document.createElement("label");
  const span = document.createElement("span");
  span.textContent = text;
  label.append(span, child);
  return label;
}
