/** Small DOM builders for the control panel. */

import { Range } from "./state.js";

export interface SliderHandle {
  row: HTMLElement;
  set(value: number): void;
}

export function createSlider(
  label: string,
  range: Range,
  value: number,
  step: number,
  onInput: (value: number) => void,
): SliderHandle {
  const row = document.createElement("label");
  row.className = "slider-row";

  const name = document.createElement("span");
  name.className = "slider-name";
  name.textContent = label;

  const input = document.createElement("input");
  input.type = "range";
  input.min = String(range.min);
  input.max = String(range.max);
  input.step = String(step);
  input.value = String(value);

  const readout = document.createElement("span");
  readout.className = "slider-value";
  readout.textContent = value.toFixed(2);

  input.addEventListener("input", () => {
    const v = Number(input.value);
    readout.textContent = v.toFixed(2);
    onInput(v);
  });

  row.append(name, input, readout);
  return {
    row,
    set(v: number) {
      input.value = String(v);
      readout.textContent = v.toFixed(2);
    },
  };
}

export function createSelect(
  label: string,
  choices: readonly string[],
  value: string,
  onChange: (value: string) => void,
): { row: HTMLElement; set(value: string): void } {
  const row = document.createElement("label");
  row.className = "select-row";

  const name = document.createElement("span");
  name.className = "slider-name";
  name.textContent = label;

  const select = document.createElement("select");
  for (const choice of choices) {
    const option = document.createElement("option");
    option.value = choice;
    option.textContent = choice;
    select.append(option);
  }
  select.value = value;
  select.addEventListener("change", () => onChange(select.value));

  row.append(name, select);
  return {
    row,
    set(v: string) {
      select.value = v;
    },
  };
}

export function createSection(title: string, ...children: HTMLElement[]): HTMLElement {
  const section = document.createElement("section");
  const heading = document.createElement("h2");
  heading.textContent = title;
  section.append(heading, ...children);
  return section;
}

export function createButton(label: string, onClick: () => void): HTMLButtonElement {
  const button = document.createElement("button");
  button.type = "button";
  button.textContent = label;
  button.addEventListener("click", onClick);
  return button;
}
