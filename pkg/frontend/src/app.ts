// DOM shell: pickers and sliders on top of the DOM-free editor core.
// State lives in one EditorState; every change redraws the fragment and
// funnels through the debounced client.

import { RenderClient } from "./client.js";
import { decodeFragment, encodeFragment } from "./fragment.js";
import {
  EditorState,
  Manifest,
  canonicalRequest,
  initialState,
  pickerOptions,
  setAlpha,
  setLerp,
  setPart,
  setPose,
  setReference,
  setSize,
} from "./state.js";

const el = <T extends HTMLElement>(id: string): T => {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing #${id}`);
  return node as T;
};

function option(value: string, label = value): HTMLOptionElement {
  const o = document.createElement("option");
  o.value = value;
  o.textContent = label;
  return o;
}

async function boot(): Promise<void> {
  const resp = await fetch("/api/v1/manifest");
  if (!resp.ok) throw new Error(`manifest failed (${resp.status})`);
  const manifest = (await resp.json()) as Manifest;
  const opts = pickerOptions(manifest);

  const refSel = el<HTMLSelectElement>("ref");
  const partsBox = el<HTMLDivElement>("parts");
  const lerpSel = el<HTMLSelectElement>("lerp-b");
  const alphaRange = el<HTMLInputElement>("alpha");
  const alphaOut = el<HTMLSpanElement>("alpha-val");
  const poseSel = el<HTMLSelectElement>("pose");
  const sizeInput = el<HTMLInputElement>("size");
  const view = el<HTMLImageElement>("view");
  const toast = el<HTMLDivElement>("toast");
  const pending = el<HTMLSpanElement>("pending");

  for (const id of opts.subjects) refSel.append(option(id));
  lerpSel.append(option("", "(off)"));
  for (const id of opts.subjects) lerpSel.append(option(id));
  for (const name of opts.poses) poseSel.append(option(name));
  sizeInput.max = String(opts.maxSize);
  sizeInput.placeholder = String(opts.defaultSize);

  const partSelects: Record<string, HTMLSelectElement> = {};
  for (const part of opts.parts) {
    const row = document.createElement("label");
    row.className = "part-row";
    row.append(`${part} `);
    const sel = document.createElement("select");
    sel.append(option("inherit"), option("zero"));
    for (const donor of opts.donorsByPart[part]) sel.append(option(donor));
    row.append(sel);
    partsBox.append(row);
    partSelects[part] = sel;
  }

  let state = decodeFragment(location.hash, initialState(manifest));

  let lastUrl: string | null = null;
  const client = new RenderClient("", {
    onImage: (bytes) => {
      if (lastUrl !== null) URL.revokeObjectURL(lastUrl);
      lastUrl = URL.createObjectURL(new Blob([bytes.slice().buffer], { type: "image/png" }));
      view.src = lastUrl;
    },
    onError: (message) => {
      toast.textContent = message;
      toast.classList.add("show");
      setTimeout(() => toast.classList.remove("show"), 4000);
    },
    onPending: (busy) => {
      pending.style.visibility = busy ? "visible" : "hidden";
      state = { ...state, pending: busy };
    },
  });

  const syncControls = () => {
    refSel.value = state.reference;
    for (const [part, sel] of Object.entries(partSelects)) {
      const slot = state.parts[part];
      sel.value = slot.kind === "inherit" ? "inherit" : slot.kind === "zero" ? "zero" : slot.id;
    }
    lerpSel.value = state.lerp.b ?? "";
    alphaRange.value = String(state.lerp.alpha);
    alphaOut.textContent = state.lerp.alpha.toFixed(2);
    if (typeof state.pose === "string") poseSel.value = state.pose;
    sizeInput.value = state.size === null ? "" : String(state.size);
  };

  const apply = (next: EditorState, immediate = false) => {
    state = next;
    syncControls();
    const fragment = encodeFragment(state);
    if (location.hash.replace(/^#/, "") !== fragment) {
      history.replaceState(null, "", `#${fragment}`);
    }
    const req = canonicalRequest(state);
    if (immediate) {
      client.issue(req);
    } else {
      client.show(req);
    }
  };

  refSel.addEventListener("change", () => apply(setReference(state, refSel.value)));
  for (const [part, sel] of Object.entries(partSelects)) {
    sel.addEventListener("change", () => {
      const v = sel.value;
      const slot =
        v === "inherit"
          ? ({ kind: "inherit" } as const)
          : v === "zero"
            ? ({ kind: "zero" } as const)
            : ({ kind: "subject", id: v } as const);
      apply(setPart(state, part, slot));
    });
  }
  lerpSel.addEventListener("change", () =>
    apply(setLerp(state, lerpSel.value === "" ? null : lerpSel.value, Number(alphaRange.value))),
  );
  alphaRange.addEventListener("input", () => apply(setAlpha(state, Number(alphaRange.value))));
  poseSel.addEventListener("change", () => apply(setPose(state, poseSel.value)));
  sizeInput.addEventListener("change", () =>
    apply(setSize(state, sizeInput.value === "" ? null : Number(sizeInput.value))),
  );

  window.addEventListener("hashchange", () => {
    const fragment = location.hash.replace(/^#/, "");
    if (fragment !== encodeFragment(state)) {
      apply(decodeFragment(fragment, initialState(manifest)), true);
    }
  });

  apply(state, true);
}

boot().catch((err) => {
  const toast = document.getElementById("toast");
  if (toast !== null) {
    toast.textContent = String(err);
    toast.classList.add("show");
  }
});
