// URL-fragment codec: the whole editor state fits in location.hash so a
// reload (or a shared link) reproduces the same render request.

import { EditorState, PartSlot, PoseDials } from "./state.js";

export function encodeFragment(s: EditorState): string {
  const q = new URLSearchParams();
  q.set("ref", s.reference);
  for (const [part, slot] of Object.entries(s.parts)) {
    if (slot.kind === "zero") q.set(`part.${part}`, "zero");
    else if (slot.kind === "subject") q.set(`part.${part}`, slot.id);
  }
  if (s.lerp.b !== null) q.set("lerp", `${s.lerp.b}:${s.lerp.alpha}`);
  if (typeof s.pose === "string") q.set("pose", s.pose);
  else q.set("dials", [s.pose.beta, s.pose.theta, s.pose.psi].map((v) => v.join(",")).join(";"));
  if (s.size !== null) q.set("size", String(s.size));
  return q.toString();
}

/** Rebuild state from a fragment; unknown keys are ignored, missing ones
 * fall back to `base` (normally `initialState(manifest)`). */
export function decodeFragment(fragment: string, base: EditorState): EditorState {
  const q = new URLSearchParams(fragment.replace(/^#/, ""));
  const parts: Record<string, PartSlot> = {};
  for (const p of Object.keys(base.parts)) parts[p] = { kind: "inherit" };
  for (const [key, value] of q.entries()) {
    if (!key.startsWith("part.")) continue;
    const part = key.slice("part.".length);
    if (!(part in parts)) continue;
    parts[part] = value === "zero" ? { kind: "zero" } : { kind: "subject", id: value };
  }

  let lerp: EditorState["lerp"] = { b: null, alpha: 0 };
  const rawLerp = q.get("lerp");
  if (rawLerp !== null) {
    const i = rawLerp.lastIndexOf(":");
    const alpha = Number(rawLerp.slice(i + 1));
    if (i > 0 && Number.isFinite(alpha)) {
      lerp = { b: rawLerp.slice(0, i), alpha: Math.min(1, Math.max(0, alpha)) };
    }
  }

  let pose: string | PoseDials = q.get("pose") ?? base.pose;
  const dials = q.get("dials");
  if (dials !== null) {
    const groups = dials.split(";").map((g) => (g === "" ? [] : g.split(",").map(Number)));
    if (groups.length === 3 && groups.every((g) => g.every(Number.isFinite))) {
      pose = { beta: groups[0], theta: groups[1], psi: groups[2] };
    }
  }

  const rawSize = q.get("size");
  const size = rawSize !== null && Number.isFinite(Number(rawSize)) ? Number(rawSize) : base.size;

  return {
    reference: q.get("ref") ?? base.reference,
    parts,
    lerp,
    pose,
    size,
    pending: false,
  };
}
