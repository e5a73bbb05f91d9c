// Editor state and its canonical mapping onto the render service API.
// Everything here is DOM-free so the contract is testable in node.

export interface Manifest {
  schema: string;
  subjects: { id: string; category: string; prompt: string }[];
  parts: string[];
  poses: string[];
  latent_dim: number;
  latent_rows: number;
  n_points: number;
  default_size: number;
  max_size: number;
}

// one assignment per part slot: the reference subject's own row by default,
// a donor subject's row, or the shared absence row
export type PartSlot =
  | { kind: "inherit" }
  | { kind: "subject"; id: string }
  | { kind: "zero" };

export interface PoseDials {
  beta: number[];
  theta: number[];
  psi: number[];
}

export interface EditorState {
  reference: string;
  parts: Record<string, PartSlot>;
  // whole-code interpolation toward a second pivot; alpha in [0, 1]
  lerp: { b: string | null; alpha: number };
  pose: string | PoseDials;
  size: number | null;
  pending: boolean;
}

export interface PickerOptions {
  subjects: string[];
  parts: string[];
  poses: string[];
  donorsByPart: Record<string, string[]>;
  defaultSize: number;
  maxSize: number;
}

export function pickerOptions(m: Manifest): PickerOptions {
  const donorsByPart: Record<string, string[]> = {};
  for (const part of m.parts) {
    donorsByPart[part] = m.subjects.filter((s) => s.category === part).map((s) => s.id);
  }
  return {
    subjects: m.subjects.map((s) => s.id),
    parts: m.parts,
    poses: m.poses,
    donorsByPart,
    defaultSize: m.default_size,
    maxSize: m.max_size,
  };
}

export function initialState(m: Manifest): EditorState {
  const parts: Record<string, PartSlot> = {};
  for (const p of m.parts) parts[p] = { kind: "inherit" };
  return {
    reference: m.subjects[0]?.id ?? "",
    parts,
    lerp: { b: null, alpha: 0 },
    pose: m.poses[0] ?? "rest",
    size: null,
    pending: false,
  };
}

const clamp01 = (x: number) => Math.min(1, Math.max(0, x));

// Reducers return fresh state; the wire grammar expresses one substitution
// per render, so editing a part resets the other slots and the lerp slider.

export function setReference(s: EditorState, id: string): EditorState {
  const parts: Record<string, PartSlot> = {};
  for (const p of Object.keys(s.parts)) parts[p] = { kind: "inherit" };
  return { ...s, reference: id, parts, lerp: { b: null, alpha: 0 } };
}

export function setPart(s: EditorState, part: string, slot: PartSlot): EditorState {
  const parts: Record<string, PartSlot> = {};
  for (const p of Object.keys(s.parts)) parts[p] = p === part ? slot : { kind: "inherit" };
  return { ...s, parts, lerp: { b: null, alpha: 0 } };
}

export function setLerp(s: EditorState, b: string | null, alpha: number): EditorState {
  const parts: Record<string, PartSlot> = {};
  for (const p of Object.keys(s.parts)) parts[p] = { kind: "inherit" };
  return { ...s, parts, lerp: { b, alpha: clamp01(alpha) } };
}

export function setAlpha(s: EditorState, alpha: number): EditorState {
  return { ...s, lerp: { ...s.lerp, alpha: clamp01(alpha) } };
}

export function setPose(s: EditorState, pose: string | PoseDials): EditorState {
  return { ...s, pose };
}

export function setSize(s: EditorState, size: number | null): EditorState {
  return { ...s, size };
}

export type EditedSlot = { kind: "subject"; id: string } | { kind: "zero" };

export function editedPart(s: EditorState): [string, EditedSlot] | null {
  for (const [part, slot] of Object.entries(s.parts)) {
    if (slot.kind !== "inherit") return [part, slot];
  }
  return null;
}

// -- canonical request ------------------------------------------------------

export interface ViewerRequest {
  path: "/api/v1/render" | "/api/v1/swap" | "/api/v1/interpolate";
  body: Record<string, unknown>;
}

/** Map state onto the one request that renders it.
 *
 * Interpolation endpoints collapse onto direct subject renders, so the
 * slider at 0 or 1 issues byte-for-byte the same request as picking that
 * subject; intermediate weights go to /interpolate with a single alpha.
 */
export function canonicalRequest(s: EditorState): ViewerRequest {
  const common: Record<string, unknown> = { pose: s.pose };
  if (s.size !== null) common.size = s.size;

  if (s.lerp.b !== null && s.lerp.alpha > 0) {
    if (s.lerp.alpha >= 1) {
      return { path: "/api/v1/render", body: { latent: `subject:${s.lerp.b}`, ...common } };
    }
    return {
      path: "/api/v1/interpolate",
      body: { a: s.reference, b: s.lerp.b, alphas: [s.lerp.alpha], ...common },
    };
  }

  const edited = editedPart(s);
  if (edited !== null) {
    const [part, slot] = edited;
    const target = slot.kind === "zero" ? "zero" : slot.id;
    return {
      path: "/api/v1/swap",
      body: { ref: s.reference, part, target, ...common },
    };
  }

  return { path: "/api/v1/render", body: { latent: `subject:${s.reference}`, ...common } };
}

/** Deterministic serialization: the dedupe and stale checks key on this. */
export function requestKey(r: ViewerRequest): string {
  const sort = (v: unknown): unknown => {
    if (Array.isArray(v)) return v.map(sort);
    if (v !== null && typeof v === "object") {
      const out: Record<string, unknown> = {};
      for (const k of Object.keys(v as object).sort()) {
        out[k] = sort((v as Record<string, unknown>)[k]);
      }
      return out;
    }
    return v;
  };
  return `${r.path}?${JSON.stringify(sort(r.body))}`;
}
