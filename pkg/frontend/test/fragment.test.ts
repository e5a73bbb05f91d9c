import { describe, expect, it } from "vitest";

import { decodeFragment, encodeFragment } from "../src/fragment.js";
import { canonicalRequest, initialState, requestKey, setLerp, setPart, setPose, setSize } from "../src/state.js";
import { manifest } from "./fixtures.js";

const base = initialState(manifest);

describe("fragment codec", () => {
  it("round-trips the default state", () => {
    const back = decodeFragment(encodeFragment(base), base);
    expect(requestKey(canonicalRequest(back))).toBe(requestKey(canonicalRequest(base)));
  });

  it("round-trips a swap edit", () => {
    const s = setPart(base, "hat", { kind: "subject", id: "s002" });
    const back = decodeFragment(encodeFragment(s), base);
    expect(back.parts["hat"]).toEqual({ kind: "subject", id: "s002" });
    expect(requestKey(canonicalRequest(back))).toBe(requestKey(canonicalRequest(s)));
  });

  it("round-trips zero slots, lerp, pose preset, and size", () => {
    let s = setPart(base, "beard", { kind: "zero" });
    s = { ...s, lerp: { b: "s003", alpha: 0.25 } };
    s = setPose(s, "frame:1");
    s = setSize(s, 256);
    const back = decodeFragment(encodeFragment(s), base);
    expect(back.parts["beard"]).toEqual({ kind: "zero" });
    expect(back.lerp).toEqual({ b: "s003", alpha: 0.25 });
    expect(back.pose).toBe("frame:1");
    expect(back.size).toBe(256);
    expect(requestKey(canonicalRequest(back))).toBe(requestKey(canonicalRequest(s)));
  });

  it("round-trips explicit pose dials", () => {
    const s = setPose(base, { beta: [0, 0.5], theta: [0.1, 0, -0.2], psi: [1] });
    const back = decodeFragment(encodeFragment(s), base);
    expect(back.pose).toEqual({ beta: [0, 0.5], theta: [0.1, 0, -0.2], psi: [1] });
  });

  it("reload reproduces the same render request (leading # tolerated)", () => {
    const s = setLerp(base, "s002", 0.75);
    const back = decodeFragment(`#${encodeFragment(s)}`, base);
    expect(canonicalRequest(back)).toEqual(canonicalRequest(s));
  });

  it("ignores junk and unknown parts, clamps alpha", () => {
    const back = decodeFragment("ref=s001&part.tail=s002&lerp=s002:7&noise=1", base);
    expect(back.reference).toBe("s001");
    expect(Object.keys(back.parts)).toEqual(Object.keys(base.parts));
    expect(back.lerp).toEqual({ b: "s002", alpha: 1 });
  });
});
