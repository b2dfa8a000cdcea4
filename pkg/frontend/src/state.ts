/** Session view state: a pure reducer over server payloads and user
 *  input, so a refresh rebuilds the identical view from the trace. */

import type { StatePayload } from "./api.js";

export interface LayerToggles {
  image: boolean;
  mask: boolean;
  error: boolean;
  segmentation: boolean;
}

export interface SessionView {
  sessionId: string | null;
  cursor: number; // iteration index currently shown
  iterations: number[];
  maskAreaHistory: number[];
  brainArea: number;
  tau: number;
  status: string;
  terminationReason: string | null;
  overlayOpacity: number;
  layers: LayerToggles;
  /** Area history recorded just before the last rollback; drives the
   *  divergence marker after re-stepping with a different threshold. */
  referenceAreas: number[] | null;
  divergedAt: number | null;
}

export type ViewAction =
  | { kind: "session-updated"; payload: StatePayload }
  | { kind: "scrub"; iteration: number }
  | { kind: "set-tau"; tau: number }
  | { kind: "set-opacity"; opacity: number }
  | { kind: "toggle-layer"; layer: keyof LayerToggles }
  | { kind: "snapshot-reference" }
  | { kind: "reset" };

export function initialView(): SessionView {
  return {
    sessionId: null,
    cursor: 1,
    iterations: [],
    maskAreaHistory: [],
    brainArea: 0,
    tau: 0,
    status: "idle",
    terminationReason: null,
    overlayOpacity: 0.5,
    layers: { image: true, mask: true, error: true, segmentation: true },
    referenceAreas: null,
    divergedAt: null,
  };
}

export function firstDivergence(reference: number[], current: number[]): number | null {
  const shared = Math.min(reference.length, current.length);
  for (let i = 0; i < shared; i++) {
    if (reference[i] !== current[i]) return i + 1; // iterations are 1-based
  }
  if (reference.length !== current.length) return shared + 1;
  return null;
}

function clampCursor(cursor: number, iterations: number[]): number {
  if (iterations.length === 0) return 1;
  const last = iterations[iterations.length - 1];
  return Math.min(Math.max(cursor, iterations[0]), last);
}

export function reduce(view: SessionView, action: ViewAction): SessionView {
  switch (action.kind) {
    case "session-updated": {
      const p = action.payload;
      const divergedAt = view.referenceAreas
        ? firstDivergence(view.referenceAreas, p.mask_area_history)
        : null;
      return {
        ...view,
        sessionId: p.session_id,
        iterations: p.iterations,
        maskAreaHistory: p.mask_area_history,
        brainArea: p.brain_area,
        tau: p.tau,
        status: p.status,
        terminationReason: p.termination_reason,
        cursor: clampCursor(p.iteration, p.iterations),
        divergedAt,
      };
    }
    case "scrub":
      return { ...view, cursor: clampCursor(action.iteration, view.iterations) };
    case "set-tau": {
      if (!(action.tau > 0)) return view;
      return { ...view, tau: action.tau };
    }
    case "set-opacity":
      return { ...view, overlayOpacity: Math.min(1, Math.max(0, action.opacity)) };
    case "toggle-layer":
      return {
        ...view,
        layers: { ...view.layers, [action.layer]: !view.layers[action.layer] },
      };
    case "snapshot-reference":
      return { ...view, referenceAreas: [...view.maskAreaHistory], divergedAt: null };
    case "reset":
      return initialView();
    default:
      return view;
  }
}
