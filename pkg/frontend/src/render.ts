/** Compositing math for the viewer. Everything here is pure array code
 *  so it is testable without a canvas; main.ts owns the actual canvas. */

import type { LayerToggles } from "./state.js";

export interface CompositeInputs {
  /** normalized grayscale base image, values in [0,1], row-major */
  image: number[][];
  /** binary mask plane (current iteration) */
  mask: number[][];
  /** error values under the mask, arbitrary non-negative scale */
  error: number[][];
  /** binary segmentation preview plane */
  segmentation: number[][];
}

const MASK_COLOR = [64, 118, 255] as const;
const SEGMENTATION_COLOR = [255, 64, 64] as const;

/** Small fixed heat gradient (dark violet -> orange -> light yellow). */
export function heatColor(t: number): [number, number, number] {
  const x = Math.min(1, Math.max(0, t));
  const stops: Array<[number, [number, number, number]]> = [
    [0.0, [12, 6, 38]],
    [0.35, [120, 28, 109]],
    [0.7, [237, 105, 37]],
    [1.0, [250, 235, 160]],
  ];
  for (let i = 1; i < stops.length; i++) {
    if (x <= stops[i][0]) {
      const [t0, c0] = stops[i - 1];
      const [t1, c1] = stops[i];
      const u = (x - t0) / (t1 - t0);
      return [
        Math.round(c0[0] + u * (c1[0] - c0[0])),
        Math.round(c0[1] + u * (c1[1] - c0[1])),
        Math.round(c0[2] + u * (c1[2] - c0[2])),
      ];
    }
  }
  return stops[stops.length - 1][1];
}

/** Boundary pixels of a binary plane: set pixels with a 4-neighbour off
 *  the set (or on the border). Rendering transform only. */
export function maskOutline(mask: number[][]): boolean[][] {
  const h = mask.length;
  const w = h > 0 ? mask[0].length : 0;
  const outline: boolean[][] = Array.from({ length: h }, () => Array(w).fill(false));
  for (let i = 0; i < h; i++) {
    for (let j = 0; j < w; j++) {
      if (!mask[i][j]) continue;
      const edge =
        i === 0 || j === 0 || i === h - 1 || j === w - 1 ||
        !mask[i - 1][j] || !mask[i + 1][j] || !mask[i][j - 1] || !mask[i][j + 1];
      outline[i][j] = edge;
    }
  }
  return outline;
}

export function normalizePlane(values: number[][]): number[][] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const row of values) {
    for (const v of row) {
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
  }
  const span = hi - lo;
  return values.map((row) => row.map((v) => (span > 0 ? (v - lo) / span : 0)));
}

/** Composite the enabled layers into an RGBA buffer (row-major, 4 bytes
 *  per pixel). The mask is drawn as an outline, the error map as a heat
 *  overlay under the mask, the segmentation as a filled tint. */
export function compositeIteration(
  inputs: CompositeInputs,
  layers: LayerToggles,
  overlayOpacity: number,
): Uint8ClampedArray {
  const h = inputs.image.length;
  const w = h > 0 ? inputs.image[0].length : 0;
  const out = new Uint8ClampedArray(h * w * 4);
  const errorNorm = normalizePlane(inputs.error);
  const outline = layers.mask ? maskOutline(inputs.mask) : null;

  for (let i = 0; i < h; i++) {
    for (let j = 0; j < w; j++) {
      const base = layers.image ? Math.min(1, Math.max(0, inputs.image[i][j])) : 0;
      let r = base * 255;
      let g = base * 255;
      let b = base * 255;

      if (layers.error && inputs.mask[i][j]) {
        const [hr, hg, hb] = heatColor(errorNorm[i][j]);
        r = r * (1 - overlayOpacity) + hr * overlayOpacity;
        g = g * (1 - overlayOpacity) + hg * overlayOpacity;
        b = b * (1 - overlayOpacity) + hb * overlayOpacity;
      }
      if (layers.segmentation && inputs.segmentation[i][j]) {
        r = r * 0.35 + SEGMENTATION_COLOR[0] * 0.65;
        g = g * 0.35 + SEGMENTATION_COLOR[1] * 0.65;
        b = b * 0.35 + SEGMENTATION_COLOR[2] * 0.65;
      }
      if (outline && outline[i][j]) {
        [r, g, b] = MASK_COLOR;
      }

      const k = (i * w + j) * 4;
      out[k] = r;
      out[k + 1] = g;
      out[k + 2] = b;
      out[k + 3] = 255;
    }
  }
  return out;
}

/** Polyline points for the mask-area sparkline, scaled into a
 *  width x height box; areas are normalized by the brain area. */
export function sparklinePoints(
  areas: number[],
  brainArea: number,
  width: number,
  height: number,
): Array<[number, number]> {
  if (areas.length === 0 || brainArea <= 0) return [];
  const dx = areas.length > 1 ? width / (areas.length - 1) : 0;
  return areas.map((area, idx) => {
    const frac = Math.min(1, area / brainArea);
    return [idx * dx, height - frac * height];
  });
}
