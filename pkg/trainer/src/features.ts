/** Plaintext feature pipelines, kept numerically in lockstep with the
 * inference service's oracle (same windowing, same boundary handling,
 * same operation order). A golden fixture shared with that package pins
 * the agreement to 1e-9. */

export type FeatureKind = "smartfall" | "derivative";

export const FEATURE_KINDS: FeatureKind[] = ["smartfall", "derivative"];
export const DEFAULT_WINDOW = 24;

export interface Window {
  /** (L, 3) accelerometer samples in g. */
  samples: number[][];
  /** 1 = fall, 0 = ADL, null = unlabelled. */
  label: number | null;
}

export function featureDimension(kind: FeatureKind, windowLen: number): number {
  if (kind === "smartfall") return windowLen + 1;
  return 6;
}

/** One (L, 3) window to its feature vector. */
export function extractFeatures(samples: number[][], kind: FeatureKind): number[] {
  const L = samples.length;
  if (kind === "smartfall") {
    const mags = new Array<number>(L);
    for (let i = 0; i < L; i++) {
      const [x, y, z] = samples[i];
      mags[i] = Math.sqrt(x * x + y * y + z * z);
    }
    const spread = Math.max(...mags) - Math.min(...mags);
    return [...mags, spread];
  }
  if (L < 3) {
    throw new Error(`window of ${L} samples is too short for derivative features`);
  }
  // central difference d[k] = 0.5 * (w[k+2] - w[k]), then per-channel
  // sums of d and d^2 over the L-2 interior samples
  const sums = [0, 0, 0];
  const sqSums = [0, 0, 0];
  for (let k = 0; k + 2 < L; k++) {
    for (let c = 0; c < 3; c++) {
      const d = 0.5 * (samples[k + 2][c] - samples[k][c]);
      sums[c] += d;
      sqSums[c] += d * d;
    }
  }
  return [...sums, ...sqSums];
}

export function featureMatrix(windows: Window[], kind: FeatureKind): {
  X: number[][];
  y: number[];
} {
  const X = windows.map((w) => extractFeatures(w.samples, kind));
  const y = windows.map((w) => {
    if (w.label === null) {
      throw new Error("training corpus must carry ground-truth labels");
    }
    return w.label;
  });
  return { X, y };
}
