import { shuffled } from "./random";

export interface Split {
  trainX: number[][];
  trainY: number[];
  testX: number[][];
  testY: number[];
}

/** Stratified train/test split: each class contributes `ratio` of its
 * rows to the training side, shuffled by the caller's PRNG. */
export function stratifiedSplit(
  X: number[][],
  y: number[],
  ratio: number,
  rand: () => number,
): Split {
  if (!(ratio > 0 && ratio < 1)) {
    throw new Error(`split ratio must be in (0, 1), got ${ratio}`);
  }
  const split: Split = { trainX: [], trainY: [], testX: [], testY: [] };
  for (const cls of [0, 1]) {
    const idx = shuffled(
      y.map((v, i) => i).filter((i) => y[i] === cls),
      rand,
    );
    const cut = Math.round(idx.length * ratio);
    for (let k = 0; k < idx.length; k++) {
      const i = idx[k];
      if (k < cut) {
        split.trainX.push(X[i]);
        split.trainY.push(y[i]);
      } else {
        split.testX.push(X[i]);
        split.testY.push(y[i]);
      }
    }
  }
  return split;
}

/** Round-robin fold assignment over a shuffled index, so fold sizes
 * differ by at most one row. */
export function kFoldIndices(n: number, folds: number, rand: () => number): number[][] {
  if (folds < 2) throw new Error(`cross-validation needs >= 2 folds, got ${folds}`);
  if (folds > n) throw new Error(`${folds} folds over ${n} rows`);
  const order = shuffled(Array.from({ length: n }, (_, i) => i), rand);
  const parts: number[][] = Array.from({ length: folds }, () => []);
  order.forEach((idx, k) => parts[k % folds].push(idx));
  return parts;
}

/** Mean held-out-fold accuracy of fit() across k folds. */
export function crossValAccuracy(
  X: number[][],
  y: number[],
  folds: number,
  rand: () => number,
  fit: (X: number[][], y: number[]) => (x: number[]) => number,
): number {
  const parts = kFoldIndices(X.length, folds, rand);
  let correct = 0;
  for (const holdout of parts) {
    const mask = new Set(holdout);
    const trX: number[][] = [];
    const trY: number[] = [];
    for (let i = 0; i < X.length; i++) {
      if (!mask.has(i)) {
        trX.push(X[i]);
        trY.push(y[i]);
      }
    }
    const predict = fit(trX, trY);
    for (const i of holdout) {
      if (predict(X[i]) === y[i]) correct++;
    }
  }
  return correct / X.length;
}
