/** Classifier fitting plus export in the inference service's model JSON
 * schema. The fits are plain full-batch gradient descent / closed-form
 * Gaussian estimates: linear models on 25 features do not need more. */

import { FeatureKind, featureDimension } from "./features";

export type ClassifierKind = "lr" | "svm" | "nb";
export const CLASSIFIER_KINDS: ClassifierKind[] = ["lr", "svm", "nb"];

export const FRAC_BITS = 16;
/** Sigma floor keeps |x - mu| / sigma within the shared fixed-point
 * arithmetic range of the inference side. */
export const Z_CAP = 100.0;

/** Regularization grid searched by cross-validation; NB has nothing to
 * tune. */
export const L2_GRID: Record<ClassifierKind, (number | null)[]> = {
  lr: [1e-4, 1e-3, 1e-2],
  svm: [1e-4, 1e-3, 1e-2],
  nb: [null],
};

export interface ModelDoc {
  kind: ClassifierKind;
  feature_kind: FeatureKind;
  dimension: number;
  frac_bits: number;
  weights: number[] | null;
  bias: number | null;
  means: number[][] | null;
  variances: number[][] | null;
  log_priors: number[] | null;
}

export interface FitOptions {
  l2?: number;
  iters?: number;
  lr?: number;
}

interface Standardized {
  Z: number[][];
  mu: number[];
  sd: number[];
}

function standardize(X: number[][]): Standardized {
  const n = X.length;
  const d = X[0].length;
  const mu = new Array<number>(d).fill(0);
  const sd = new Array<number>(d).fill(0);
  for (const row of X) for (let j = 0; j < d; j++) mu[j] += row[j];
  for (let j = 0; j < d; j++) mu[j] /= n;
  for (const row of X) {
    for (let j = 0; j < d; j++) {
      const t = row[j] - mu[j];
      sd[j] += t * t;
    }
  }
  for (let j = 0; j < d; j++) {
    sd[j] = Math.sqrt(sd[j] / n);
    if (sd[j] < 1e-9) sd[j] = 1.0;
  }
  const Z = X.map((row) => row.map((v, j) => (v - mu[j]) / sd[j]));
  return { Z, mu, sd };
}

function unstandardize(w: number[], b: number, mu: number[], sd: number[]) {
  const weights = w.map((v, j) => v / sd[j]);
  let bias = b;
  for (let j = 0; j < w.length; j++) bias -= weights[j] * mu[j];
  return { weights, bias };
}

function checkBothClasses(y: number[]) {
  const pos = y.filter((v) => v === 1).length;
  if (pos === 0 || pos === y.length) {
    throw new Error("training data contains a single class");
  }
}

/** Gradient descent on a margin loss over standardized features; the
 * loss gradient g(margin) is the only thing that differs between the
 * logistic and squared-hinge fits. */
function descend(
  X: number[][],
  y: number[],
  l2: number,
  iters: number,
  lr: number,
  lossGrad: (margin: number) => number,
): { weights: number[]; bias: number } {
  checkBothClasses(y);
  const { Z, mu, sd } = standardize(X);
  const n = Z.length;
  const d = Z[0].length;
  const s = y.map((v) => 2 * v - 1);
  const w = new Array<number>(d).fill(0);
  let b = 0;
  const gw = new Array<number>(d);
  for (let k = 0; k < iters; k++) {
    gw.fill(0);
    let gb = 0;
    for (let i = 0; i < n; i++) {
      const row = Z[i];
      let margin = b;
      for (let j = 0; j < d; j++) margin += row[j] * w[j];
      const g = s[i] * lossGrad(s[i] * margin);
      for (let j = 0; j < d; j++) gw[j] += row[j] * g;
      gb += g;
    }
    const step = lr / (1 + k / 1000);
    for (let j = 0; j < d; j++) w[j] -= step * (gw[j] / n + l2 * w[j]);
    b -= step * (gb / n);
  }
  return unstandardize(w, b, mu, sd);
}

export function trainLogistic(X: number[][], y: number[], opt: FitOptions = {}) {
  const { l2 = 1e-3, iters = 3000, lr = 0.3 } = opt;
  return descend(X, y, l2, iters, lr, (m) => -1 / (1 + Math.exp(m)));
}

export function trainSvm(X: number[][], y: number[], opt: FitOptions = {}) {
  const { l2 = 1e-3, iters = 3000, lr = 0.2 } = opt;
  // squared hinge: d/dm max(0, 1-m)^2 = -2 * max(0, 1-m)
  return descend(X, y, l2 * 2, iters, lr, (m) => -2 * Math.max(0, 1 - m));
}

export function trainNb(X: number[][], y: number[]) {
  checkBothClasses(y);
  const d = X[0].length;
  const means: number[][] = [];
  const variances: number[][] = [];
  const logPriors: number[] = [];
  for (const cls of [0, 1]) {
    const rows = X.filter((_, i) => y[i] === cls);
    const mu = new Array<number>(d).fill(0);
    for (const row of rows) for (let j = 0; j < d; j++) mu[j] += row[j];
    for (let j = 0; j < d; j++) mu[j] /= rows.length;
    const sd = new Array<number>(d).fill(0);
    for (const row of rows) {
      for (let j = 0; j < d; j++) {
        const t = row[j] - mu[j];
        sd[j] += t * t;
      }
    }
    for (let j = 0; j < d; j++) {
      sd[j] = Math.sqrt(sd[j] / rows.length);
      // floor sigma so no corpus point lands beyond Z_CAP deviations
      let reach = 0;
      for (const row of X) reach = Math.max(reach, Math.abs(row[j] - mu[j]));
      sd[j] = Math.max(sd[j], reach / Z_CAP, 1e-3);
    }
    means.push(mu);
    variances.push(sd.map((v) => v * v));
    logPriors.push(Math.log(rows.length / X.length));
  }
  return { means, variances, logPriors };
}

export function buildDoc(
  kind: ClassifierKind,
  featureKind: FeatureKind,
  windowLen: number,
  X: number[][],
  y: number[],
  opt: FitOptions = {},
): ModelDoc {
  const doc: ModelDoc = {
    kind,
    feature_kind: featureKind,
    dimension: featureDimension(featureKind, windowLen),
    frac_bits: FRAC_BITS,
    weights: null,
    bias: null,
    means: null,
    variances: null,
    log_priors: null,
  };
  if (doc.dimension !== X[0].length) {
    throw new Error(
      `feature rows have ${X[0].length} entries, expected ${doc.dimension}`,
    );
  }
  const round8 = (v: number) => Math.round(v * 1e8) / 1e8;
  if (kind === "nb") {
    const { means, variances, logPriors } = trainNb(X, y);
    doc.means = means.map((row) => row.map(round8));
    doc.variances = variances.map((row) => row.map(round8));
    doc.log_priors = logPriors.map(round8);
  } else {
    const fit = kind === "lr" ? trainLogistic : trainSvm;
    const { weights, bias } = fit(X, y, opt);
    doc.weights = weights.map(round8);
    doc.bias = round8(bias);
  }
  return doc;
}

/** Decision score whose sign is the label, matching the inference
 * service's plaintext rule (NB compares squared z-distances plus the
 * prior gap; no normalization term). */
export function margin(doc: ModelDoc, x: number[]): number {
  if (x.length !== doc.dimension) {
    throw new Error(`feature vector has ${x.length} entries, model wants ${doc.dimension}`);
  }
  if (doc.kind === "nb") {
    const { means, variances, log_priors } = doc;
    if (!means || !variances || !log_priors) throw new Error("incomplete nb model");
    let s = log_priors[1] - log_priors[0];
    for (let j = 0; j < x.length; j++) {
      const t0 = (x[j] - means[0][j]) ** 2 / (2 * variances[0][j]);
      const t1 = (x[j] - means[1][j]) ** 2 / (2 * variances[1][j]);
      s += t0 - t1;
    }
    return s;
  }
  if (!doc.weights || doc.bias === null) throw new Error("incomplete linear model");
  let s = doc.bias;
  for (let j = 0; j < x.length; j++) s += doc.weights[j] * x[j];
  return s;
}

export function predict(doc: ModelDoc, x: number[]): number {
  return margin(doc, x) >= 0 ? 1 : 0;
}

export interface Metrics {
  tp: number;
  fp: number;
  tn: number;
  fn: number;
  accuracy: number;
  precision: number;
  recall: number;
  f1: number;
}

export function metricsOf(truth: number[], predicted: number[]): Metrics {
  let tp = 0;
  let fp = 0;
  let tn = 0;
  let fn = 0;
  for (let i = 0; i < truth.length; i++) {
    if (truth[i] === 1) predicted[i] === 1 ? tp++ : fn++;
    else predicted[i] === 1 ? fp++ : tn++;
  }
  const total = tp + fp + tn + fn;
  const precision = tp + fp ? tp / (tp + fp) : 0;
  const recall = tp + fn ? tp / (tp + fn) : 0;
  const f1 = precision + recall ? (2 * precision * recall) / (precision + recall) : 0;
  return { tp, fp, tn, fn, accuracy: total ? (tp + tn) / total : 0, precision, recall, f1 };
}

/** Serialize with sorted keys, one-space indent and a trailing newline,
 * the same shape the inference package freezes its bundled models in. */
export function modelJson(doc: ModelDoc): string {
  const plain = doc as unknown as Record<string, unknown>;
  const sorted: Record<string, unknown> = {};
  for (const key of Object.keys(plain).sort()) {
    sorted[key] = plain[key];
  }
  return JSON.stringify(sorted, null, 1) + "\n";
}
