import * as fs from "fs";
import * as path from "path";

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { loadCorpus } from "./csv";
import { crossValAccuracy, stratifiedSplit } from "./dataset";
import {
  DEFAULT_WINDOW,
  FEATURE_KINDS,
  FeatureKind,
  featureMatrix,
} from "./features";
import {
  CLASSIFIER_KINDS,
  ClassifierKind,
  L2_GRID,
  Metrics,
  buildDoc,
  metricsOf,
  modelJson,
  predict,
  trainLogistic,
  trainNb,
  trainSvm,
} from "./models";
import { mulberry32 } from "./random";

export interface TrainingConfig {
  data: string;
  features: FeatureKind;
  classifier: ClassifierKind | "all";
  out: string;
  seed: number;
  ratio: number;
  folds: number;
  windowLen: number;
  stride?: number;
  /** Gradient-descent iterations; lowered in tests to keep them quick. */
  iters?: number;
}

export interface TrainedModel {
  classifier: ClassifierKind;
  features: FeatureKind;
  file: string;
  l2: number | null;
  cvAccuracy: number;
  test: Metrics;
}

function fitFor(kind: ClassifierKind, l2: number | null, iters?: number) {
  return (X: number[][], y: number[]) => {
    if (kind === "nb") {
      return trainNb(X, y);
    }
    const fit = kind === "lr" ? trainLogistic : trainSvm;
    return fit(X, y, { l2: l2 ?? undefined, iters });
  };
}

/** Train one (classifier, feature kind) pair: pick the regularization by
 * k-fold cross-validation on the training split, refit on the whole
 * split, score the held-out test rows, export the model document. */
function trainOne(
  kind: ClassifierKind,
  cfg: TrainingConfig,
  split: ReturnType<typeof stratifiedSplit>,
): TrainedModel {
  const rand = mulberry32(cfg.seed ^ 0x5f3759df);
  let bestL2: number | null = null;
  let bestCv = -1;
  for (const l2 of L2_GRID[kind]) {
    const cv = crossValAccuracy(split.trainX, split.trainY, cfg.folds, rand, (X, y) => {
      const doc = buildDoc(kind, cfg.features, cfg.windowLen, X, y, {
        l2: l2 ?? undefined,
        iters: cfg.iters,
      });
      return (x) => predict(doc, x);
    });
    if (cv > bestCv) {
      bestCv = cv;
      bestL2 = l2;
    }
  }
  const doc = buildDoc(kind, cfg.features, cfg.windowLen, split.trainX, split.trainY, {
    l2: bestL2 ?? undefined,
    iters: cfg.iters,
  });
  const predicted = split.testX.map((x) => predict(doc, x));
  const test = metricsOf(split.testY, predicted);
  const file = path.join(cfg.out, `${kind}_${cfg.features}.json`);
  fs.writeFileSync(file, modelJson(doc));
  return { classifier: kind, features: cfg.features, file, l2: bestL2, cvAccuracy: bestCv, test };
}

export function runTraining(cfg: TrainingConfig): TrainedModel[] {
  if (!(cfg.ratio > 0 && cfg.ratio < 1)) {
    throw new Error(`split ratio must be in (0, 1), got ${cfg.ratio}`);
  }
  if (cfg.folds < 2) {
    throw new Error(`cross-validation needs >= 2 folds, got ${cfg.folds}`);
  }
  const windows = loadCorpus(cfg.data, cfg.windowLen, cfg.stride);
  const { X, y } = featureMatrix(windows, cfg.features);
  const split = stratifiedSplit(X, y, cfg.ratio, mulberry32(cfg.seed));
  fs.mkdirSync(cfg.out, { recursive: true });

  const kinds: ClassifierKind[] =
    cfg.classifier === "all" ? CLASSIFIER_KINDS : [cfg.classifier];
  const results = kinds.map((kind) => trainOne(kind, cfg, split));
  writeMetricsCsv(path.join(cfg.out, "metrics.csv"), results);
  return results;
}

function writeMetricsCsv(file: string, rows: TrainedModel[]) {
  const lines = [
    // metrics pool windows across the whole corpus; no per-user folds
    "# pooled-window metrics",
    "classifier,features,l2,cv_accuracy,tp,fp,tn,fn,accuracy,precision,recall,f1",
  ];
  for (const r of rows) {
    const m = r.test;
    lines.push(
      [
        r.classifier,
        r.features,
        r.l2 ?? "",
        r.cvAccuracy.toFixed(4),
        m.tp,
        m.fp,
        m.tn,
        m.fn,
        m.accuracy.toFixed(4),
        m.precision.toFixed(4),
        m.recall.toFixed(4),
        m.f1.toFixed(4),
      ].join(","),
    );
  }
  fs.writeFileSync(file, lines.join("\n") + "\n");
}

function main() {
  const argv = yargs(hideBin(process.argv))
    .usage("train --data <csv-or-dir> --features <kind> --out <dir>")
    .option("data", { type: "string", demandOption: true, describe: "labelled CSV file or directory of CSVs" })
    .option("features", { choices: FEATURE_KINDS, default: "derivative" as FeatureKind })
    .option("classifier", { choices: [...CLASSIFIER_KINDS, "all"] as const, default: "all" as const })
    .option("out", { type: "string", demandOption: true, describe: "output directory for model JSON + metrics.csv" })
    .option("seed", { type: "number", default: 0 })
    .option("ratio", { type: "number", default: 0.8, describe: "training share of the 80:20-style split" })
    .option("folds", { type: "number", default: 5 })
    .option("window", { type: "number", default: DEFAULT_WINDOW })
    .option("stride", { type: "number" })
    .strict()
    .parseSync();

  try {
    const results = runTraining({
      data: argv.data,
      features: argv.features,
      classifier: argv.classifier,
      out: argv.out,
      seed: argv.seed,
      ratio: argv.ratio,
      folds: argv.folds,
      windowLen: argv.window,
      stride: argv.stride,
    });
    console.log("pooled-window metrics (train ratio "
      + `${argv.ratio}, ${argv.folds}-fold CV)`);
    for (const r of results) {
      console.log(
        `${r.classifier.padEnd(3)} + ${r.features.padEnd(10)} ` +
          `l2=${r.l2 ?? "-"} cv=${r.cvAccuracy.toFixed(3)} ` +
          `test acc=${r.test.accuracy.toFixed(3)} f1=${r.test.f1.toFixed(3)} ` +
          `-> ${r.file}`,
      );
    }
  } catch (e) {
    console.error(`error: ${(e as Error).message}`);
    process.exitCode = 2;
  }
}

if (require.main === module) {
  main();
}
