import * as fs from "fs";
import * as os from "os";
import * as path from "path";

import { afterEach, describe, expect, it } from "vitest";

import { runTraining, TrainingConfig } from "../src/train";
import { mulberry32 } from "../src/random";
import { corpusCsv, syntheticCorpus } from "./helpers";

const cleanups: string[] = [];

function tmpDir(): string {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "trainer-e2e-"));
  cleanups.push(dir);
  return dir;
}

afterEach(() => {
  while (cleanups.length) fs.rmSync(cleanups.pop()!, { recursive: true, force: true });
});

function writeCorpus(count: number, seed: number): string {
  const dir = tmpDir();
  const file = path.join(dir, "corpus.csv");
  fs.writeFileSync(file, corpusCsv(syntheticCorpus(count, mulberry32(seed))));
  return file;
}

function config(over: Partial<TrainingConfig>): TrainingConfig {
  return {
    data: "",
    features: "derivative",
    classifier: "all",
    out: tmpDir(),
    seed: 7,
    ratio: 0.8,
    folds: 5,
    windowLen: 24,
    iters: 400, // plenty for the separable corpus, keeps the test quick
    ...over,
  };
}

describe("runTraining", () => {
  it("trains, scores and exports all three classifiers", () => {
    const cfg = config({ data: writeCorpus(100, 21) });
    const results = runTraining(cfg);
    expect(results.map((r) => r.classifier)).toEqual(["lr", "svm", "nb"]);
    for (const r of results) {
      expect(fs.existsSync(r.file)).toBe(true);
      const doc = JSON.parse(fs.readFileSync(r.file, "utf-8"));
      expect(doc.feature_kind).toBe("derivative");
      expect(doc.dimension).toBe(6);
      // separable corpus: every classifier should be perfect
      expect(r.test.accuracy).toBe(1);
      expect(r.cvAccuracy).toBe(1);
    }
    const metrics = fs.readFileSync(path.join(cfg.out, "metrics.csv"), "utf-8");
    const lines = metrics.trim().split("\n");
    expect(lines[0]).toMatch(/^# pooled-window/);
    expect(lines[1]).toMatch(/^classifier,features,l2/);
    expect(lines).toHaveLength(5);
  });

  it("exports identical bytes for one seed", () => {
    const data = writeCorpus(60, 22);
    const a = runTraining(config({ data, classifier: "svm" }));
    const b = runTraining(config({ data, classifier: "svm" }));
    expect(fs.readFileSync(a[0].file, "utf-8"))
      .toBe(fs.readFileSync(b[0].file, "utf-8"));
  });

  it("works with smartfall features too", () => {
    const cfg = config({
      data: writeCorpus(80, 23),
      features: "smartfall",
      classifier: "svm",
    });
    const [r] = runTraining(cfg);
    const doc = JSON.parse(fs.readFileSync(r.file, "utf-8"));
    expect(doc.dimension).toBe(25);
    expect(r.test.accuracy).toBe(1);
  });

  it("rejects a single-class corpus", () => {
    const dir = tmpDir();
    const file = path.join(dir, "c.csv");
    const corpus = syntheticCorpus(20, mulberry32(24))
      .map((w) => ({ ...w, label: 0 }));
    fs.writeFileSync(file, corpusCsv(corpus));
    expect(() => runTraining(config({ data: file, classifier: "svm" })))
      .toThrow(/single class/);
  });

  it("validates ratio and folds", () => {
    const data = writeCorpus(20, 25);
    expect(() => runTraining(config({ data, ratio: 1.5 }))).toThrow(/ratio/);
    expect(() => runTraining(config({ data, folds: 1 }))).toThrow(/folds/);
  });
});
