import * as fs from "fs";
import * as os from "os";
import * as path from "path";

import { afterEach, describe, expect, it } from "vitest";

import { loadCorpus, makeWindows, parseCorpusCsv } from "../src/csv";
import { mulberry32 } from "../src/random";
import { corpusCsv, syntheticCorpus } from "./helpers";

const cleanups: string[] = [];

function tmpDir(): string {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "trainer-test-"));
  cleanups.push(dir);
  return dir;
}

afterEach(() => {
  while (cleanups.length) fs.rmSync(cleanups.pop()!, { recursive: true, force: true });
});

describe("parseCorpusCsv", () => {
  it("round-trips a generated corpus", () => {
    const corpus = syntheticCorpus(4, mulberry32(1));
    const records = parseCorpusCsv(corpusCsv(corpus));
    expect(records).toHaveLength(4 * 24);
    expect(records[0].label).toBe(0);
    expect(records[25].label).toBe(1);
    const w0 = corpus[0].samples[0];
    expect(records[0].ax).toBeCloseTo(w0[0], 6);
    expect(records[0].az).toBeCloseTo(w0[2], 6);
  });

  it("accepts an unlabelled file", () => {
    const text = "timestamp,ax,ay,az\n0.0,1,2,3\n0.032,4,5,6\n";
    const records = parseCorpusCsv(text);
    expect(records.map((r) => r.label)).toEqual([null, null]);
  });

  it("reports a missing column", () => {
    expect(() => parseCorpusCsv("timestamp,ax,ay\n0,1,2\n", "f.csv"))
      .toThrow(/f\.csv: missing column 'az'/);
  });

  it("reports a bad value with its line number", () => {
    const text = "timestamp,ax,ay,az\n0.0,1,2,3\n0.032,oops,5,6\n";
    expect(() => parseCorpusCsv(text)).toThrow(/line 3: 'ax' is not a finite number/);
  });

  it("rejects labels other than 0 and 1", () => {
    const text = "timestamp,ax,ay,az,label\n0.0,1,2,3,2\n";
    expect(() => parseCorpusCsv(text)).toThrow(/label must be 0 or 1/);
  });
});

describe("makeWindows", () => {
  const record = (label: number | null, v = 1) =>
    ({ ts: 0, ax: v, ay: v, az: v, label });

  it("chops fixed windows and drops the tail", () => {
    const records = Array.from({ length: 50 }, () => record(0));
    expect(makeWindows(records, 24)).toHaveLength(2);
    expect(makeWindows(records.slice(0, 23), 24)).toHaveLength(0);
  });

  it("marks a window positive when any sample is", () => {
    const records = Array.from({ length: 24 }, (_, i) => record(i === 20 ? 1 : 0));
    expect(makeWindows(records, 24)[0].label).toBe(1);
  });

  it("keeps windows unlabelled when any sample is", () => {
    const records = Array.from({ length: 24 }, (_, i) => record(i === 3 ? null : 0));
    expect(makeWindows(records, 24)[0].label).toBeNull();
  });

  it("supports a sliding stride", () => {
    const records = Array.from({ length: 30 }, () => record(0));
    expect(makeWindows(records, 24, 2)).toHaveLength(4);
  });

  it("validates window length and stride", () => {
    expect(() => makeWindows([], 2)).toThrow(/below minimum/);
    expect(() => makeWindows([], 24, 0)).toThrow(/stride/);
  });
});

describe("loadCorpus", () => {
  it("loads a single file", () => {
    const dir = tmpDir();
    const file = path.join(dir, "c.csv");
    fs.writeFileSync(file, corpusCsv(syntheticCorpus(3, mulberry32(2))));
    const windows = loadCorpus(file);
    expect(windows).toHaveLength(3);
    expect(windows.map((w) => w.label)).toEqual([0, 1, 0]);
  });

  it("concatenates every csv in a directory", () => {
    const dir = tmpDir();
    fs.writeFileSync(path.join(dir, "a.csv"),
      corpusCsv(syntheticCorpus(2, mulberry32(3))));
    fs.writeFileSync(path.join(dir, "b.csv"),
      corpusCsv(syntheticCorpus(3, mulberry32(4))));
    fs.writeFileSync(path.join(dir, "notes.txt"), "ignored");
    expect(loadCorpus(dir)).toHaveLength(5);
  });

  it("fails on a directory without csv files", () => {
    expect(() => loadCorpus(tmpDir())).toThrow(/no CSV files/);
  });

  it("fails when nothing forms a full window", () => {
    const dir = tmpDir();
    const file = path.join(dir, "short.csv");
    fs.writeFileSync(file, "timestamp,ax,ay,az\n0.0,1,2,3\n");
    expect(() => loadCorpus(file)).toThrow(/does not form any windows/);
  });
});
