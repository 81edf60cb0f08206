import * as fs from "fs";
import * as path from "path";

import Papa from "papaparse";

import { Window } from "./features";

export interface ImuRecord {
  ts: number;
  ax: number;
  ay: number;
  az: number;
  label: number | null;
}

const REQUIRED = ["timestamp", "ax", "ay", "az"];

/** Parse one device-format CSV: timestamp,ax,ay,az[,label]. */
export function parseCorpusCsv(text: string, source = "corpus"): ImuRecord[] {
  const parsed = Papa.parse<Record<string, string>>(text, {
    header: true,
    skipEmptyLines: true,
  });
  if (parsed.errors.length > 0) {
    const e = parsed.errors[0];
    throw new Error(`${source}: ${e.message} (row ${e.row ?? "?"})`);
  }
  const fields = parsed.meta.fields ?? [];
  for (const col of REQUIRED) {
    if (!fields.includes(col)) {
      throw new Error(`${source}: missing column '${col}'`);
    }
  }
  const hasLabel = fields.includes("label");
  return parsed.data.map((row, i) => {
    const line = i + 2; // header is line 1
    const num = (col: string) => {
      const v = Number(row[col]);
      if (row[col] === undefined || row[col] === "" || !Number.isFinite(v)) {
        throw new Error(`${source} line ${line}: '${col}' is not a finite number`);
      }
      return v;
    };
    let label: number | null = null;
    if (hasLabel) {
      label = num("label");
      if (label !== 0 && label !== 1) {
        throw new Error(`${source} line ${line}: label must be 0 or 1`);
      }
    }
    return { ts: num("timestamp"), ax: num("ax"), ay: num("ay"), az: num("az"), label };
  });
}

/** Consecutive fixed-length windows; a window is a fall if any sample in
 * it is labelled positive. Mirrors the device client's windowing. */
export function makeWindows(
  records: ImuRecord[],
  windowLen = 24,
  stride?: number,
): Window[] {
  if (windowLen < 3) throw new Error(`window length ${windowLen} is below minimum 3`);
  const step = stride ?? windowLen;
  if (step < 1) throw new Error(`stride must be positive, got ${step}`);
  const out: Window[] = [];
  for (let start = 0; start + windowLen <= records.length; start += step) {
    const chunk = records.slice(start, start + windowLen);
    const labels = chunk.map((r) => r.label);
    let label: number | null = null;
    if (labels.every((v) => v !== null)) {
      label = labels.some((v) => v === 1) ? 1 : 0;
    }
    out.push({ samples: chunk.map((r) => [r.ax, r.ay, r.az]), label });
  }
  return out;
}

/** Load a corpus from one CSV file or every *.csv in a directory. */
export function loadCorpus(dataPath: string, windowLen = 24, stride?: number): Window[] {
  const files: string[] = [];
  const stat = fs.statSync(dataPath);
  if (stat.isDirectory()) {
    for (const name of fs.readdirSync(dataPath).sort()) {
      if (name.endsWith(".csv")) files.push(path.join(dataPath, name));
    }
    if (files.length === 0) throw new Error(`${dataPath}: no CSV files found`);
  } else {
    files.push(dataPath);
  }
  const windows: Window[] = [];
  for (const file of files) {
    const records = parseCorpusCsv(fs.readFileSync(file, "utf-8"), path.basename(file));
    windows.push(...makeWindows(records, windowLen, stride));
  }
  if (windows.length === 0) {
    throw new Error(`${dataPath}: corpus does not form any windows of ${windowLen} samples`);
  }
  return windows;
}
