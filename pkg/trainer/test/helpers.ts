import { Window } from "../src/features";

/** Near-still gravity window: tiny wobble around (0, 0, 1) g. */
export function quietWindow(rand: () => number, length = 24): number[][] {
  const rows: number[][] = [];
  for (let k = 0; k < length; k++) {
    rows.push([
      0.02 * (rand() - 0.5),
      0.02 * (rand() - 0.5),
      1 + 0.02 * (rand() - 0.5),
    ]);
  }
  return rows;
}

/** Violent period-4 square wave, far from any quiet window in both
 * feature spaces. */
export function activeWindow(rand: () => number, length = 24): number[][] {
  const rows: number[][] = [];
  for (let k = 0; k < length; k++) {
    const level = Math.floor(k / 2) % 2 === 0 ? 4 : -4;
    rows.push([
      level + 0.1 * (rand() - 0.5),
      -level + 0.1 * (rand() - 0.5),
      1 + 0.1 * (rand() - 0.5),
    ]);
  }
  return rows;
}

/** Linearly separable labelled corpus, alternating quiet and active. */
export function syntheticCorpus(count: number, rand: () => number): Window[] {
  const out: Window[] = [];
  for (let i = 0; i < count; i++) {
    const fall = i % 2 === 1;
    out.push({
      samples: fall ? activeWindow(rand) : quietWindow(rand),
      label: fall ? 1 : 0,
    });
  }
  return out;
}

/** Device-format CSV text for a labelled corpus. */
export function corpusCsv(windows: Window[], rateHz = 31.25): string {
  const lines = ["timestamp,ax,ay,az,label"];
  let k = 0;
  for (const w of windows) {
    for (const [ax, ay, az] of w.samples) {
      lines.push(
        `${(k / rateHz).toFixed(3)},${ax.toFixed(6)},${ay.toFixed(6)},` +
          `${az.toFixed(6)},${w.label}`,
      );
      k++;
    }
  }
  return lines.join("\n") + "\n";
}
