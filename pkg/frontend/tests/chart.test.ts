import { describe, expect, it } from "vitest";

import { interventionRateSeries, ratePoint } from "../src/chart";

describe("intervention-rate window", () => {
  it("computes 11 overrides in a 50-step window as 0.22", () => {
    const flags = new Array(50).fill(0);
    for (let i = 0; i < 11; i++) flags[i * 4] = 1;
    expect(ratePoint(flags, 49)).toBeCloseTo(0.22, 12);
  });

  it("uses the partial prefix before the window fills", () => {
    const flags = [1, 0, 0, 1];
    expect(interventionRateSeries(flags)).toEqual([1, 0.5, 1 / 3, 0.5]);
  });

  it("slides: old flags fall out of the window", () => {
    const flags = new Array(60).fill(0);
    flags[0] = 1; // falls out of the 50-window after t >= 50
    const series = interventionRateSeries(flags);
    expect(series[49]).toBeCloseTo(1 / 50, 12);
    expect(series[50]).toBe(0);
  });

  it("is all ones under constant overrides", () => {
    const series = interventionRateSeries(new Array(120).fill(1));
    expect(series.every((v) => v === 1)).toBe(true);
  });
});
