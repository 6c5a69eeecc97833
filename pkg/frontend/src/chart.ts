// Moving-window intervention-rate series (window of 50 steps).

export const RATE_WINDOW = 50;

export function ratePoint(flags: ArrayLike<number>, t: number, window = RATE_WINDOW): number {
  const lo = Math.max(0, t + 1 - window);
  let sum = 0;
  for (let i = lo; i <= t; i++) sum += flags[i] ? 1 : 0;
  return sum / (t + 1 - lo);
}

export function interventionRateSeries(flags: ArrayLike<number>, window = RATE_WINDOW): number[] {
  const out = new Array<number>(flags.length);
  for (let t = 0; t < flags.length; t++) out[t] = ratePoint(flags, t, window);
  return out;
}
