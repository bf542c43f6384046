/**
 * Learning curves with mean +- std bands, one curve per variant, read from
 * the aggregate metrics CSVs that `wavedamp train` writes.
 */
import { num, readTable, requireColumns, SchemaError } from "./csv";
import { Figure, PALETTE } from "./svg";

export const AGGREGATE_SCHEMA = "wavedamp.metrics-aggregate/1";

export interface VariantInput {
  label: string;
  path: string;
}

export interface LearningCurveOpts {
  metric?: string; // aggregate column stem, default episode_return
  title?: string;
  xColumn?: "iteration" | "actual_steps";
}

export function plotLearningCurves(
  inputs: VariantInput[],
  opts: LearningCurveOpts = {}
): string {
  if (inputs.length === 0) {
    throw new SchemaError("learning-curve needs at least one variant input");
  }
  const metric = opts.metric ?? "episode_return";
  const meanCol = `${metric}_mean`;
  const stdCol = `${metric}_std`;
  const fig = new Figure({
    title: opts.title ?? "Training performance",
    xLabel: "iteration",
    yLabel: metric.replace(/_/g, " "),
  });
  const series = inputs.map((input) => {
    const table = readTable(input.path, AGGREGATE_SCHEMA);
    requireColumns(table, input.path, ["iteration", meanCol, stdCol]);
    const xs = table.rows.map((r) => num(r, "iteration"));
    const mean = table.rows.map((r) => num(r, meanCol));
    const std = table.rows.map((r) => num(r, stdCol));
    return { label: input.label, xs, mean, std };
  });
  let xMin = Infinity;
  let xMax = -Infinity;
  let yMin = Infinity;
  let yMax = -Infinity;
  for (const s of series) {
    for (let i = 0; i < s.xs.length; i++) {
      if (!Number.isFinite(s.mean[i])) continue;
      xMin = Math.min(xMin, s.xs[i]);
      xMax = Math.max(xMax, s.xs[i]);
      yMin = Math.min(yMin, s.mean[i] - s.std[i]);
      yMax = Math.max(yMax, s.mean[i] + s.std[i]);
    }
  }
  if (!Number.isFinite(xMin) || !Number.isFinite(yMin)) {
    throw new SchemaError("learning-curve inputs contain no finite values");
  }
  const pad = (yMax - yMin) * 0.05 || 1;
  const x = fig.xScale(xMin, xMax);
  const y = fig.yScale(yMin - pad, yMax + pad);
  fig.axes(x, y);
  series.forEach((s, k) => {
    const color = PALETTE[k % PALETTE.length];
    const ok = [...s.xs.keys()].filter((i) => Number.isFinite(s.mean[i]));
    const xs = ok.map((i) => s.xs[i]);
    const lo = ok.map((i) => s.mean[i] - s.std[i]);
    const hi = ok.map((i) => s.mean[i] + s.std[i]);
    fig.band(xs, lo, hi, x, y, color);
    fig.line(xs, ok.map((i) => s.mean[i]), x, y, color);
    fig.legend(s.label, color);
  });
  return fig.render();
}
