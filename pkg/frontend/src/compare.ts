/**
 * Dynamics-model comparison figure: test error vs training fraction with
 * error bars per model, plus a training-loss subplot when the loss CSV is
 * provided.
 */
import { num, readTable, requireColumns, SchemaError } from "./csv";
import { Figure, PALETTE, fmt } from "./svg";

export const COMPARE_SCHEMA = "wavedamp.model-compare/1";
export const COMPARE_LOSS_SCHEMA = "wavedamp.model-compare-loss/1";

interface Stat {
  fraction: number;
  mean: number;
  std: number;
}

function statsByModel(path: string): Map<string, Stat[]> {
  const table = readTable(path, COMPARE_SCHEMA);
  requireColumns(table, path, ["fraction", "repeat", "model", "test_rmse"]);
  if (table.rows.length === 0) {
    throw new SchemaError(`${path}: no comparison rows`);
  }
  const groups = new Map<string, Map<number, number[]>>();
  for (const row of table.rows) {
    const model = row.model;
    const fraction = num(row, "fraction");
    if (!groups.has(model)) groups.set(model, new Map());
    const byFrac = groups.get(model)!;
    if (!byFrac.has(fraction)) byFrac.set(fraction, []);
    byFrac.get(fraction)!.push(num(row, "test_rmse"));
  }
  const out = new Map<string, Stat[]>();
  for (const [model, byFrac] of [...groups.entries()].sort()) {
    const stats: Stat[] = [];
    for (const [fraction, vals] of [...byFrac.entries()].sort((a, b) => a[0] - b[0])) {
      const mean = vals.reduce((a, b) => a + b, 0) / vals.length;
      const variance = vals.reduce((a, b) => a + (b - mean) ** 2, 0) / vals.length;
      stats.push({ fraction, mean, std: Math.sqrt(variance) });
    }
    out.set(model, stats);
  }
  return out;
}

export function plotModelCompare(comparePath: string, lossPath?: string): string {
  const byModel = statsByModel(comparePath);
  const fig = new Figure({
    width: 960,
    height: 480,
    margins: { top: 48, right: 500, bottom: 56, left: 72 },
    title: "Dynamics model comparison",
    xLabel: "training fraction",
    yLabel: "test RMSE (m/s^2)",
  });
  let yMax = -Infinity;
  for (const stats of byModel.values()) {
    for (const s of stats) yMax = Math.max(yMax, s.mean + s.std);
  }
  const x = fig.xScale(0, 1.05);
  const y = fig.yScale(0, yMax * 1.1 || 1);
  fig.axes(x, y);
  let k = 0;
  for (const [model, stats] of byModel.entries()) {
    const color = PALETTE[k % PALETTE.length];
    fig.line(
      stats.map((s) => s.fraction),
      stats.map((s) => s.mean),
      x, y, color
    );
    for (const s of stats) {
      const px = x.at(s.fraction);
      fig.errorBar(px, y.at(s.mean - s.std), y.at(s.mean + s.std), color);
      fig.marker(px, y.at(s.mean), color);
    }
    fig.legend(model, color);
    k += 1;
  }
  if (lossPath) {
    renderLossInset(fig, lossPath);
  }
  return fig.render();
}

function renderLossInset(fig: Figure, lossPath: string): void {
  const table = readTable(lossPath, COMPARE_LOSS_SCHEMA);
  requireColumns(table, lossPath, ["model", "step", "loss"]);
  if (table.rows.length === 0) {
    throw new SchemaError(`${lossPath}: no loss rows`);
  }
  const byModel = new Map<string, { step: number; loss: number }[]>();
  for (const row of table.rows) {
    if (!byModel.has(row.model)) byModel.set(row.model, []);
    byModel.get(row.model)!.push({ step: num(row, "step"), loss: num(row, "loss") });
  }
  const left = fig.width - 440;
  const right = fig.width - 40;
  const top = fig.plotTop + 20;
  const bottom = fig.plotBottom - 20;
  let stepMax = 0;
  let lossMax = -Infinity;
  for (const curve of byModel.values()) {
    for (const p of curve) {
      stepMax = Math.max(stepMax, p.step);
      lossMax = Math.max(lossMax, p.loss);
    }
  }
  fig.raw(
    `<rect x="${fmt(left)}" y="${fmt(top)}" width="${fmt(right - left)}" height="${fmt(bottom - top)}" fill="none" stroke="#999"/>`
  );
  fig.raw(
    `<text x="${fmt((left + right) / 2)}" y="${fmt(top - 6)}" text-anchor="middle" font-size="12" font-family="Helvetica, Arial, sans-serif">training loss (MSE)</text>`
  );
  const px = (step: number) => left + (step / (stepMax || 1)) * (right - left);
  const py = (loss: number) => bottom - (loss / (lossMax || 1)) * (bottom - top);
  let k = 0;
  for (const [model, curve] of [...byModel.entries()].sort()) {
    const color = PALETTE[k % PALETTE.length];
    const pts = curve
      .sort((a, b) => a.step - b.step)
      .map((p) => `${fmt(px(p.step))},${fmt(py(p.loss))}`);
    fig.raw(
      `<polyline class="loss-curve" data-model="${model}" points="${pts.join(" ")}" fill="none" stroke="${color}" stroke-width="1.5"/>`
    );
    k += 1;
  }
}
