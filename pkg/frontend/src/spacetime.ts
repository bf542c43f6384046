/**
 * Space-time renderings of exported trajectories: per-vehicle position lines
 * colored by velocity (CAVs drawn on top, thicker), and a binned mean-velocity
 * heatmap over the time-space plane.
 */
import { num, readTable, requireColumns, SchemaError } from "./csv";
import { Figure, fmt, velocityColor } from "./svg";

export const TRAJECTORY_SCHEMA = "wavedamp.trajectories/1";

interface Point {
  t: number;
  pos: number;
  v: number;
}

interface Track {
  id: string;
  kind: string;
  points: Point[];
}

function loadTracks(path: string) {
  const table = readTable(path, TRAJECTORY_SCHEMA);
  requireColumns(table, path, ["t", "vehicle_id", "route_pos", "velocity", "kind"]);
  if (table.rows.length === 0) {
    throw new SchemaError(`${path}: no trajectory rows`);
  }
  const tracks = new Map<string, Track>();
  let tMax = -Infinity;
  let posMin = Infinity;
  let posMax = -Infinity;
  let vMin = Infinity;
  let vMax = -Infinity;
  for (const row of table.rows) {
    const id = row.vehicle_id;
    let track = tracks.get(id);
    if (!track) {
      track = { id, kind: row.kind, points: [] };
      tracks.set(id, track);
    }
    const p = { t: num(row, "t"), pos: num(row, "route_pos"), v: num(row, "velocity") };
    track.points.push(p);
    tMax = Math.max(tMax, p.t);
    posMin = Math.min(posMin, Math.min(0, p.pos));
    posMax = Math.max(posMax, p.pos);
    vMin = Math.min(vMin, p.v);
    vMax = Math.max(vMax, p.v);
  }
  return { tracks: [...tracks.values()], tMax, posMin, posMax, vMin, vMax };
}

export function plotSpacetime(path: string, title = "Space-time trajectories"): string {
  const { tracks, tMax, posMin, posMax, vMin, vMax } = loadTracks(path);
  const fig = new Figure({ title, xLabel: "time (s)", yLabel: "position (m)" });
  const x = fig.xScale(0, tMax);
  const y = fig.yScale(posMin, posMax * 1.02);
  fig.axes(x, y);
  const wrapJump = (posMax - posMin) / 2;
  const order = tracks
    .slice()
    .sort((a, b) => (a.kind === b.kind ? a.id.localeCompare(b.id) : a.kind === "CAV" ? 1 : -1));
  for (const track of order) {
    const cav = track.kind === "CAV";
    const pts = track.points;
    for (let i = 1; i < pts.length; i++) {
      const a = pts[i - 1];
      const b = pts[i];
      if (Math.abs(b.pos - a.pos) > wrapJump) continue; // modulo wrap
      fig.segment(
        x.at(a.t), y.at(a.pos), x.at(b.t), y.at(b.pos),
        cav ? "#000000" : velocityColor(b.v, vMin, vMax),
        cav ? 2.2 : 1.1,
        cav ? 1 : 0.9
      );
    }
  }
  fig.raw(`<!-- velocity range ${fmt(vMin)}..${fmt(vMax)} m/s; CAV in black -->`);
  colorbar(fig, vMin, vMax);
  return fig.render();
}

export function plotHeatmap(path: string, title = "Velocity heat map"): string {
  const { tracks, tMax, posMin, posMax, vMin, vMax } = loadTracks(path);
  const span = posMax * 1.02 - posMin;
  const fig = new Figure({ title, xLabel: "time (s)", yLabel: "position (m)" });
  const x = fig.xScale(0, tMax);
  const y = fig.yScale(posMin, posMax * 1.02);
  fig.axes(x, y);
  const nT = 120;
  const nS = 60;
  const sums = new Float64Array(nT * nS);
  const counts = new Float64Array(nT * nS);
  for (const track of tracks) {
    for (const p of track.points) {
      const i = Math.min(nT - 1, Math.floor((p.t / tMax) * nT));
      const j = Math.min(nS - 1, Math.max(0, Math.floor(((p.pos - posMin) / span) * nS)));
      sums[i * nS + j] += p.v;
      counts[i * nS + j] += 1;
    }
  }
  const cellW = (fig.plotRight - fig.plotLeft) / nT;
  const cellH = (fig.plotBottom - fig.plotTop) / nS;
  for (let i = 0; i < nT; i++) {
    for (let j = 0; j < nS; j++) {
      const c = counts[i * nS + j];
      if (c === 0) continue;
      const v = sums[i * nS + j] / c;
      const px = fig.plotLeft + i * cellW;
      const py = fig.plotBottom - (j + 1) * cellH;
      fig.rect(px, py, cellW + 0.5, cellH + 0.5, velocityColor(v, vMin, vMax));
    }
  }
  colorbar(fig, vMin, vMax);
  return fig.render();
}

function colorbar(fig: Figure, vMin: number, vMax: number): void {
  const steps = 24;
  const barX = fig.plotRight + 4;
  const barTop = fig.plotTop;
  const barH = (fig.plotBottom - fig.plotTop) / steps;
  for (let k = 0; k < steps; k++) {
    const v = vMax - ((k + 0.5) / steps) * (vMax - vMin);
    fig.rect(barX, barTop + k * barH, 8, barH + 0.5, velocityColor(v, vMin, vMax));
  }
  fig.raw(
    `<text x="${fmt(barX + 10)}" y="${fmt(barTop + 10)}" font-size="10" font-family="Helvetica, Arial, sans-serif">${fmt(vMax)}</text>`
  );
  fig.raw(
    `<text x="${fmt(barX + 10)}" y="${fmt(fig.plotBottom)}" font-size="10" font-family="Helvetica, Arial, sans-serif">${fmt(vMin)}</text>`
  );
}
