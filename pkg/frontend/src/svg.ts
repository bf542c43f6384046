/**
 * Minimal deterministic SVG scene builder: fixed canvas, linear axes, line
 * and band primitives. All coordinates are emitted with fixed precision so a
 * given input always renders to byte-identical output.
 */

export interface Margins {
  top: number;
  right: number;
  bottom: number;
  left: number;
}

export const PALETTE = [
  "#1f77b4",
  "#d62728",
  "#2ca02c",
  "#9467bd",
  "#ff7f0e",
  "#8c564b",
];

const FONT = "font-family=\"Helvetica, Arial, sans-serif\"";

export function fmt(v: number): string {
  if (!Number.isFinite(v)) return "0";
  return v.toFixed(2);
}

export class Scale {
  constructor(
    readonly d0: number,
    readonly d1: number,
    readonly r0: number,
    readonly r1: number
  ) {}

  at(v: number): number {
    if (this.d1 === this.d0) return (this.r0 + this.r1) / 2;
    return this.r0 + ((v - this.d0) / (this.d1 - this.d0)) * (this.r1 - this.r0);
  }

  ticks(n = 5): number[] {
    const span = this.d1 - this.d0;
    if (span <= 0) return [this.d0];
    const step = niceStep(span / n);
    const first = Math.ceil(this.d0 / step) * step;
    const out: number[] = [];
    for (let v = first; v <= this.d1 + 1e-12; v += step) {
      out.push(Number(v.toPrecision(12)));
    }
    return out;
  }
}

function niceStep(raw: number): number {
  const mag = Math.pow(10, Math.floor(Math.log10(raw)));
  const r = raw / mag;
  if (r < 1.5) return mag;
  if (r < 3.5) return 2 * mag;
  if (r < 7.5) return 5 * mag;
  return 10 * mag;
}

export interface FigureOpts {
  width?: number;
  height?: number;
  margins?: Margins;
  title: string;
  xLabel: string;
  yLabel: string;
}

export class Figure {
  readonly width: number;
  readonly height: number;
  readonly m: Margins;
  private parts: string[] = [];
  private legendEntries: { label: string; color: string }[] = [];

  constructor(readonly opts: FigureOpts) {
    this.width = opts.width ?? 720;
    this.height = opts.height ?? 480;
    this.m = opts.margins ?? { top: 48, right: 24, bottom: 56, left: 72 };
  }

  get plotLeft(): number {
    return this.m.left;
  }
  get plotRight(): number {
    return this.width - this.m.right;
  }
  get plotTop(): number {
    return this.m.top;
  }
  get plotBottom(): number {
    return this.height - this.m.bottom;
  }

  xScale(d0: number, d1: number): Scale {
    return new Scale(d0, d1, this.plotLeft, this.plotRight);
  }

  yScale(d0: number, d1: number): Scale {
    return new Scale(d0, d1, this.plotBottom, this.plotTop);
  }

  axes(x: Scale, y: Scale): void {
    const b = this.plotBottom;
    const l = this.plotLeft;
    for (const t of x.ticks()) {
      const px = x.at(t);
      this.parts.push(
        `<line x1="${fmt(px)}" y1="${fmt(b)}" x2="${fmt(px)}" y2="${fmt(b + 5)}" stroke="#333" stroke-width="1"/>`,
        `<text x="${fmt(px)}" y="${fmt(b + 20)}" text-anchor="middle" font-size="12" ${FONT}>${trimTick(t)}</text>`
      );
    }
    for (const t of y.ticks()) {
      const py = y.at(t);
      this.parts.push(
        `<line x1="${fmt(l - 5)}" y1="${fmt(py)}" x2="${fmt(l)}" y2="${fmt(py)}" stroke="#333" stroke-width="1"/>`,
        `<line x1="${fmt(l)}" y1="${fmt(py)}" x2="${fmt(this.plotRight)}" y2="${fmt(py)}" stroke="#eee" stroke-width="1"/>`,
        `<text x="${fmt(l - 8)}" y="${fmt(py + 4)}" text-anchor="end" font-size="12" ${FONT}>${trimTick(t)}</text>`
      );
    }
    this.parts.push(
      `<line x1="${fmt(l)}" y1="${fmt(this.plotTop)}" x2="${fmt(l)}" y2="${fmt(b)}" stroke="#333" stroke-width="1.5"/>`,
      `<line x1="${fmt(l)}" y1="${fmt(b)}" x2="${fmt(this.plotRight)}" y2="${fmt(b)}" stroke="#333" stroke-width="1.5"/>`
    );
  }

  band(xs: number[], lo: number[], hi: number[], x: Scale, y: Scale, color: string): void {
    const fwd = xs.map((v, i) => `${fmt(x.at(v))},${fmt(y.at(hi[i]))}`);
    const back = [...xs.keys()]
      .reverse()
      .map((i) => `${fmt(x.at(xs[i]))},${fmt(y.at(lo[i]))}`);
    this.parts.push(
      `<polygon class="band" points="${fwd.concat(back).join(" ")}" fill="${color}" opacity="0.2"/>`
    );
  }

  line(xs: number[], ys: number[], x: Scale, y: Scale, color: string, width = 1.8, cls = "series"): void {
    const pts = xs.map((v, i) => `${fmt(x.at(v))},${fmt(y.at(ys[i]))}`);
    this.parts.push(
      `<polyline class="${cls}" points="${pts.join(" ")}" fill="none" stroke="${color}" stroke-width="${width}"/>`
    );
  }

  segment(x1: number, y1: number, x2: number, y2: number, color: string, width = 1.2, opacity = 1): void {
    this.parts.push(
      `<line x1="${fmt(x1)}" y1="${fmt(y1)}" x2="${fmt(x2)}" y2="${fmt(y2)}" stroke="${color}" stroke-width="${width}" opacity="${opacity.toFixed(2)}"/>`
    );
  }

  rect(px: number, py: number, w: number, h: number, color: string): void {
    this.parts.push(
      `<rect x="${fmt(px)}" y="${fmt(py)}" width="${fmt(w)}" height="${fmt(h)}" fill="${color}"/>`
    );
  }

  errorBar(px: number, yLo: number, yHi: number, color: string, cap = 4): void {
    this.parts.push(
      `<line class="errorbar" x1="${fmt(px)}" y1="${fmt(yLo)}" x2="${fmt(px)}" y2="${fmt(yHi)}" stroke="${color}" stroke-width="1.4"/>`,
      `<line x1="${fmt(px - cap)}" y1="${fmt(yLo)}" x2="${fmt(px + cap)}" y2="${fmt(yLo)}" stroke="${color}" stroke-width="1.4"/>`,
      `<line x1="${fmt(px - cap)}" y1="${fmt(yHi)}" x2="${fmt(px + cap)}" y2="${fmt(yHi)}" stroke="${color}" stroke-width="1.4"/>`
    );
  }

  marker(px: number, py: number, color: string, r = 3): void {
    this.parts.push(
      `<circle cx="${fmt(px)}" cy="${fmt(py)}" r="${r}" fill="${color}"/>`
    );
  }

  legend(label: string, color: string): void {
    this.legendEntries.push({ label, color });
  }

  raw(fragment: string): void {
    this.parts.push(fragment);
  }

  render(): string {
    const head = [
      `<svg xmlns="http://www.w3.org/2000/svg" width="${this.width}" height="${this.height}" viewBox="0 0 ${this.width} ${this.height}">`,
      `<rect width="${this.width}" height="${this.height}" fill="white"/>`,
      `<text x="${fmt(this.width / 2)}" y="24" text-anchor="middle" font-size="16" font-weight="bold" ${FONT}>${escapeXml(this.opts.title)}</text>`,
      `<text x="${fmt((this.plotLeft + this.plotRight) / 2)}" y="${fmt(this.height - 12)}" text-anchor="middle" font-size="13" ${FONT}>${escapeXml(this.opts.xLabel)}</text>`,
      `<text x="18" y="${fmt((this.plotTop + this.plotBottom) / 2)}" text-anchor="middle" font-size="13" ${FONT} transform="rotate(-90 18 ${fmt((this.plotTop + this.plotBottom) / 2)})">${escapeXml(this.opts.yLabel)}</text>`,
    ];
    const legend: string[] = [];
    this.legendEntries.forEach((e, i) => {
      const ly = this.plotTop + 8 + i * 18;
      const lx = this.plotRight - 150;
      legend.push(
        `<rect x="${fmt(lx)}" y="${fmt(ly - 9)}" width="14" height="4" fill="${e.color}"/>`,
        `<text class="legend-entry" x="${fmt(lx + 20)}" y="${fmt(ly)}" font-size="12" ${FONT}>${escapeXml(e.label)}</text>`
      );
    });
    return head.concat(this.parts, legend, ["</svg>"]).join("\n");
  }
}

function trimTick(v: number): string {
  const s = v.toFixed(4);
  return s.replace(/\.?0+$/, "");
}

function escapeXml(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;");
}

/** Blue-to-red velocity color ramp (low = congested, high = free flow). */
export function velocityColor(v: number, vMin: number, vMax: number): string {
  const t = vMax > vMin ? Math.min(1, Math.max(0, (v - vMin) / (vMax - vMin))) : 0.5;
  const stops: [number, number, number][] = [
    [165, 0, 38],
    [244, 109, 67],
    [254, 224, 139],
    [166, 217, 106],
    [26, 152, 80],
  ];
  const pos = t * (stops.length - 1);
  const i = Math.min(stops.length - 2, Math.floor(pos));
  const f = pos - i;
  const mix = (a: number, b: number) => Math.round(a + (b - a) * f);
  const [r, g, b] = [0, 1, 2].map((k) => mix(stops[i][k], stops[i + 1][k]));
  return `rgb(${r},${g},${b})`;
}
