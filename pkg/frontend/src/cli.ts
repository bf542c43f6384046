#!/usr/bin/env node
/**
 * SVG figure renderer for wavedamp CSV exports.
 *
 * Usage:
 *   wavedamp-plot learning-curve --out fig.svg name=aggregate.csv [name=...]
 *   wavedamp-plot spacetime      --out fig.svg trajectories.csv
 *   wavedamp-plot heatmap        --out fig.svg trajectories.csv
 *   wavedamp-plot model-compare  --out fig.svg model_compare.csv [loss.csv]
 *
 * Options: --out PATH (required), --metric NAME (learning-curve only),
 *          --title TEXT
 */
import { writeFileSync } from "fs";
import { plotModelCompare } from "./compare";
import { SchemaError } from "./csv";
import { plotLearningCurves } from "./learning";
import { plotHeatmap, plotSpacetime } from "./spacetime";

interface Args {
  kind: string;
  out: string;
  metric?: string;
  title?: string;
  inputs: string[];
}

function parseArgs(argv: string[]): Args {
  if (argv.length === 0) {
    throw new Error("missing figure kind");
  }
  const [kind, ...rest] = argv;
  const args: Args = { kind, out: "", inputs: [] };
  for (let i = 0; i < rest.length; i++) {
    const a = rest[i];
    if (a === "--out") args.out = rest[++i];
    else if (a === "--metric") args.metric = rest[++i];
    else if (a === "--title") args.title = rest[++i];
    else if (a.startsWith("--")) throw new Error(`unknown option ${a}`);
    else args.inputs.push(a);
  }
  if (!args.out) throw new Error("--out PATH is required");
  return args;
}

export function render(args: Args): string {
  switch (args.kind) {
    case "learning-curve": {
      const inputs = args.inputs.map((spec) => {
        const eq = spec.indexOf("=");
        if (eq < 0) {
          return { label: spec.replace(/.*\//, ""), path: spec };
        }
        return { label: spec.slice(0, eq), path: spec.slice(eq + 1) };
      });
      return plotLearningCurves(inputs, { metric: args.metric, title: args.title });
    }
    case "spacetime":
      if (args.inputs.length !== 1) throw new Error("spacetime takes one CSV");
      return plotSpacetime(args.inputs[0], args.title);
    case "heatmap":
      if (args.inputs.length !== 1) throw new Error("heatmap takes one CSV");
      return plotHeatmap(args.inputs[0], args.title);
    case "model-compare":
      if (args.inputs.length < 1 || args.inputs.length > 2) {
        throw new Error("model-compare takes the comparison CSV and optionally the loss CSV");
      }
      return plotModelCompare(args.inputs[0], args.inputs[1]);
    default:
      throw new Error(`unknown figure kind '${args.kind}'`);
  }
}

export function main(argv: string[]): number {
  try {
    const args = parseArgs(argv);
    const svg = render(args);
    writeFileSync(args.out, svg);
    console.log(`wrote ${args.out}`);
    return 0;
  } catch (err) {
    if (err instanceof SchemaError || err instanceof Error) {
      console.error(`error: ${err.message}`);
      return 2;
    }
    throw err;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
