/**
 * Schema-checked readers for the wavedamp CSV exports.
 *
 * Every file starts with a `# schema: <name>/<version>` comment line followed
 * by a header row. Values never contain quoted separators, so a strict
 * line/comma split is sufficient and keeps parsing fully deterministic.
 */
import { readFileSync } from "fs";

export class SchemaError extends Error {}

export interface Table {
  schema: string;
  columns: string[];
  rows: Record<string, string>[];
}

export function readTable(path: string, expectedSchema?: string): Table {
  const text = readFileSync(path, "utf-8");
  const lines = text.split(/\r?\n/).filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new SchemaError(`${path}: empty input file`);
  }
  const head = lines[0];
  if (!head.startsWith("# schema:")) {
    throw new SchemaError(`${path}: missing '# schema:' header line`);
  }
  const schema = head.slice("# schema:".length).trim();
  if (expectedSchema && schema !== expectedSchema) {
    throw new SchemaError(
      `${path}: schema is '${schema}', expected '${expectedSchema}'`
    );
  }
  if (lines.length < 2) {
    throw new SchemaError(`${path}: no header row`);
  }
  const columns = lines[1].split(",");
  const rows: Record<string, string>[] = [];
  for (let i = 2; i < lines.length; i++) {
    const parts = lines[i].split(",");
    if (parts.length !== columns.length) {
      throw new SchemaError(
        `${path}: row ${i + 1} has ${parts.length} fields, expected ${columns.length}`
      );
    }
    const row: Record<string, string> = {};
    columns.forEach((c, k) => (row[c] = parts[k]));
    rows.push(row);
  }
  return { schema, columns, rows };
}

export function requireColumns(table: Table, path: string, needed: string[]): void {
  const missing = needed.filter((c) => !table.columns.includes(c));
  if (missing.length > 0) {
    throw new SchemaError(`${path}: missing column(s): ${missing.join(", ")}`);
  }
}

export function num(row: Record<string, string>, col: string): number {
  return Number.parseFloat(row[col]);
}
