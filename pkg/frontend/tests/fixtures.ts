import { mkdtempSync, writeFileSync } from "fs";
import { tmpdir } from "os";
import { join } from "path";

export function tempDir(): string {
  return mkdtempSync(join(tmpdir(), "plotkit-"));
}

export function writeAggregate(dir: string, name: string, rows: number[][]): string {
  const path = join(dir, name);
  const lines = [
    "# schema: wavedamp.metrics-aggregate/1",
    "iteration,n_seeds,episode_return_mean,episode_return_std,avg_speed_mean,avg_speed_std,speed_std_mean,speed_std_std,eps_m_mean,eps_m_std,k_star_mean,k_star_std,c_bound_mean,c_bound_std",
  ];
  for (const [it, mean, std] of rows) {
    lines.push(
      `${it},3,${mean},${std},4.0,0.1,0.2,0.05,0.3,0.01,6.0,1.0,100.0,5.0`
    );
  }
  writeFileSync(path, lines.join("\n") + "\n");
  return path;
}

export function writeTrajectories(dir: string, name: string, opts?: { empty?: boolean }): string {
  const path = join(dir, name);
  const lines = [
    "# schema: wavedamp.trajectories/1",
    "t,vehicle_id,route_pos,velocity,kind",
  ];
  if (!opts?.empty) {
    const L = 100;
    for (let step = 1; step <= 40; step++) {
      const t = step * 0.1;
      for (let v = 0; v < 4; v++) {
        const speed = 5 + v;
        const pos = (v * 25 + speed * t) % L;
        const kind = v === 0 ? "CAV" : "HDV";
        lines.push(`${t},veh${v},${pos.toFixed(3)},${speed},${kind}`);
      }
    }
  }
  writeFileSync(path, lines.join("\n") + "\n");
  return path;
}

export function writeCompare(dir: string, name: string): string {
  const path = join(dir, name);
  const lines = [
    "# schema: wavedamp.model-compare/1",
    "fraction,repeat,model,test_rmse,n_train",
  ];
  for (const fraction of [0.1, 0.5, 1.0]) {
    for (let repeat = 0; repeat < 3; repeat++) {
      lines.push(`${fraction},${repeat},knowledge,${0.2 + 0.01 * repeat},${Math.round(fraction * 1000)}`);
      lines.push(`${fraction},${repeat},vanilla,${0.4 + 0.02 * repeat - 0.1 * fraction},${Math.round(fraction * 1000)}`);
    }
  }
  writeFileSync(path, lines.join("\n") + "\n");
  return path;
}

export function writeLoss(dir: string, name: string): string {
  const path = join(dir, name);
  const lines = ["# schema: wavedamp.model-compare-loss/1", "model,step,loss"];
  for (let step = 0; step < 100; step += 10) {
    lines.push(`knowledge,${step},${0.5 * Math.exp(-step / 30)}`);
    lines.push(`vanilla,${step},${1.5 * Math.exp(-step / 60)}`);
  }
  writeFileSync(path, lines.join("\n") + "\n");
  return path;
}
