export interface BenchConfig {
  machine: string;
  mr: number;
  nr: number;
  kc: number;
  ku: number;
  reps: number;
  align: 32 | 64;
  portable: boolean;
  kernel?: string; // pre-generated kernel .c; otherwise generated on the fly
  outDir?: string;
}

export const DEFAULTS = {
  machine: "sandybridge",
  mr: 8,
  nr: 4,
  kc: 256,
  ku: 4,
  reps: 200,
  align: 64 as const,
  portable: false,
};

export class ConfigError extends Error {}

export function validate(cfg: BenchConfig): BenchConfig {
  if (cfg.mr <= 0 || cfg.nr <= 0 || cfg.kc <= 0) {
    throw new ConfigError(`bad dims ${cfg.mr}x${cfg.nr}, kc=${cfg.kc}`);
  }
  if (cfg.kc % cfg.ku !== 0) {
    throw new ConfigError(`kc=${cfg.kc} must be a multiple of ku=${cfg.ku}`);
  }
  if (cfg.reps <= 0) {
    throw new ConfigError(`reps must be positive, got ${cfg.reps}`);
  }
  if (cfg.align !== 32 && cfg.align !== 64) {
    throw new ConfigError(`alignment must be 32 or 64, got ${cfg.align}`);
  }
  return cfg;
}

export interface BenchResult {
  machine: string;
  mr: number;
  nr: number;
  kc: number;
  reps: number;
  gflops: number;
  relErr: number;
  seconds: number;
  mode: "asm" | "portable";
}

export function toCsv(r: BenchResult): string {
  const head = "machine,mr,nr,kc,reps,mode,gflops,rel_err";
  const row = [
    r.machine, r.mr, r.nr, r.kc, r.reps, r.mode,
    r.gflops.toFixed(3), r.relErr.toExponential(3),
  ].join(",");
  return `${head}\n${row}\n`;
}
