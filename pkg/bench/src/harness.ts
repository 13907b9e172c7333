import { execFileSync, ExecFileSyncOptions } from "node:child_process";
import { existsSync, mkdirSync, mkdtempSync, readFileSync, writeFileSync, copyFileSync } from "node:fs";
import { tmpdir } from "node:os";
import path from "node:path";

import { BenchConfig, BenchResult, ConfigError, validate } from "./config.js";

const HARNESS_C = path.join(path.dirname(new URL(import.meta.url).pathname), "..", "c", "harness.c");

function sh(cmd: string, args: string[], opts: ExecFileSyncOptions = {}): string {
  return execFileSync(cmd, args, { encoding: "utf8", ...opts }) as string;
}

/** Produce kernel source by calling the generator CLI (its public surface). */
export function generateKernel(cfg: BenchConfig, dir: string): string {
  sh("python3", [
    "-m", "opkgen.cli", "generate",
    "--machine", cfg.machine,
    "--mr", String(cfg.mr), "--nr", String(cfg.nr),
    "--kc", String(cfg.kc), "--ku", String(cfg.ku),
    "--out", dir, "--name", "bench_kernel",
  ]);
  return path.join(dir, "bench_kernel.c");
}

export function kernelSymbol(kernelPath: string): string {
  const text = readFileSync(kernelPath, "utf8");
  const m = text.match(/void\s+(\w+)\s*\(long k/);
  if (!m) throw new ConfigError(`no kernel entry point found in ${kernelPath}`);
  return m[1];
}

function compilerFlags(cfg: BenchConfig): string[] {
  if (cfg.portable) return ["-DKERN_PORTABLE"];
  switch (cfg.machine) {
    case "sandybridge": return ["-mavx"];
    case "haswell": return ["-mavx2", "-mfma"];
    case "penryn":
    case "nehalem": return ["-msse3"];
    default: return ["-DKERN_PORTABLE"]; // knc asm needs the original target
  }
}

/** True when this host can execute the machine's native instructions. */
export function hostSupports(machine: string): boolean {
  if (process.platform !== "linux") return false;
  let flags = "";
  try {
    flags = readFileSync("/proc/cpuinfo", "utf8");
  } catch {
    return false;
  }
  switch (machine) {
    case "sandybridge": return /\bavx\b/.test(flags);
    case "haswell": return /\bavx2\b/.test(flags) && /\bfma\b/.test(flags);
    case "penryn":
    case "nehalem": return /\bssse3\b/.test(flags) || /\bpni\b/.test(flags);
    default: return false;
  }
}

export function compileHarness(cfg: BenchConfig, kernelPath: string, dir: string): string {
  const exe = path.join(dir, "bench_bin");
  const sym = kernelSymbol(kernelPath);
  const macros = path.join(path.dirname(kernelPath), "kern_macros.h");
  if (!existsSync(macros)) {
    throw new ConfigError(`kern_macros.h not found next to ${kernelPath}`);
  }
  const harnessCopy = path.join(dir, "harness.c");
  copyFileSync(HARNESS_C, harnessCopy);
  sh("cc", [
    "-O2", ...compilerFlags(cfg), `-DKERN_SYM=${sym}`,
    `-I${path.dirname(kernelPath)}`,
    "-o", exe, kernelPath, harnessCopy, "-lm",
  ]);
  return exe;
}

export function runHarness(cfg: BenchConfig, exe: string): BenchResult {
  const out = sh(exe, [
    String(cfg.mr), String(cfg.nr), String(cfg.kc),
    String(cfg.reps), String(cfg.align),
  ]);
  const m = out.match(/rel_err=([\d.e+-]+) gflops=([\d.e+-]+) seconds=([\d.e+-]+)/);
  if (!m) throw new Error(`unparseable harness output: ${out}`);
  return {
    machine: cfg.machine,
    mr: cfg.mr,
    nr: cfg.nr,
    kc: cfg.kc,
    reps: cfg.reps,
    gflops: Number(m[2]),
    relErr: Number(m[1]),
    seconds: Number(m[3]),
    mode: cfg.portable ? "portable" : "asm",
  };
}

export function bench(cfg: BenchConfig): BenchResult {
  validate(cfg);
  const dir = cfg.outDir ?? mkdtempSync(path.join(tmpdir(), "opkbench-"));
  mkdirSync(dir, { recursive: true });
  const kernel = cfg.kernel ?? generateKernel(cfg, dir);
  if (!existsSync(kernel)) throw new ConfigError(`no kernel at ${kernel}`);
  const exe = compileHarness(cfg, kernel, dir);
  return runHarness(cfg, exe);
}
