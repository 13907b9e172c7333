import { execFileSync } from "node:child_process";
import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import path from "node:path";
import { describe, expect, it } from "vitest";

import { ConfigError, DEFAULTS, toCsv, validate } from "../src/config.js";
import {
  bench,
  compileHarness,
  generateKernel,
  hostSupports,
  kernelSymbol,
} from "../src/harness.js";

function tmp(): string {
  return mkdtempSync(path.join(tmpdir(), "opkbench-test-"));
}

describe("config validation", () => {
  const base = { ...DEFAULTS, kernel: undefined, outDir: undefined };

  it("accepts the defaults", () => {
    expect(() => validate({ ...base })).not.toThrow();
  });

  it("rejects reps = 0", () => {
    expect(() => validate({ ...base, reps: 0 })).toThrow(ConfigError);
  });

  it("rejects kc not a multiple of ku", () => {
    expect(() => validate({ ...base, kc: 255 })).toThrow(ConfigError);
  });

  it("rejects odd alignments", () => {
    expect(() => validate({ ...base, align: 48 as 32 })).toThrow(ConfigError);
  });
});

describe("csv output", () => {
  it("has the documented columns", () => {
    const csv = toCsv({
      machine: "sandybridge", mr: 8, nr: 4, kc: 256, reps: 10,
      gflops: 12.3456, relErr: 1.2e-15, seconds: 0.1, mode: "asm",
    });
    const [head, row] = csv.trim().split("\n");
    expect(head).toBe("machine,mr,nr,kc,reps,mode,gflops,rel_err");
    expect(row).toContain("sandybridge,8,4,256,10,asm,12.346,1.200e-15");
  });
});

describe("kernel generation via the generator CLI", () => {
  it("produces kernel source with a parsable entry point", () => {
    const dir = tmp();
    const cfg = { ...DEFAULTS, kernel: undefined, outDir: dir };
    const kernel = generateKernel(cfg, dir);
    expect(kernelSymbol(kernel)).toBe("bench_kernel");
  }, 60000);
});

describe("end-to-end correctness", () => {
  it("portable build matches the reference within 1e-13", () => {
    const result = bench({
      ...DEFAULTS, reps: 10, portable: true,
      kernel: undefined, outDir: tmp(),
    });
    expect(result.relErr).toBeLessThanOrEqual(1e-13);
    expect(result.gflops).toBeGreaterThan(0);
  }, 120000);

  it("native AVX build matches the reference within 1e-13", () => {
    if (!hostSupports("sandybridge")) {
      console.warn("host has no AVX; native check skipped");
      return;
    }
    const result = bench({
      ...DEFAULTS, reps: 50, portable: false,
      kernel: undefined, outDir: tmp(),
    });
    expect(result.mode).toBe("asm");
    expect(result.relErr).toBeLessThanOrEqual(1e-13);
    // informational only: hardware-dependent
    console.log(`sandybridge kernel on this host: ${result.gflops} GFLOP/s`);
  }, 120000);

  it("haswell fma kernel runs when the host has FMA", () => {
    if (!hostSupports("haswell")) {
      console.warn("host has no AVX2+FMA; haswell check skipped");
      return;
    }
    const result = bench({
      machine: "haswell", mr: 4, nr: 12, kc: 256, ku: 4, reps: 20,
      align: 64, portable: false, kernel: undefined, outDir: tmp(),
    });
    expect(result.relErr).toBeLessThanOrEqual(1e-13);
  }, 120000);

  it("knc kernel always runs through the portable fallback", () => {
    const result = bench({
      machine: "knc", mr: 8, nr: 30, kc: 240, ku: 4, reps: 3,
      align: 64, portable: true, kernel: undefined, outDir: tmp(),
    });
    expect(result.relErr).toBeLessThanOrEqual(1e-13);
  }, 120000);
});

describe("driver exit codes", () => {
  it("rejects reps=0 with exit 2 and no csv", () => {
    const dir = tmp();
    const cfg = { ...DEFAULTS, portable: true, kernel: undefined, outDir: dir };
    const kernel = generateKernel(cfg, dir);
    const exe = compileHarness(cfg, kernel, dir);
    let code = 0;
    let stdout = "";
    try {
      stdout = execFileSync(exe, ["8", "4", "256", "0", "64"], {
        encoding: "utf8",
      });
    } catch (e) {
      const err = e as { status: number; stdout: string };
      code = err.status;
      stdout = err.stdout ?? "";
    }
    expect(code).toBe(2);
    expect(stdout).not.toContain("gflops");
  }, 120000);
});
