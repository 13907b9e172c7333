import { parseArgs } from "node:util";

import { BenchConfig, ConfigError, DEFAULTS, toCsv, validate } from "./config.js";
import { bench, hostSupports } from "./harness.js";

function usage(): string {
  return [
    "usage: bench [--machine M] [--mr N] [--nr N] [--kc N] [--ku N]",
    "             [--reps N] [--align 32|64] [--portable] [--kernel file.c]",
    "             [--out dir]",
    "",
    "Generates (or takes) a kernel, compiles it with the C driver, checks",
    "correctness against a reference triple loop, and reports median",
    "GFLOP/s as CSV. Exits 1 when the relative error exceeds 1e-13.",
  ].join("\n");
}

export function parse(argv: string[]): BenchConfig {
  const { values } = parseArgs({
    args: argv,
    options: {
      machine: { type: "string", default: DEFAULTS.machine },
      mr: { type: "string" },
      nr: { type: "string" },
      kc: { type: "string" },
      ku: { type: "string" },
      reps: { type: "string" },
      align: { type: "string" },
      portable: { type: "boolean", default: false },
      kernel: { type: "string" },
      out: { type: "string" },
      help: { type: "boolean", default: false },
    },
  });
  if (values.help) {
    console.log(usage());
    process.exit(0);
  }
  const cfg: BenchConfig = {
    machine: values.machine as string,
    mr: Number(values.mr ?? DEFAULTS.mr),
    nr: Number(values.nr ?? DEFAULTS.nr),
    kc: Number(values.kc ?? DEFAULTS.kc),
    ku: Number(values.ku ?? DEFAULTS.ku),
    reps: Number(values.reps ?? DEFAULTS.reps),
    align: Number(values.align ?? DEFAULTS.align) as 32 | 64,
    portable: Boolean(values.portable),
    kernel: values.kernel as string | undefined,
    outDir: values.out as string | undefined,
  };
  return validate(cfg);
}

export function main(argv: string[]): number {
  let cfg: BenchConfig;
  try {
    cfg = parse(argv);
  } catch (e) {
    console.error(String(e instanceof Error ? e.message : e));
    console.error(usage());
    return 2;
  }
  if (!cfg.portable && !hostSupports(cfg.machine)) {
    console.error(
      `note: this host cannot run native ${cfg.machine} code; ` +
      "falling back to the portable build (timings are not comparable)");
    cfg.portable = true;
  }
  try {
    const result = bench(cfg);
    process.stdout.write(toCsv(result));
    if (result.relErr > 1e-13) {
      console.error(`correctness FAILED: rel_err=${result.relErr}`);
      return 1;
    }
    console.error(
      `ok: rel_err=${result.relErr.toExponential(2)} ` +
      `median ${result.gflops.toFixed(2)} GFLOP/s (informational)`);
    return 0;
  } catch (e) {
    console.error(String(e instanceof Error ? e.message : e));
    return e instanceof ConfigError ? 2 : 1;
  }
}
