"""Command-line front end: estimate -> generate -> simulate -> verify.

Runs the pipeline in process by default; with --server URL the subcommands
become thin clients of a running service instance (see `opkgen serve`).

Exit codes: 0 ok, 1 verification failure, 2 configuration error,
3 infeasible request (no tiling, not enough registers, too much overlap).
"""

from __future__ import annotations

import argparse
import json
import pathlib
import sys

from . import service as svc
from .machine import PRESET_NAMES
from .planner import available_updates
from .updates import enumerate_nu_choices

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3


def _machine_spec(arg: str) -> str:
    """Preset names pass through; file paths are inlined for the service."""
    if arg in PRESET_NAMES:
        return arg
    path = pathlib.Path(arg)
    if path.exists():
        return path.read_text()
    return arg


def _post(server: str, endpoint: str, payload) -> dict:
    import httpx

    r = httpx.post(f"{server.rstrip('/')}{endpoint}",
                   json=payload.model_dump(), timeout=300.0)
    if r.status_code == 422:
        raise svc.InfeasibleDepth(r.json().get("detail", r.text))
    if r.status_code != 200:
        raise svc.MachineError(r.json().get("detail", r.text))
    return r.json()


def _call(server, endpoint, runner, req, resp_model):
    if server:
        return resp_model(**_post(server, endpoint, req))
    return runner(req)


def cmd_estimate(args) -> int:
    req = svc.EstimateRequest(machine=_machine_spec(args.machine), mr=args.mr,
                              nr=args.nr, prefetches=args.prefetches,
                              mix=args.mix)
    resp = _call(args.server, "/estimate", svc.run_estimate, req,
                 svc.EstimateResponse)
    if args.dump_updates:
        import hashlib

        machine = svc.machine_from_spec(req.machine)
        for n_u in sorted(enumerate_nu_choices(machine.vector_width, machine)):
            for u in [x for x in available_updates(machine) if x.n_u == n_u]:
                shufs = ",".join(s.mnemonic or "(folded)"
                                 for s in u.shuffle_steps) or "-"
                digest = hashlib.sha256(u.signature().encode()).hexdigest()[:8]
                print(f"update {u.m_v}x{u.n_u} load={u.b_load} shuffles={shufs} "
                      f"depth={u.depth} pairing={digest}")
    if args.format == "records":
        for row in resp.rows:
            print(json.dumps(row.model_dump(), sort_keys=True))
        return EXIT_OK
    ports = sorted({p for row in resp.rows for p in row.port_loads})
    head = (["rank", "cells"] + [f"L({p})" for p in ports]
            + ["lambda", "flop/cyc", "GFLOP/s"])
    table = [head]
    for row in resp.rows:
        table.append(
            [str(row.rank), row.cells]
            + [row.port_loads.get(p, "0") for p in ports]
            + [f"{row.lam} = {row.lam_float:.5f}", f"{row.flop_per_cycle:.2f}",
               f"{row.gflops:.2f}"])
    widths = [max(len(r[i]) for r in table) for i in range(len(head))]
    for r in table:
        print("  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip())
    return EXIT_OK


def cmd_generate(args) -> int:
    req = svc.GenerateRequest(machine=_machine_spec(args.machine), mr=args.mr,
                              nr=args.nr, kc=args.kc, ku=args.ku, mix=args.mix,
                              name=args.name, depth=args.depth,
                              non_uniform=args.non_uniform)
    resp = _call(args.server, "/generate", svc.run_generate, req,
                 svc.GenerateResponse)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.name}.c").write_text(resp.kernel_c)
    (out / "kern_macros.h").write_text(resp.macros_h)
    (out / f"{args.name}.plan.json").write_text(resp.plan)
    print(f"machine={resp.machine} N_updates={resp.n_updates} "
          f"sub-block={resp.ms}x{resp.ns} lambda={resp.lam} "
          f"est={resp.gflops:.2f} GFLOP/s")
    if resp.subblock_issue:
        print(f"note: {resp.subblock_issue}")
    if args.dump_schedule:
        from .planner import plan_from_doc
        from .scheduler import build_schedule

        plan = plan_from_doc(resp.plan)
        sched = build_schedule(plan)
        for op in sched.body:
            ins = op.instr
            regs = ",".join(f"{k}={v}" for k, v in sorted(op.regs.items()))
            ports = " ".join(part.ports.text()
                             for part in plan.machine.instr(ins.mnemonic).parts)
            print(f"slot={op.slot:4d} pp={ins.pp} {op.mnemonic:16s} "
                  f"[{ports}] {regs}")
    print(f"wrote {out / (args.name + '.c')}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    plan_text = pathlib.Path(args.plan).read_text()
    req = svc.SimulateRequest(plan=plan_text, iterations=args.iterations)
    resp = _call(args.server, "/simulate", svc.run_simulate, req,
                 svc.SimulateResponse)
    if args.format == "records":
        print(json.dumps(resp.model_dump(), sort_keys=True))
    else:
        print(f"machine={resp.machine}")
        print(f"cycles/outer-product: {resp.cycles_per_iteration} "
              f"({resp.cycles_float:.3f})")
        print(f"model: {resp.model_cycles}  deviation: {resp.deviation:.1%}")
        if resp.adjusted_model_cycles != resp.model_cycles:
            print(f"model with dependency stalls: {resp.adjusted_model_cycles}")
        print(f"drain bound: {resp.drain_bound}  stalls: {resp.stall_cycles}")
        for port, busy in resp.port_busy.items():
            print(f"  {port}: {busy} jobs/iteration")
    if resp.deviation > 0.10:
        print("warning: simulated throughput deviates more than 10% from "
              "the model", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_verify(args) -> int:
    plan_text = pathlib.Path(args.plan).read_text()
    req = svc.VerifyRequest(plan=plan_text, seed=args.seed, cases=args.cases)
    resp = _call(args.server, "/verify", svc.run_verify, req, svc.VerifyResponse)
    status = "PASS" if resp.passed else "FAIL"
    print(f"{status}: {resp.cases} cases, {resp.integer_mismatches} integer "
          f"mismatches, worst double error {resp.double_worst_ulp:.2f} ulp")
    return EXIT_OK if resp.passed else EXIT_VERIFY


def cmd_machines(args) -> int:
    for name in PRESET_NAMES:
        s = svc.machine_summary(name)
        kern = s.default_kernel or {}
        print(f"{name:12s} v={s.vector_width} regs={s.num_registers} "
              f"f={s.frequency_ghz} GHz ports={','.join(s.ports)} "
              f"kernel={kern.get('mr', '?')}x{kern.get('nr', '?')}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("opkgen.service:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opkgen", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, dims=True):
        p.add_argument("--machine", required=dims,
                       help="preset name or machine description file")
        if dims:
            p.add_argument("--mr", type=int, required=True)
            p.add_argument("--nr", type=int, required=True)
        p.add_argument("--server", help="run against a service instance")

    p = sub.add_parser("estimate", help="rank candidate instruction mixes")
    common(p)
    p.add_argument("--prefetches", type=int, default=None)
    p.add_argument("--mix", default="auto",
                   help="restrict to auto | broadcast | shuffle | signature")
    p.add_argument("--format", choices=("text", "records"), default="text")
    p.add_argument("--dump-updates", action="store_true")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("generate", help="emit kernel source for the best mix")
    common(p)
    p.add_argument("--kc", type=int, default=None)
    p.add_argument("--ku", type=int, default=4)
    p.add_argument("--mix", default="auto",
                   help="auto | broadcast | shuffle | tiling signature")
    p.add_argument("--out", default="out")
    p.add_argument("--name", default="kernel")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--non-uniform", action="store_true",
                   help="skewed sub-block split (experiment variant)")
    p.add_argument("--dump-schedule", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("simulate", help="steady-state port-level simulation")
    p.add_argument("--plan", required=True)
    p.add_argument("--iterations", type=int, default=64)
    p.add_argument("--format", choices=("text", "records"), default="text")
    p.add_argument("--server")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("verify", help="interpreter vs reference GEMM")
    p.add_argument("--plan", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--server")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("machines", help="list shipped machine presets")
    p.set_defaults(fn=cmd_machines)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except svc.INFEASIBLE_ERRORS as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except svc.CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
