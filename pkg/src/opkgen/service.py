"""HTTP service exposing the generator pipeline.

The endpoints wrap the same core calls the command line uses: estimate the
candidate instruction mixes for a kernel size, generate compilable kernel
source, and run the simulator or the correctness interpreter over a plan
document. Everything is stateless; plans and sources travel in the JSON
bodies, so one service instance can serve many machines and kernel shapes.
"""

from __future__ import annotations

import math
import random
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .emitter import EmitError, emit
from .machine import MachineError, PRESET_NAMES, load_preset, parse_machine, resolve_machine
from .planner import (
    InsufficientRegisters,
    PlanError,
    available_updates,
    make_plan,
    plan_from_doc,
    plan_to_doc,
)
from .qmodel import ModelError, estimate, rank_mixes
from .scheduler import InfeasibleDepth, ScheduleError, build_schedule
from .tiling import NoTiling, TilingError, enumerate_tilings, instruction_mix
from .updates import NoCoverage, UpdateError
from .vsim import SimError, interpret, reference_gemm, simulate

CONFIG_ERRORS = (MachineError, PlanError, TilingError, ModelError, UpdateError,
                 SimError, EmitError, ScheduleError, ValueError)
INFEASIBLE_ERRORS = (InfeasibleDepth, NoTiling, InsufficientRegisters, NoCoverage)


class MachineSummary(BaseModel):
    name: str
    frequency_ghz: float
    vector_width: int
    num_registers: int
    ports: dict[str, str]
    instructions: list[str]
    default_kernel: Optional[dict] = None


class EstimateRequest(BaseModel):
    machine: str = Field(description="preset name or machine file content")
    mr: int
    nr: int
    prefetches: Optional[int] = None
    mix: str = "auto"  # auto (all) | broadcast | shuffle | tiling signature


class CandidateRow(BaseModel):
    rank: int
    cells: str
    composition: dict[str, int]
    port_loads: dict[str, str]
    group_loads: dict[str, str]
    lam: str
    lam_float: float
    bottleneck: str
    flop_per_cycle: float
    gflops: float
    instructions: int


class EstimateResponse(BaseModel):
    machine: str
    mr: int
    nr: int
    rows: list[CandidateRow]


class GenerateRequest(BaseModel):
    machine: str
    mr: int
    nr: int
    kc: Optional[int] = None
    ku: int = 4
    mix: str = "auto"
    name: str = "kernel"
    depth: int = 2
    non_uniform: bool = False


class GenerateResponse(BaseModel):
    name: str
    machine: str
    kernel_c: str
    macros_h: str
    plan: str
    n_updates: int
    ms: int
    ns: int
    lam: str
    gflops: float
    subblock_issue: Optional[str] = None


class SimulateRequest(BaseModel):
    plan: str
    iterations: int = 64


class SimulateResponse(BaseModel):
    machine: str
    cycles_per_iteration: str
    cycles_float: float
    model_cycles: str
    adjusted_model_cycles: str  # after the dependency-stall refinement
    deviation: float
    port_busy: dict[str, str]
    drain_bound: str
    stall_cycles: int


class VerifyRequest(BaseModel):
    plan: str
    seed: int = 42
    cases: int = 100


class VerifyResponse(BaseModel):
    passed: bool
    cases: int
    integer_mismatches: int
    double_worst_ulp: float


def machine_from_spec(spec: str):
    """Preset name, path, or inline YAML document."""
    if "\n" in spec:
        return parse_machine(spec)
    return resolve_machine(spec)


def machine_summary(name: str) -> MachineSummary:
    m = load_preset(name)
    default = None
    if "mr" in m.meta:
        default = {k: m.meta[k] for k in ("mr", "nr", "ms", "ns", "kc")
                   if k in m.meta}
    return MachineSummary(
        name=m.name,
        frequency_ghz=float(m.frequency_ghz),
        vector_width=m.vector_width,
        num_registers=m.num_registers,
        ports={p.name: str(p.throughput) for p in m.ports},
        instructions=[i.mnemonic for i in m.instructions],
        default_kernel=default,
    )


def run_estimate(req: EstimateRequest) -> EstimateResponse:
    machine = machine_from_spec(req.machine)
    prefetches = req.prefetches
    if prefetches is None:
        prefetches = int(machine.meta.get("prefetches", 0))
    tilings = enumerate_tilings(req.mr, req.nr, available_updates(machine))
    cands = []
    for t in tilings:
        mix = instruction_mix(t, machine, prefetches)
        cands.append((t, mix, estimate(mix, machine, req.mr, req.nr)))
    if req.mix != "auto":
        if req.mix == "broadcast":
            keep = [c for c in cands
                    if all(u.n_u == 1 for _, u in c[0].segments())]
        elif req.mix in ("shuffle", "permute"):
            keep = [c for c in cands
                    if all(u.n_u > 1 for _, u in c[0].segments())]
        else:
            keep = [c for c in cands if c[0].signature() == req.mix]
        if not keep:
            raise ModelError(f"no tiling matches mix {req.mix!r}")
        cands = keep
    rows = []
    for rank, (t, mix, est) in enumerate(rank_mixes(cands)):
        pl = est.port_loads
        rows.append(CandidateRow(
            rank=rank,
            cells=t.signature(),
            composition=t.composition(),
            port_loads={k: str(v) for k, v in sorted(pl.loads.items())},
            group_loads={"|".join(k): str(v)
                         for k, v in sorted(pl.group_loads.items())},
            lam=str(est.lambda_outer),
            lam_float=float(est.lambda_outer),
            bottleneck=est.bottleneck_port,
            flop_per_cycle=float(est.flop_per_cycle),
            gflops=float(est.gflops),
            instructions=mix.total(),
        ))
    return EstimateResponse(machine=machine.name, mr=req.mr, nr=req.nr, rows=rows)


def run_generate(req: GenerateRequest) -> GenerateResponse:
    machine = machine_from_spec(req.machine)
    plan = make_plan(machine, req.mr, req.nr, mix=req.mix, k_c=req.kc,
                     k_u=req.ku, depth=req.depth, non_uniform=req.non_uniform)
    sched = build_schedule(plan)
    kern = emit(sched, plan, req.name)
    est = estimate(plan.mix(), machine, req.mr, req.nr)
    return GenerateResponse(
        name=req.name,
        machine=machine.name,
        kernel_c=kern.source,
        macros_h=kern.macros_header,
        plan=plan_to_doc(plan),
        n_updates=plan.budget.n_updates,
        ms=plan.params.m_s,
        ns=plan.params.n_s,
        lam=str(est.lambda_outer),
        gflops=float(est.gflops),
        subblock_issue=plan.subblock_issue,
    )


def run_simulate(req: SimulateRequest) -> SimulateResponse:
    from fractions import Fraction

    from .qmodel import stall_adjust
    from .scheduler import dependency_stalls

    plan = plan_from_doc(req.plan)
    sched = build_schedule(plan)
    rep = simulate(sched, plan.machine, req.iterations)
    est = estimate(plan.mix(), plan.machine, plan.params.m_r, plan.params.n_r)
    model = 1 / est.lambda_outer
    # waiting-time refinement for ports whose queued jobs form chains;
    # the counts cover the whole unrolled body, so work per body here
    stalls = dependency_stalls(sched, plan.machine)
    adjusted = model
    for port, (n, k) in stalls.items():
        drain = est.port_loads.load(port) * plan.params.k_u \
            / plan.machine.port(port).throughput
        w = stall_adjust(drain, n, k)
        adjusted = max(adjusted, Fraction(w, plan.params.k_u))
    return SimulateResponse(
        machine=plan.machine.name,
        cycles_per_iteration=str(rep.cycles_per_iteration),
        cycles_float=float(rep.cycles_per_iteration),
        model_cycles=str(model),
        adjusted_model_cycles=str(adjusted),
        deviation=rep.deviation_from(est.lambda_outer),
        port_busy={k: str(v) for k, v in sorted(rep.port_busy_per_iteration.items())},
        drain_bound=str(rep.drain_bound),
        stall_cycles=rep.stall_cycles,
    )


def run_verify(req: VerifyRequest) -> VerifyResponse:
    plan = plan_from_doc(req.plan)
    sched = build_schedule(plan)
    p = plan.params
    rng = random.Random(req.seed)
    mism = 0
    worst_ulp = 0.0
    n_float = max(1, req.cases // 10)
    for case in range(req.cases):
        k = p.k_u * rng.choice([1, 2, 4])
        if case < req.cases - n_float:
            a = [rng.randint(-8, 8) for _ in range(p.m_r * k)]
            b = [rng.randint(-8, 8) for _ in range(k * p.n_r)]
            c = [[rng.randint(-4, 4) for _ in range(p.n_r)] for _ in range(p.m_r)]
            got = interpret(plan, sched, a, b, c, k)
            want = reference_gemm(a, b, c, p.m_r, p.n_r, k)
            if got != want:
                mism += 1
        else:
            a = [rng.uniform(-8, 8) for _ in range(p.m_r * k)]
            b = [rng.uniform(-8, 8) for _ in range(k * p.n_r)]
            c = [[0.0] * p.n_r for _ in range(p.m_r)]
            got = interpret(plan, sched, a, b, c, k)
            want = reference_gemm(a, b, c, p.m_r, p.n_r, k,
                                  fused=plan.machine.fma_is_fused)
            for gr, wr in zip(got, want):
                for g, x in zip(gr, wr):
                    if g != x:
                        scale = math.ulp(max(abs(g), abs(x)))
                        worst_ulp = max(worst_ulp, abs(g - x) / scale)
    passed = mism == 0 and worst_ulp <= 4.0
    return VerifyResponse(passed=passed, cases=req.cases,
                          integer_mismatches=mism, double_worst_ulp=worst_ulp)


def create_app() -> FastAPI:
    app = FastAPI(title="opkgen", version=__version__,
                  description="SIMD outer-product micro-kernel generator")

    def guarded(fn, *args):
        try:
            return fn(*args)
        except INFEASIBLE_ERRORS as e:
            raise HTTPException(status_code=422, detail=str(e))
        except CONFIG_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e))

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.get("/machines")
    def machines() -> list[str]:
        return list(PRESET_NAMES)

    @app.get("/machines/{name}", response_model=MachineSummary)
    def machine(name: str):
        return guarded(machine_summary, name)

    @app.post("/estimate", response_model=EstimateResponse)
    def estimate_ep(req: EstimateRequest):
        return guarded(run_estimate, req)

    @app.post("/generate", response_model=GenerateResponse)
    def generate_ep(req: GenerateRequest):
        return guarded(run_generate, req)

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate_ep(req: SimulateRequest):
        return guarded(run_simulate, req)

    @app.post("/verify", response_model=VerifyResponse)
    def verify_ep(req: VerifyRequest):
        return guarded(run_verify, req)

    return app


app = create_app()
