import pathlib
import shutil
import subprocess

import pytest

from opkgen.emitter import (
    BIAS,
    displacement,
    emit,
    generate_macros,
    parse_kernel_text,
)
from opkgen.machine import load_preset
from opkgen.planner import make_plan
from opkgen.scheduler import build_schedule

GOLDEN = pathlib.Path(__file__).parent / "golden"
PRESETS = ("penryn", "nehalem", "sandybridge", "haswell", "knc")


def build(name, **kw):
    m = load_preset(name)
    plan = make_plan(m, m.meta["mr"], m.meta["nr"], **kw)
    return plan, build_schedule(plan)


def test_golden_sandybridge_8x4():
    plan, sched = build("sandybridge", k_u=4)
    kern = emit(sched, plan, "kern_sandybridge_8x4_shuffle")
    assert kern.source == (GOLDEN / "sandybridge_8x4_shuffle.c").read_text()


def test_golden_knc_8x30():
    plan, sched = build("knc", k_u=4)
    kern = emit(sched, plan, "kern_knc_8x30_auto")
    assert kern.source == (GOLDEN / "knc_8x30_auto.c").read_text()


def test_steady_state_opening_macros():
    plan, sched = build("sandybridge", k_u=4)
    kern = emit(sched, plan)
    lines = kern.source.splitlines()
    start = lines.index("        /* STEADY STATE CODE */") + 1
    macros = [l.strip().split("(")[0] for l in lines[start:start + 10]]
    assert macros == ["VLOAD_IA", "VLOAD_IA", "VLOAD_IA", "VSHUFFLE_IA",
                      "VFMA", "VFMA", "VPERM2F128_IA", "VSHUFFLE_IA",
                      "VFMA", "VFMA"]


def test_emission_deterministic():
    for name in ("sandybridge", "knc"):
        p1, s1 = build(name)
        p2, s2 = build(name)
        assert emit(s1, p1).source == emit(s2, p2).source


def test_displacements_short_form():
    for name in PRESETS:
        plan, sched = build(name)
        emit(sched, plan)
        for op in sched.preload_ops + sched.body:
            if op.instr.mem is None:
                continue
            byte_off = op.instr.mem[1] * 8
            if 0 <= byte_off < 256:
                assert -128 <= displacement(op) <= 127, (name, byte_off)


def test_displacement_boundary():
    # byte offset 255 biases to +127, still the short form
    assert 255 - BIAS == 127
    assert 0 - BIAS == -128


def test_alias_applied_to_loads():
    plan, sched = build("sandybridge")
    kern = emit(sched, plan)
    # loads are emitted through the shorter single-precision mnemonic
    assert 'vmovaps' in kern.macros_header
    for op in sched.body:
        if op.instr.role == "aload":
            assert op.emitted_mnemonic == "vmovaps"


def test_roundtrip_matches_schedule():
    for name in PRESETS:
        plan, sched = build(name)
        kern = emit(sched, plan)
        parsed = parse_kernel_text(kern.source)
        ops = (sched.zero_ops + sched.preload_ops + sched.body
               + sched.epilogue_ops())
        assert len(parsed) == len(ops)
        for got, op in zip(parsed, ops):
            want_regs = []
            ins = op.instr
            if ins.role == "zero":
                want_regs = [op.regs[ins.dest]]
            elif ins.role in ("aload", "bload"):
                want_regs = [op.regs[ins.dest]]
            elif ins.role == "shuffle":
                want_regs = [op.regs[ins.srcs[0]], op.regs[ins.dest]]
            elif ins.role == "fma":
                want_regs = [op.regs[s] for s in ins.srcs if not
                             s.startswith("acc")] + [op.regs[ins.dest]]
                if op.temp is not None:
                    want_regs.append(op.temp)
                if plan.machine.instr(ins.mnemonic).load_part is not None:
                    want_regs = [op.regs[ins.srcs[0]], op.regs[ins.dest]]
            assert got["regs"] == want_regs, (name, ins.mnemonic, got)
            if ins.mem is not None and ins.role != "fma":
                panel, off = ins.mem
                want_mem = (panel, off // plan.vector_width
                            if panel == "A" else off)
                assert got["mem"] == want_mem


def test_macro_header_has_portable_and_asm():
    for name in PRESETS:
        hdr = generate_macros(load_preset(name))
        assert "KERN_PORTABLE" in hdr or name == "knc"
        assert "K_R" in hdr
        assert "VZERO" in hdr and "VSTORE_IA" in hdr


@pytest.mark.skipif(shutil.which("gcc") is None, reason="no C compiler")
def test_emitted_kernels_compile_and_run(tmp_path):
    main_c = r"""
#include <stdio.h>
#include <stdlib.h>
#include <math.h>
#include "dims.h"
void kern(long k, const double *a, const double *b, double *c, long rs, long cs);
int main(void) {
    long k = 8, mr = MR, nr = NR;
    double *a = malloc(sizeof(double)*mr*k);
    double *b = malloc(sizeof(double)*k*nr);
    double *c = calloc(mr*nr, sizeof(double));
    for (long i = 0; i < mr*k; i++) a[i] = (double)((i % 15) - 7);
    for (long i = 0; i < k*nr; i++) b[i] = (double)((i % 11) - 5);
    kern(k, a, b, c, nr, 1);
    double worst = 0;
    for (long i = 0; i < mr; i++)
        for (long j = 0; j < nr; j++) {
            double ref = 0;
            for (long p = 0; p < k; p++) ref += a[i+p*mr]*b[j+p*nr];
            double d = fabs(c[i*nr+j]-ref);
            if (d > worst) worst = d;
        }
    printf("%g\n", worst);
    return worst != 0.0;
}
"""
    for name in PRESETS:
        plan, sched = build(name)
        kern = emit(sched, plan, "kern")
        d = tmp_path / name
        d.mkdir()
        (d / "kernel.c").write_text(kern.source)
        (d / "kern_macros.h").write_text(kern.macros_header)
        (d / "dims.h").write_text(
            f"#define MR {plan.params.m_r}\n#define NR {plan.params.n_r}\n")
        (d / "main.c").write_text(main_c)
        exe = d / "t"
        subprocess.run(
            ["gcc", "-O2", "-DKERN_PORTABLE", "-o", str(exe), "kernel.c",
             "main.c", "-lm"], cwd=d, check=True, capture_output=True)
        res = subprocess.run([str(exe)], capture_output=True, text=True)
        assert res.returncode == 0, (name, res.stdout)


def test_empty_schedule_emits_noop_kernel(tmp_path):
    from opkgen.ir import Schedule

    plan, _ = build("sandybridge")
    sched = Schedule(machine_name="sandybridge", k_u=1, depth=1, zero_ops=[],
                     preload_ops=[], body=[])
    kern = emit(sched, plan, "noop")
    assert "void noop(" in kern.source
    if shutil.which("gcc"):
        (tmp_path / "kernel.c").write_text(kern.source)
        (tmp_path / "kern_macros.h").write_text(kern.macros_header)
        subprocess.run(["gcc", "-c", "-DKERN_PORTABLE", "kernel.c"],
                       cwd=tmp_path, check=True, capture_output=True)
