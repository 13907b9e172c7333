"""C code emission.

The kernel is emitted as plain C loop control around instruction macros that
freeze the static schedule: one macro per machine instruction, explicit
architectural registers, explicit byte displacements. kern_macros.h carries
two implementations of every macro: inline assembly for the machine family,
and a portable scalar fallback (define KERN_PORTABLE) generated from the
machine description so any host can run any kernel.

Byte-length optimizations: loads are emitted through the shorter
single-precision mnemonic when the machine file names one; accumulators sit
in high-ordered registers with at most one high register per instruction;
panel base pointers carry a +128 byte bias so displacements for the first
256 bytes of each panel encode in one signed byte ([-128, 127]).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .ir import ALOAD, BLOAD, FMA, PREFETCH, SHUFFLE, ZERO, A_PANEL, Schedule, ScheduledOp
from .machine import MachineDesc
from .planner import KernelPlan


class EmitError(ValueError):
    pass


class UnsupportedMnemonic(EmitError):
    pass


BIAS = 128  # bytes; displacement = byte offset - BIAS


@dataclass
class EmittedKernel:
    name: str
    source: str
    macros_header: str
    machine_name: str
    signature: str = ("void {name}(long k, const double *a, const double *b, "
                      "double *c, long rs_c, long cs_c)")


FAMILY = {"penryn": "sse2", "nehalem": "sse2", "sandybridge": "avx",
          "haswell": "avx2", "knc": "knc"}
REG_PREFIX = {"sse2": "xmm", "avx": "ymm", "avx2": "ymm", "knc": "zmm"}


def displacement(op: ScheduledOp) -> int:
    """Encoded byte displacement of a memory operand after the bias."""
    if op.instr.mem is None:
        raise EmitError("no memory operand")
    return op.instr.mem[1] * 8 - BIAS


def apply_byte_opts(schedule: Schedule, plan: KernelPlan) -> Schedule:
    """Shorter-encoding aliases, high-register policy check, bias check."""
    machine = plan.machine
    r_total, r_acc = plan.budget.r_total, plan.budget.r_acc
    for op in schedule.zero_ops + schedule.preload_ops + schedule.body:
        desc = machine.instr(op.instr.mnemonic)
        if desc.alias and desc.alias_bytes is not None \
                and desc.alias_bytes < desc.encoded_bytes:
            op.emitted_mnemonic = desc.alias
        high = {r for r in op.regs.values() if r >= r_total - r_acc}
        if len(high) > 1:
            raise EmitError(
                f"{op.instr.mnemonic}: {len(high)} high-ordered registers "
                f"in one instruction")
        if op.instr.mem is not None and 0 <= op.instr.mem[1] * 8 < 256:
            d = displacement(op)
            if not -128 <= d <= 127:
                raise EmitError(f"hot displacement {d} outside [-128, 127]")
    return schedule


# ---------------------------------------------------------------------------
# Macro header

# Macros taking a memory operand receive it as the GET_*_ADDR(i) pair
# "base, disp"; a variadic forwarding layer expands the pair before the
# argument count is checked.
_ADDR_MACROS = ("VLOAD_IA", "VBROADCAST_IA", "VBROADCAST4TO8_IA",
                "VPREFETCH", "VBCASTFMA")


def _forwarders(defined: list[str]) -> list[str]:
    return [f"#define {name}(...) K_{name}(__VA_ARGS__)"
            for name in _ADDR_MACROS if f"K_{name}" in "\n".join(defined)]


def _asm_macros(machine: MachineDesc, family: str) -> list[str]:
    """Inline-assembly macro definitions for one machine family."""
    rp = REG_PREFIX[family]
    lines = [
        "#define K_STR2(x) #x",
        "#define K_STR(x) K_STR2(x)",
        f'#define K_R(n) "%%{rp}" K_STR(n)',
        "#define KERN_REGFILE",
    ]
    if family in ("avx", "avx2"):
        load = "vmovaps" if machine.instr("vmovapd").alias else "vmovapd"
        lines += [
            f'#define K_VLOAD_IA(base, disp, r) __asm__ volatile("{load} '
            f'%c1(%0), " K_R(r) : : "r"(base), "i"(disp) : "memory");',
            '#define K_VBROADCAST_IA(base, disp, r) __asm__ volatile('
            '"vbroadcastsd %c1(%0), " K_R(r) : : "r"(base), "i"(disp) : "memory");',
            '#define VSHUFFLE_IA(imm, s, d) __asm__ volatile("vshufpd $" K_STR(imm) '
            '", " K_R(s) ", " K_R(s) ", " K_R(d) : : : "memory");',
            '#define VPERM2F128_IA(imm, s, d) __asm__ volatile("vperm2f128 $" '
            'K_STR(imm) ", " K_R(s) ", " K_R(s) ", " K_R(d) : : : "memory");',
            '#define VZERO(r) __asm__ volatile("vxorpd " K_R(r) ", " K_R(r) ", " '
            'K_R(r) : : : "memory");',
            '#define VSTORE_IA(ptr, r) __asm__ volatile("vmovupd " K_R(r) ", %0" '
            ': "=m"(*(double(*)[4])(ptr)) : : "memory");',
        ]
        if family == "avx2":
            lines.append(
                '#define VFMA(a, b, c) __asm__ volatile("vfmadd231pd " K_R(b) '
                '", " K_R(a) ", " K_R(c) : : : "memory");')
        else:
            lines.append(
                '#define VFMA(a, b, c, t) __asm__ volatile("vmulpd " K_R(b) ", " '
                'K_R(a) ", " K_R(t) "\\n\\tvaddpd " K_R(t) ", " K_R(c) ", " '
                'K_R(c) : : : "memory");')
    elif family == "sse2":
        load = "movaps" if machine.instr("movapd").alias else "movapd"
        lines += [
            f'#define K_VLOAD_IA(base, disp, r) __asm__ volatile("{load} '
            f'%c1(%0), " K_R(r) : : "r"(base), "i"(disp) : "memory");',
            '#define K_VBROADCAST_IA(base, disp, r) __asm__ volatile('
            '"movddup %c1(%0), " K_R(r) : : "r"(base), "i"(disp) : "memory");',
            '#define VSHUFFLE_IA(imm, s, d) __asm__ volatile("movapd " K_R(s) ", " '
            'K_R(d) "\\n\\tshufpd $" K_STR(imm) ", " K_R(d) ", " K_R(d) '
            ': : : "memory");',
            '#define VFMA(a, b, c, t) __asm__ volatile("movapd " K_R(b) ", " K_R(t) '
            '"\\n\\tmulpd " K_R(a) ", " K_R(t) "\\n\\taddpd " K_R(t) ", " K_R(c) '
            ': : : "memory");',
            '#define VZERO(r) __asm__ volatile("xorpd " K_R(r) ", " K_R(r) '
            ': : : "memory");',
            '#define VSTORE_IA(ptr, r) __asm__ volatile("movupd " K_R(r) ", %0" '
            ': "=m"(*(double(*)[2])(ptr)) : : "memory");',
        ]
    elif family == "knc":
        # the swizzle forms only exist on the original target; any other
        # host picks the portable fallback automatically (see generate_macros)
        lines += [
            '#define K_VLOAD_IA(base, disp, r) __asm__ volatile("vmovapd '
            '%c1(%0), " K_R(r) : : "r"(base), "i"(disp) : "memory");',
            '#define K_VBROADCAST4TO8_IA(base, disp, r) __asm__ volatile('
            '"vbroadcastf64x4 %c1(%0), " K_R(r) : : "r"(base), "i"(disp) '
            ': "memory");',
            '#define VPERMF32X4_IA(imm, s, d) __asm__ volatile("vpermf32x4 $" '
            'K_STR(imm) ", " K_R(s) ", " K_R(d) : : : "memory");',
            '#define VFMA(a, b, c) __asm__ volatile("vfmadd231pd " K_R(b) ", " '
            'K_R(a) ", " K_R(c) : : : "memory");',
            '#define VFMA_CDAB(a, b, c) __asm__ volatile("vfmadd231pd " K_R(b) '
            '"{cdab}, " K_R(a) ", " K_R(c) : : : "memory");',
            '#define K_VBCASTFMA(base, disp, a, c) __asm__ volatile('
            '"vfmadd231pd %c1(%0){1to8}, " K_R(a) ", " K_R(c) : : "r"(base), '
            '"i"(disp) : "memory");',
            '#define K_VPREFETCH(base, disp) __asm__ volatile("vprefetch0 '
            '%c1(%0)" : : "r"(base), "i"(disp) : "memory");',
            '#define VZERO(r) __asm__ volatile("vpxorq " K_R(r) ", " K_R(r) ", " '
            'K_R(r) : : : "memory");',
            '#define VSTORE_IA(ptr, r) __asm__ volatile("vmovupd " K_R(r) ", %0" '
            ': "=m"(*(double(*)[8])(ptr)) : : "memory");',
        ]
    else:
        raise UnsupportedMnemonic(f"no macro family for {family}")
    if family != "knc":
        lines.append('#define K_VPREFETCH(base, disp) __asm__ volatile('
                     '"prefetcht0 %c1(%0)" : : "r"(base), "i"(disp) : "memory");')
    return _forwarders(lines) + lines


def _portable_macros(machine: MachineDesc) -> list[str]:
    """Scalar fallback generated from the machine description."""
    from .updates import loaded_arrangement

    v = machine.vector_width
    lines = [
        f"typedef struct {{ double l[{v}]; }} kvec;",
        f"#define KERN_REGFILE kvec k_regs[{machine.num_registers}];",
        "#define K_R(n) k_regs[n]",
    ]
    if machine.fma_is_fused:
        lines.append("#define K_FMA(x, y, z) fma((x), (y), (z))")
    else:
        lines.append("#define K_FMA(x, y, z) ((z) + (x) * (y))")

    def fma_body(swizzle=None):
        out = []
        for i in range(v):
            j = swizzle[i] if swizzle else i
            out.append(f"K_R(c).l[{i}] = K_FMA(K_R(a).l[{i}], _b.l[{j}], "
                       f"K_R(c).l[{i}]);")
        return " ".join(out)

    made = set()
    for ins in machine.instructions:
        name = _macro_name(machine, ins.mnemonic)
        if name in made:
            continue
        kinds = ins.kinds
        if kinds == (SHUFFLE,):
            pat = ins.parts[0].pattern.src_index
            body = " ".join(f"K_R(d).l[{i}] = _t.l[{pat[i]}];" for i in range(v))
            lines.append(f"#define {name}(imm, s, d) do {{ kvec _t = K_R(s); "
                         f"{body} }} while (0);")
        elif kinds in (("load",), ("load", SHUFFLE)):
            arr = loaded_arrangement(v, ins)
            body = " ".join(
                f"K_R(r).l[{i}] = _s[{arr.lanes[i]}];" for i in range(v))
            lines.append(
                f"#define K_{name}(base, disp, r) do {{ const double *_s = "
                f"(const double *)((const char *)(base) + (disp)); {body} }} "
                f"while (0);")
        elif kinds == ("load", "compute"):  # load-fused multiply-accumulate
            body = " ".join(
                f"K_R(c).l[{i}] = K_FMA(K_R(a).l[{i}], _s[0], K_R(c).l[{i}]);"
                for i in range(v))
            lines.append(
                f"#define K_{name}(base, disp, a, c) do {{ const double *_s = "
                f"(const double *)((const char *)(base) + (disp)); {body} }} "
                f"while (0);")
        elif kinds == ("compute",) and ins.compute_part.op in ("fma", "mul"):
            sw = ins.compute_part.pattern
            sw_idx = sw.src_index if sw else None
            args = "a, b, c" if machine.fma_is_fused else "a, b, c, t"
            lines.append(f"#define {name}({args}) do {{ kvec _b = K_R(b); "
                         f"{fma_body(sw_idx)} }} while (0);")
        elif kinds == ("compute", "compute"):  # mul+add pair
            lines.append(f"#define {name}(a, b, c, t) do {{ kvec _b = K_R(b); "
                         f"{fma_body(None)} }} while (0);")
        elif kinds == (PREFETCH,):
            lines.append(f"#define K_{name}(base, disp) do {{ }} while (0);")
        elif kinds == ("store",):
            continue  # the generic VSTORE_IA below covers write-back
        elif kinds == ("compute",) and ins.compute_part.op == "zero":
            continue  # generic VZERO below
        else:
            raise UnsupportedMnemonic(f"{machine.name}: {ins.mnemonic}")
        made.add(name)
    lines += [
        "#define VZERO(r) do { int _i; for (_i = 0; _i < %d; _i++) "
        "K_R(r).l[_i] = 0.0; } while (0);" % v,
        "#define VSTORE_IA(ptr, r) do { int _i; for (_i = 0; _i < %d; _i++) "
        "(ptr)[_i] = K_R(r).l[_i]; } while (0);" % v,
    ]
    return _forwarders(lines) + lines


_MACRO_NAMES = {
    "sse2": {"movapd": "VLOAD_IA", "movaps": "VLOAD_IA",
             "movddup": "VBROADCAST_IA", "shufpd": "VSHUFFLE_IA",
             "fma": "VFMA", "xorpd": "VZERO", "storepd": "VSTORE_IA"},
    "avx": {"vmovapd": "VLOAD_IA", "vmovaps": "VLOAD_IA",
            "vbroadcastsd": "VBROADCAST_IA", "vshufpd": "VSHUFFLE_IA",
            "vperm2f128": "VPERM2F128_IA", "vfma": "VFMA",
            "vxorpd": "VZERO", "vstorepd": "VSTORE_IA"},
    "avx2": {"vmovapd": "VLOAD_IA", "vmovaps": "VLOAD_IA",
             "vbroadcastsd": "VBROADCAST_IA", "vshufpd": "VSHUFFLE_IA",
             "vperm2f128": "VPERM2F128_IA", "vfmadd231pd": "VFMA",
             "vxorpd": "VZERO", "vstorepd": "VSTORE_IA"},
    "knc": {"vmovapd": "VLOAD_IA", "vbroadcast_4to8": "VBROADCAST4TO8_IA",
            "vpermf32x4": "VPERMF32X4_IA", "vfmadd231pd": "VFMA",
            "vfmadd231pd_cdab": "VFMA_CDAB", "vfmadd231pd_1to8": "VBCASTFMA",
            "vprefetch0": "VPREFETCH", "vpxorq": "VZERO",
            "vstorepd": "VSTORE_IA"},
}


def _macro_name(machine: MachineDesc, mnemonic: str) -> str:
    family = FAMILY.get(machine.name)
    if family is None:
        # unknown machine: derive generic names so custom files still emit
        return "V" + re.sub(r"[^A-Za-z0-9]", "_", mnemonic).upper()
    table = _MACRO_NAMES[family]
    if mnemonic not in table:
        raise UnsupportedMnemonic(f"{machine.name}: no macro for {mnemonic}")
    return table[mnemonic]


def generate_macros(machine: MachineDesc) -> str:
    family = FAMILY.get(machine.name, "portable-only")
    head = [
        "/* instruction macros frozen by the kernel generator; define",
        "   KERN_PORTABLE for the scalar fallback on any host */",
        "#ifndef KERN_MACROS_H",
        "#define KERN_MACROS_H",
        "",
        "#include <math.h>",
        "",
        f"#define KERN_VW {machine.vector_width}",
        "",
    ]
    if family in REG_PREFIX:
        if machine.name == "knc":
            cond = "#if defined(KERN_PORTABLE) || !defined(__MIC__)"
        else:
            cond = "#ifdef KERN_PORTABLE"
        body = [cond] + _portable_macros(machine) + ["#else"] \
            + _asm_macros(machine, family) + ["#endif"]
    else:
        body = _portable_macros(machine)
    return "\n".join(head + body + ["", "#endif /* KERN_MACROS_H */", ""])


# ---------------------------------------------------------------------------
# Kernel emission


def _collect_reg_tables(plan: KernelPlan, schedule: Schedule):
    """Stable GET_*_REG index tables from the allocation."""
    a_regs: dict[int, int] = {}
    b_regs: dict[int, int] = {}
    t_regs: dict[int, int] = {}
    for op in schedule.preload_ops + schedule.body:
        for name, reg in sorted(op.regs.items()):
            if name.startswith("acc"):
                continue
            table = a_regs if name.startswith("a") else b_regs
            if reg not in table.values():
                table[len(table)] = reg
        if op.temp is not None and op.temp not in t_regs.values():
            t_regs[len(t_regs)] = op.temp
    return a_regs, b_regs, t_regs


def emit(schedule: Schedule, plan: KernelPlan, name: str = "kernel") -> EmittedKernel:
    """Emit the scheduled kernel as C source (text order = schedule order)."""
    machine = plan.machine
    p = plan.params
    v = plan.vector_width
    apply_byte_opts(schedule, plan)
    a_regs, b_regs, t_regs = _collect_reg_tables(plan, schedule)
    a_index = {reg: i for i, reg in a_regs.items()}
    b_index = {reg: i for i, reg in b_regs.items()}
    t_index = {reg: i for i, reg in t_regs.items()}

    defines = [f"#define KERN_KU {p.k_u}"]
    for i, reg in a_regs.items():
        defines.append(f"#define A_REG_{i} {reg}")
    for i, reg in b_regs.items():
        defines.append(f"#define B_REG_{i} {reg}")
    for i, reg in t_regs.items():
        defines.append(f"#define T_REG_{i} {reg}")
    for acc, reg in sorted(schedule.acc_regs.items()):
        rb, col = acc // p.n_r, acc % p.n_r
        defines.append(f"#define C_REG_{rb}_{col} {reg}")
    defines += [
        "#define GET_A_REG(i) A_REG_##i",
        "#define GET_B_REG(i) B_REG_##i",
        "#define GET_T_REG(i) T_REG_##i",
        "#define GET_C_REG(i, j) C_REG_##i##_##j",
        f"#define GET_A_ADDR(i) a_ptr, ({8 * v}*(i) - {BIAS})",
        f"#define GET_B_ADDR(e) b_ptr, (8*(e) - {BIAS})",
    ]

    def reg_arg(op: ScheduledOp, vname: str) -> str:
        reg = op.regs[vname]
        if vname.startswith("acc"):
            acc = int(vname[3:])
            return f"GET_C_REG({acc // p.n_r},{acc % p.n_r})"
        if vname.startswith("a"):
            return f"GET_A_REG({a_index[reg]})"
        return f"GET_B_REG({b_index[reg]})"

    def render(op: ScheduledOp) -> str:
        ins = op.instr
        desc = machine.instr(ins.mnemonic)
        macro = _macro_name(machine, op.mnemonic)
        if ins.role == ZERO:
            return f"{macro}({reg_arg(op, ins.dest)})"
        if ins.role == PREFETCH:
            panel, off = ins.mem
            addr = (f"GET_A_ADDR({off // v})" if panel == A_PANEL
                    else f"GET_B_ADDR({off})")
            return f"{macro}({addr})"
        if ins.role in (ALOAD, BLOAD):
            panel, off = ins.mem
            addr = (f"GET_A_ADDR({off // v})" if panel == A_PANEL
                    else f"GET_B_ADDR({off})")
            return f"{macro}({addr}, {reg_arg(op, ins.dest)})"
        if ins.role == SHUFFLE:
            imm = desc.imm if desc.imm is not None else 0
            return (f"{macro}(0x{imm:02x}, {reg_arg(op, ins.srcs[0])}, "
                    f"{reg_arg(op, ins.dest)})")
        if ins.role == FMA:
            if desc.load_part is not None:
                panel, off = ins.mem
                return (f"{macro}(GET_B_ADDR({off}), {reg_arg(op, ins.srcs[0])}, "
                        f"{reg_arg(op, ins.dest)})")
            args = [reg_arg(op, ins.srcs[0]), reg_arg(op, ins.srcs[1]),
                    reg_arg(op, ins.dest)]
            if desc.needs_temp:
                args.append(f"GET_T_REG({t_index[op.temp]})")
            return f"{macro}({', '.join(args)})"
        raise UnsupportedMnemonic(f"cannot emit role {ins.role!r}")

    lines: list[str] = []
    w = lines.append
    w("/* generated outer-product micro-kernel: c += a*b with a packed")
    w(f"   {p.m_r}x{p.n_r} block, a column-major {p.m_r}xk, b row-major "
      f"kx{p.n_r},")
    w(f"   c strided; k must be a positive multiple of {p.k_u} */")
    w('#include "kern_macros.h"')
    w("")
    w("\n".join(defines))
    w("")
    w(f"void {name}(long k, const double *a, const double *b, double *c,")
    w(f"{' ' * (6 + len(name))}long rs_c, long cs_c)")
    w("{")
    w(f"    const char *a_ptr = (const char *)a + {BIAS};")
    w(f"    const char *b_ptr = (const char *)b + {BIAS};")
    w("    long p;")
    w("    KERN_REGFILE")
    w("")
    w("    /* zero the accumulator block */")
    for op in schedule.zero_ops:
        w(f"    {render(op)}")
    if schedule.preload_ops:
        w("")
        w("    /* software-pipeline prologue */")
        for op in schedule.preload_ops:
            w(f"    {render(op)}")
    w("")
    w("    for (p = 0; p + KERN_KU < k; p += KERN_KU) {")
    w("        /* STEADY STATE CODE */")
    for op in schedule.body:
        w(f"        {render(op)}")
    w(f"        a_ptr += {8 * p.m_r * p.k_u};")
    w(f"        b_ptr += {8 * p.n_r * p.k_u};")
    w("    }")
    w("    /* final unrolled block, no next-trip loads */")
    for op in schedule.epilogue_ops():
        w(f"    {render(op)}")
    w("")
    w("    /* write the accumulators back into the strided c */")
    w("    {")
    w(f"        double t_buf[{p.m_r * p.n_r}] __attribute__((aligned(64)));")
    for acc in sorted(schedule.acc_regs):
        rb, col = acc // p.n_r, acc % p.n_r
        w(f"        VSTORE_IA(&t_buf[{acc * v}], GET_C_REG({rb},{col}))")
    for acc, lane, row, col in plan.writeback():
        w(f"        c[{row}*rs_c + {col}*cs_c] += t_buf[{acc * v + lane}];")
    w("    }")
    w("}")
    source = "\n".join(lines) + "\n"
    return EmittedKernel(name=name, source=source,
                         macros_header=generate_macros(machine),
                         machine_name=machine.name)


# ---------------------------------------------------------------------------
# Round-trip parsing (golden tests)


_MACRO_LINE = re.compile(r"^\s*(V[A-Z0-9_]+)\((.*)\)\s*$")


def parse_kernel_text(source: str) -> list[dict]:
    """Parse emitted macro lines back to (macro, registers, displacement).

    Resolves the GET_*_REG tables from the kernel's own #defines, so the
    result is directly comparable with the schedule."""
    defines = {}
    for m in re.finditer(r"#define ([A-Z]_REG_[0-9_]+) (\d+)", source):
        defines[m.group(1)] = int(m.group(2))
    out = []
    for raw in source.splitlines():
        m = _MACRO_LINE.match(raw)
        if not m or m.group(1) == "VSTORE_IA":
            continue
        macro, argstr = m.group(1), m.group(2)
        args = [a.strip() for a in _split_args(argstr)]
        regs = []
        mem = None
        for a in args:
            rm = re.match(r"GET_([ABT])_REG\((\d+)\)$", a)
            cm = re.match(r"GET_C_REG\((\d+),\s*(\d+)\)$", a)
            am = re.match(r"GET_([AB])_ADDR\((\d+)\)$", a)
            if rm:
                regs.append(defines[f"{rm.group(1)}_REG_{rm.group(2)}"])
            elif cm:
                regs.append(defines[f"C_REG_{cm.group(1)}_{cm.group(2)}"])
            elif am:
                mem = (am.group(1), int(am.group(2)))
        out.append({"macro": macro, "regs": regs, "mem": mem})
    return out


def _split_args(argstr: str) -> list[str]:
    args, depth, cur = [], 0, ""
    for ch in argstr:
        if ch == "," and depth == 0:
            args.append(cur)
            cur = ""
            continue
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        cur += ch
    if cur.strip():
        args.append(cur)
    return args
