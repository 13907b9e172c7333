"""Two evaluators over a schedule.

`interpret` executes the register-allocated instruction stream on a virtual
vector machine and applies the accumulator write-back, so it checks the
whole pipeline (ordering, registers, addressing) against plain arithmetic.

`simulate` replays the stream through a port-level timing model: in-order
issue of up to issue_width instructions per cycle, each instruction's port
jobs dispatched to free ports (first free alternative in declared order),
operands ready when the producing job's latency has elapsed. Composite
instructions dispatch their constituents in sequence. The model never beats
the drain time of the busiest port, and for latency-hidden schedules it
settles at the throughput the queueing model predicts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .ir import ALOAD, BLOAD, FMA, PREFETCH, SHUFFLE, ZERO, A_PANEL, Schedule, ScheduledOp
from .machine import InstrDesc, MachineDesc
from .planner import KernelPlan
from .updates import loaded_arrangement


class SimError(ValueError):
    pass


class UninitializedRegister(SimError):
    pass


class OutOfBoundsAccess(SimError):
    pass


def part_srcs(desc: InstrDesc, srcs: tuple[str, ...]) -> list[tuple[str, ...]]:
    """Which register sources each constituent reads."""
    if len(desc.parts) == 1:
        return [srcs]
    kinds = desc.kinds
    if kinds == ("compute", "compute"):  # multiply, then accumulate
        return [srcs[:2], srcs[2:]]
    if kinds == ("load", "compute"):  # load-fused multiply-accumulate
        return [(), srcs]
    if kinds == ("load", "shuffle"):  # broadcast pair
        return [(), ()]
    return [srcs] + [()] * (len(desc.parts) - 1)


# ---------------------------------------------------------------------------
# Timing model


class IssueModel:
    """Two-stage timing: an in-order front end enqueues up to issue_width
    instructions per cycle into per-port FIFO queues; each queue serves one
    job per 1/throughput cycles, and the job at the head dispatches once its
    operands are ready (head-of-line blocking, so the static order decides
    what can hide latency). Jobs of one instruction enter their queues
    together; composite constituents chain internally."""

    def __init__(self, machine: MachineDesc):
        self.machine = machine
        self.rate = {p.name: p.throughput for p in machine.ports}
        self.queue_tail: dict[str, Fraction] = {p.name: Fraction(0) for p in machine.ports}
        self.busy: dict[str, int] = {p.name: 0 for p in machine.ports}
        self.reg_ready: dict[str, Fraction] = {}
        self.enq_cycle = 0
        self.enq_count = 0
        self.stall_cycles = 0

    def _enqueue_slot(self) -> int:
        if self.enq_count >= self.machine.issue_width:
            self.enq_cycle += 1
            self.enq_count = 0
        self.enq_count += 1
        return self.enq_cycle

    def _dispatch(self, part, ready: Fraction) -> Fraction:
        """Send one part's jobs to their queues; returns the dispatch time."""
        when = Fraction(0)
        for alts in part.ports.alternatives():
            # shortest backlog among the alternatives, declared order on ties
            port = min(alts, key=lambda p: self.queue_tail[p])
            tail = self.queue_tail[port]
            if ready > tail:
                self.stall_cycles += math.ceil(ready - tail)
            t = max(ready, tail)
            self.queue_tail[port] = t + 1 / self.rate[port]
            self.busy[port] += 1
            when = max(when, t)
        return when

    def run(self, op: ScheduledOp) -> int:
        ins = op.instr
        desc = self.machine.instr(ins.mnemonic)
        reads = part_srcs(desc, ins.srcs)
        enq = self._enqueue_slot()
        dispatch: list[Fraction] = []
        completion = Fraction(enq)
        for k, part in enumerate(desc.parts):
            ready = Fraction(enq) if k == 0 else completion
            for s in reads[k]:
                ready = max(ready, self.reg_ready.get(s, Fraction(0)))
            t = self._dispatch(part, ready)
            dispatch.append(t)
            completion = t + part.latency
        if ins.dest is not None:
            self.reg_ready[ins.dest] = completion
        return math.floor(dispatch[0])


def fill_slots(schedule: Schedule, machine: MachineDesc):
    """Assign issue slots from one cold pass (informational)."""
    model = IssueModel(machine)
    for op in schedule.zero_ops + schedule.preload_ops + schedule.body:
        op.slot = model.run(op)


@dataclass
class SimReport:
    cycles_per_iteration: Fraction
    port_busy_per_iteration: dict
    drain_bound: Fraction
    stall_cycles: int
    iterations: int

    def deviation_from(self, lam: Fraction) -> float:
        model = 1 / lam
        return float(abs(self.cycles_per_iteration - model) / model)


def simulate(schedule: Schedule, machine: MachineDesc, iterations: int = 64) -> SimReport:
    """Steady-state cycles per outer-product iteration."""
    if not schedule.body:
        return SimReport(Fraction(0), {p.name: 0 for p in machine.ports},
                         Fraction(0), 0, iterations)
    if iterations < 8:
        raise SimError("need at least 8 iterations for a steady state")
    model = IssueModel(machine)
    for op in schedule.zero_ops + schedule.preload_ops:
        model.run(op)
    trip_last: list[int] = []
    busy_snapshots: list[dict] = []
    for _ in range(iterations):
        t = 0
        for op in schedule.body:
            t = model.run(op)
        trip_last.append(t)
        busy_snapshots.append(dict(model.busy))
    a, b = iterations // 2, iterations - 1
    cpi = Fraction(trip_last[b] - trip_last[a], (b - a) * schedule.k_u)
    busy = {}
    for p in machine.ports:
        jobs = busy_snapshots[b][p.name] - busy_snapshots[a][p.name]
        busy[p.name] = Fraction(jobs, (b - a) * schedule.k_u)
    drain = max((busy[p.name] / p.throughput for p in machine.ports), default=Fraction(0))
    return SimReport(cycles_per_iteration=cpi, port_busy_per_iteration=busy,
                     drain_bound=drain, stall_cycles=model.stall_cycles,
                     iterations=iterations)


# ---------------------------------------------------------------------------
# Functional interpreter


def _fl(x: Fraction) -> float:
    return float(x)


class _Machine:
    """Register file plus packed-panel memory for one kernel run."""

    def __init__(self, plan: KernelPlan, schedule: Schedule, a, b):
        self.plan = plan
        self.machine = plan.machine
        self.v = plan.vector_width
        self.a = a
        self.b = b
        self.int_mode = all(isinstance(x, int) for x in a) and all(
            isinstance(x, int) for x in b)
        self.regs: dict[int, tuple] = {}
        self.fused = plan.machine.fma_is_fused
        self.acc_regs = schedule.acc_regs

    def read(self, reg: int) -> tuple:
        if reg not in self.regs:
            raise UninitializedRegister(f"register {reg} read before write")
        return self.regs[reg]

    def load_lanes(self, desc: InstrDesc, panel: str, base: int) -> tuple:
        mem = self.a if panel == A_PANEL else self.b
        u = desc.load_part.unique_elements
        arr = loaded_arrangement(self.v, desc)
        lanes = []
        for i in range(self.v):
            idx = base + arr.lanes[i] % u
            if not 0 <= idx < len(mem):
                raise OutOfBoundsAccess(f"{panel}[{idx}] outside packed panel")
            lanes.append(mem[idx])
        out = tuple(lanes)
        for part in desc.parts[1:]:
            if part.kind == SHUFFLE and part.pattern is not None:
                out = part.pattern.apply(out)
        return out

    def fma_lanes(self, a_l, b_l, acc_l) -> tuple:
        if self.int_mode:
            return tuple(acc + x * y for x, y, acc in zip(a_l, b_l, acc_l))
        if self.fused:
            return tuple(
                _fl(Fraction(x) * Fraction(y) + Fraction(acc))
                for x, y, acc in zip(a_l, b_l, acc_l))
        return tuple(acc + x * y for x, y, acc in zip(a_l, b_l, acc_l))

    def execute(self, op: ScheduledOp, trip_base: int):
        ins = op.instr
        desc = self.machine.instr(ins.mnemonic)
        role = ins.role
        if role == ZERO:
            self.regs[op.reg_of(ins.dest)] = tuple(
                0 if self.int_mode else 0.0 for _ in range(self.v))
            return
        if role == PREFETCH:
            return
        if role in (ALOAD, BLOAD):
            panel, off = ins.mem
            stride = self.plan.params.m_r if panel == A_PANEL else self.plan.params.n_r
            self.regs[op.reg_of(ins.dest)] = self.load_lanes(
                desc, panel, trip_base * stride + off)
            return
        if role == SHUFFLE:
            src = self.read(op.reg_of(ins.srcs[0]))
            self.regs[op.reg_of(ins.dest)] = desc.parts[0].pattern.apply(src)
            return
        if role == FMA:
            a_l = self.read(op.reg_of(ins.srcs[0]))
            acc_reg = op.reg_of(ins.dest)
            acc_l = self.read(acc_reg)
            if desc.load_part is not None:
                panel, off = ins.mem
                stride = self.plan.params.n_r
                b_l = self.load_lanes(desc, panel, trip_base * stride + off)
            else:
                b_l = self.read(op.reg_of(ins.srcs[1]))
            if ins.swizzle is not None:
                b_l = tuple(b_l[s] for s in ins.swizzle)
            self.regs[acc_reg] = self.fma_lanes(a_l, b_l, acc_l)
            return
        raise SimError(f"cannot interpret role {role!r}")


def interpret(plan: KernelPlan, schedule: Schedule, a, b, c, k: int):
    """Run the kernel: returns c + A*B for packed panels a (column-major
    m_r x k) and b (row-major k x n_r); c is an m_r x n_r nested list."""
    p = plan.params
    if k % p.k_u:
        raise SimError(f"k={k} must be a multiple of the unroll factor {p.k_u}")
    if len(a) != p.m_r * k or len(b) != k * p.n_r:
        raise OutOfBoundsAccess("panel sizes do not match the kernel dims")
    vm = _Machine(plan, schedule, a, b)
    for op in schedule.zero_ops:
        vm.execute(op, 0)
    for op in schedule.preload_ops:
        vm.execute(op, 0)
    trips = k // p.k_u
    for trip in range(trips):
        ops = schedule.body if trip < trips - 1 else schedule.epilogue_ops()
        for op in ops:
            vm.execute(op, trip * p.k_u)
    out = [list(row) for row in c]
    for acc, lane, row, col in plan.writeback():
        out[row][col] += vm.regs[schedule.acc_regs[acc]][lane]
    return out


def reference_gemm(a, b, c, m_r: int, n_r: int, k: int, fused: bool = False):
    """Naive triple loop, k innermost ascending: the correctness oracle.

    With fused=True each multiply-accumulate rounds once (the arithmetic of
    machines with a fused instruction); otherwise multiply and add round
    separately. Integer panels are exact either way.
    """
    int_mode = all(isinstance(x, int) for x in a) and all(
        isinstance(x, int) for x in b)
    out = [list(row) for row in c]
    for i in range(m_r):
        for j in range(n_r):
            acc = 0 if int_mode else 0.0
            for p in range(k):
                x, y = a[i + p * m_r], b[j + p * n_r]
                if fused and not int_mode:
                    acc = _fl(Fraction(x) * Fraction(y) + Fraction(acc))
                else:
                    acc = acc + x * y
            out[i][j] += acc
    return out
