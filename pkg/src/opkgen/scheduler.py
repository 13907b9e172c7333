"""Static scheduling: expand a plan into straight-line virtual instructions,
remove redundancy, software-pipeline the panel loads across iterations, and
allocate architectural registers with zero spills.

Ordering rules (all deterministic):
  * sub-blocks are visited column-split-major, row blocks inner;
  * a B arrangement op is placed one sub-block ahead of its first consumer
    when register pressure allows, else just in time;
  * with pipeline depth d >= 2 the A-panel loads move d-1 iterations ahead,
    to the top of the hosting section, budgeted against the section's own
    register need; stripe B loads stay put, their latency drains inside the
    shuffle pipe's slack;
  * a multiply-accumulate is deferred while fewer jobs than the producer's
    latency separate it from that producer in a shared port queue, which
    interleaves independent sub-blocks under long-latency shuffles.

Accumulators are pinned to the high-ordered registers (low registers hold
the working set, so an instruction carries at most one high register), and
the loop body never stores: if the working set does not fit, scheduling
fails rather than spilling.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Optional

from .ir import (
    ALOAD,
    BLOAD,
    FMA,
    PREFETCH,
    SHUFFLE,
    ZERO,
    A_PANEL,
    B_PANEL,
    Schedule,
    ScheduledOp,
    VirtualInstr,
)
from .machine import MachineDesc
from .planner import KernelPlan


class ScheduleError(ValueError):
    pass


class InfeasibleDepth(ScheduleError):
    pass


class AllocationFailure(InfeasibleDepth):
    pass


# ---------------------------------------------------------------------------
# Expansion


def expand(plan: KernelPlan) -> list[VirtualInstr]:
    """Unroll the skeleton over k_u iterations, driving the embeddings.

    Emission follows the blocked loop nest; the embedding conditions keep the
    stream minimal (arrangements shared across row blocks, broadcasts
    rematerialized per row block) so it reproduces the instruction mix.
    """
    p = plan.params
    emb = plan.embeddings()
    ids = itertools.count()
    out: list[VirtualInstr] = []
    sub_of = {}
    for idx, (row, col, m_s, width) in enumerate(plan.subblocks()):
        for r in range(row, row + m_s):
            for c in range(col, col + width):
                sub_of[(r, c)] = idx

    for pp in range(p.k_u):
        for row, col, m_s, width in plan.subblocks():
            for ii in range(row, row + m_s):
                em = emb.get_a_element(ii, 0) if col == 0 else None
                if em is not None:
                    rb = em.row_block
                    out.append(VirtualInstr(
                        vid=next(ids), mnemonic=em.mnemonic, role=ALOAD,
                        dest=f"a{pp}_{rb}", srcs=(),
                        mem=(A_PANEL, pp * p.m_r + rb * plan.vector_width),
                        pp=pp, cell=(rb, 0), subblock=sub_of[(ii, col)]))
                for jj in range(col, col + width):
                    out.extend(_expand_cell(plan, emb, ids, pp, ii, jj, sub_of))
        pf = plan.machine.prefetch_instr()
        for i in range(plan.prefetches):
            if i == 0:
                mem = (A_PANEL, (pp + p.k_u) * p.m_r)
            else:
                mem = (B_PANEL, (pp + p.k_u) * p.n_r + (i - 1) * 8)
            out.append(VirtualInstr(
                vid=next(ids), mnemonic=pf.mnemonic, role=PREFETCH, dest=None,
                srcs=(), mem=mem, pp=pp, subblock=i))
    return out


def _expand_cell(plan, emb, ids, pp, ii, jj, sub_of):
    p = plan.params
    v = plan.vector_width
    out = []
    em = emb.get_b_element(ii, jj)
    if em is not None:
        col = em.seg_col
        if em.role == "bload" and em.broadcast_col >= 0:
            out.append(VirtualInstr(
                vid=next(ids), mnemonic=em.mnemonic, role=BLOAD,
                dest=f"bc{pp}_{em.row_block}_{em.broadcast_col}", srcs=(),
                mem=(B_PANEL, pp * p.n_r + em.broadcast_col), pp=pp,
                cell=(em.row_block, em.broadcast_col),
                subblock=sub_of[(ii, jj)], remat=True))
        elif em.role == "bload":
            out.append(VirtualInstr(
                vid=next(ids), mnemonic=em.mnemonic, role=BLOAD,
                dest=f"b{pp}_{col}_0", srcs=(),
                mem=(B_PANEL, pp * p.n_r + col), pp=pp, cell=(0, col),
                subblock=sub_of[(ii, jj)]))
        else:  # standalone shuffle
            out.append(VirtualInstr(
                vid=next(ids), mnemonic=em.mnemonic, role=SHUFFLE,
                dest=f"b{pp}_{col}_{em.step}",
                srcs=(f"b{pp}_{col}_{em.parent_step}",), pp=pp,
                cell=(0, col), subblock=sub_of[(ii, jj)]))
    em = emb.fma(ii, jj)
    if em is not None:
        rb = em.row_block
        col, upd = emb.segment_at(jj)
        acc = em.acc
        instr = plan.machine.instr(em.mnemonic)
        swizzle = None
        cp = instr.compute_part
        if cp is not None and cp.pattern is not None:
            swizzle = cp.pattern.src_index
        if instr.load_part is not None:  # load-fused multiply-accumulate
            out.append(VirtualInstr(
                vid=next(ids), mnemonic=em.mnemonic, role=FMA,
                dest=f"acc{acc}", srcs=(f"a{pp}_{rb}", f"acc{acc}"),
                mem=(B_PANEL, pp * p.n_r + jj), acc=acc, pp=pp,
                cell=(rb, jj), subblock=sub_of[(ii, jj)]))
        else:
            if upd.n_u == 1:
                b_reg = f"bc{pp}_{rb}_{jj}"
            else:
                b_reg = f"b{pp}_{col}_{em.parent_step}"
            out.append(VirtualInstr(
                vid=next(ids), mnemonic=em.mnemonic, role=FMA,
                dest=f"acc{acc}", srcs=(f"a{pp}_{rb}", b_reg, f"acc{acc}"),
                acc=acc, pp=pp, cell=(rb, jj), subblock=sub_of[(ii, jj)],
                swizzle=swizzle))
    return out


# ---------------------------------------------------------------------------
# Common-subexpression elimination


def cse(stream: list[VirtualInstr]) -> list[VirtualInstr]:
    """Merge value-identical loads and shuffles.

    Ops flagged `remat` (per-row-block broadcasts) are kept duplicated on
    purpose: re-broadcasting is byte-cheap and keeps live ranges short.
    """
    canon: dict = {}
    rename: dict[str, str] = {}
    out = []
    for ins in stream:
        srcs = tuple(rename.get(s, s) for s in ins.srcs)
        if srcs != ins.srcs:
            ins = replace(ins, srcs=srcs)
        if ins.role in (ALOAD, BLOAD, SHUFFLE) and not ins.remat:
            key = ins.key()
            prev = canon.get(key)
            if prev is not None:
                rename[ins.dest] = prev.dest
                continue
            canon[key] = ins
        out.append(ins)
    return out


# ---------------------------------------------------------------------------
# Ordering and software pipelining


def pipeline(stream: list[VirtualInstr], plan: KernelPlan,
             depth: Optional[int] = None) -> tuple[list[VirtualInstr], list[VirtualInstr]]:
    """Order the body and hoist the A-panel loads across iterations.

    Returns (preload, body). With depth 1 every section is self-contained.
    With depth d >= 2 the A loads of iteration pp move to the top of
    iteration pp-(d-1), the first iterations' loads become the prologue, and
    copies at offset +k_u placed near the body tail feed the next trip. The
    B stripe loads stay in their own section: their latency drains inside
    the shuffle pipe's slack, and double-buffering them does not fit the
    register budget on the narrow machines.
    """
    machine = plan.machine
    p = plan.params
    depth = plan.depth if depth is None else depth
    if depth < 1:
        raise ScheduleError("pipeline depth must be >= 1")
    n_sub = len(plan.subblocks())
    hoist = depth - 1
    if hoist > p.k_u:
        raise InfeasibleDepth(
            f"depth {depth} needs {hoist} iterations of lookahead but the "
            f"body only unrolls {p.k_u}; increase k_u or lower the depth")

    sections: dict[int, list[VirtualInstr]] = {pp: [] for pp in range(p.k_u)}
    for ins in stream:
        sections[ins.pp].append(ins)

    ids = itertools.count(10_000_000)
    preload: list[VirtualInstr] = []
    pending_by_section: dict[int, list] = {pp: [] for pp in range(p.k_u)}
    hoisted_vids: set[int] = set()

    def canonical_key(ins: VirtualInstr, consumers_first: dict) -> tuple:
        if ins.role == ALOAD:
            return (1, 0, ins.vid)
        if ins.role == BLOAD and not ins.remat and ins.cell \
                and ins.cell[1] == 0:
            return (1, 1, ins.vid)  # leading stripe load joins the panel loads
        if ins.role == PREFETCH:
            gap = max(1, n_sub // (plan.prefetches + 1))
            return (2, min((ins.subblock + 1) * gap, n_sub - 1), 3, ins.vid)
        if ins.role == FMA:
            return (2, ins.subblock, 1, ins.vid)
        fc = consumers_first.get(ins.dest, ins.subblock)
        return (2, max(fc - 1, 0), 0, ins.vid)

    for pp in range(p.k_u):
        consumers_first: dict[str, int] = {}
        for ins in sections[pp]:
            for s in ins.srcs:
                if s not in consumers_first:
                    consumers_first[s] = ins.subblock
        for ins in sections[pp]:
            if ins.role == ALOAD and hoist > 0:
                continue  # placed below
            pending_by_section[pp].append((canonical_key(ins, consumers_first), ins))
        if hoist == 0:
            continue
        aloads = [i for i in sections[pp] if i.role == ALOAD]
        host = pp - hoist
        if host < 0:
            # loaded in the prologue; the body tail reloads for the next trip
            preload.extend(aloads)
            for ins in aloads:
                copy = replace(ins, vid=next(ids), pp=p.k_u,
                               mem=(A_PANEL, ins.mem[1] + p.k_u * p.m_r))
                hoisted_vids.add(copy.vid)
                pending_by_section[host + p.k_u].append(((1, 0, copy.vid), copy))
        else:
            for ins in aloads:
                hoisted_vids.add(ins.vid)
                pending_by_section[host].append(((1, 0, ins.vid), ins))

    body: list[VirtualInstr] = []
    pos_of: dict[str, int] = {}
    producer: dict[str, VirtualInstr] = {}
    carry_in = {i.dest for i in preload}
    live = set(carry_in)
    pool = plan.budget.r_total - plan.budget.r_acc

    remaining_reads: dict[str, int] = {}
    for pp in range(p.k_u):
        for ins in sections[pp]:
            for s in ins.srcs:
                remaining_reads[s] = remaining_reads.get(s, 0) + 1

    port_sets = {
        i.mnemonic: frozenset(
            port for part in i.parts for port in part.ports.leaves())
        for i in machine.instructions
    }

    def deps_emitted(ins: VirtualInstr) -> bool:
        return all(s.startswith("acc") or s in pos_of or s in carry_in
                   for s in ins.srcs)

    def run_section(pending, live_set, emit_fn, hoist_budget=None,
                    reads_left=None):
        if reads_left is None:
            reads_left = remaining_reads
        # per-port queued-job counters: a consumer is deferred while fewer
        # jobs than the producer's latency separate them in a shared queue
        # (head-of-line blocking would stall the port)
        port_count: dict[str, int] = {}
        marks: dict[str, dict] = {}

        def account(ins: VirtualInstr):
            desc = machine.instr(ins.mnemonic)
            for part in desc.parts:
                for alts in part.ports.alternatives():
                    port_count[alts[0]] = port_count.get(alts[0], 0) + 1
            if ins.dest:
                marks[ins.dest] = dict(port_count)

        def ready(ins: VirtualInstr) -> bool:
            if ins.role != FMA:
                return True
            mine = port_sets[ins.mnemonic]
            for s in ins.srcs:
                prod = producer.get(s)
                if prod is None or prod.role == FMA or s not in marks:
                    continue
                shared = port_sets[prod.mnemonic] & mine
                if not shared:
                    continue
                latency = machine.instr(prod.mnemonic).latency
                gap = min(port_count.get(q, 0) - marks[s].get(q, 0)
                          for q in shared)
                if gap < latency:
                    return False
            return True
        emitted_fmas: dict[int, int] = {}
        fma_rank: dict[int, dict[int, int]] = {}
        for key, ins in pending:
            if ins.role == FMA:
                ranks = fma_rank.setdefault(ins.subblock, {})
                ranks[ins.vid] = len(ranks)
        hoists_left = hoist_budget
        pending = list(pending)
        while pending:
            choice = None
            stall_pick = None  # dep-ok and pressure-ok, just not latency-ready
            forced_pick = None  # dep-ok but over the register budget
            for idx, (key, ins) in enumerate(pending):
                if not deps_emitted(ins):
                    continue
                if ins.role == FMA:
                    rank = fma_rank[ins.subblock][ins.vid]
                    if emitted_fmas.get(ins.subblock, 0) != rank:
                        continue  # keep each sub-block's fmas in column order
                if ins.pp >= p.k_u and ins.dest \
                        and reads_left.get(ins.dest, 0) > 0:
                    continue  # redefines a register still carrying live data
                if ins.vid in hoisted_vids and hoists_left is not None \
                        and hoists_left <= 0 and len(pending) > 1:
                    if forced_pick is None:
                        forced_pick = idx
                    continue  # no register headroom for early next-trip loads
                net = 1
                if ins.role == SHUFFLE and ins.srcs \
                        and reads_left.get(ins.srcs[0], 0) == 1:
                    net = 0  # last reader: the shuffle can run in place
                if ins.role in (ALOAD, BLOAD, SHUFFLE) and ins.dest \
                        and len(live_set) + net > pool \
                        and not _needed_now(ins, pending, idx) and len(pending) > 1:
                    if forced_pick is None:
                        forced_pick = idx
                    continue  # defer under register pressure
                if ins.role == FMA and len(live_set) >= pool \
                        and machine.instr(ins.mnemonic).needs_temp \
                        and (len(ins.srcs) < 2
                             or reads_left.get(ins.srcs[1], 0) != 1) \
                        and len(pending) > 1:
                    if forced_pick is None:
                        forced_pick = idx
                    continue  # no register left for the multiply temporary
                if stall_pick is None:
                    stall_pick = idx
                if ready(ins):
                    choice = idx
                    break
            if choice is None:
                # prefer stalling on a latency gap over overflowing registers
                choice = stall_pick if stall_pick is not None else forced_pick
                if choice is None:
                    raise ScheduleError("cyclic dependencies in section")
            key, ins = pending.pop(choice)
            if ins.role == FMA:
                emitted_fmas[ins.subblock] = emitted_fmas.get(ins.subblock, 0) + 1
            if ins.vid in hoisted_vids and hoists_left is not None:
                hoists_left -= 1
            emit_fn(ins)
            account(ins)

    def make_emit(live_set, record: bool):
        def emit_fn(ins: VirtualInstr):
            if record:
                body.append(ins)
                if ins.dest and not ins.dest.startswith("acc"):
                    pos_of[ins.dest] = len(body) - 1
                    producer[ins.dest] = ins
            if ins.dest and not ins.dest.startswith("acc"):
                live_set.add(ins.dest)
            for s in ins.srcs:
                if s.startswith("acc"):
                    continue
                if record:
                    remaining_reads[s] -= 1
                    if remaining_reads[s] == 0:
                        live_set.discard(s)
                else:
                    if s not in _dry_reads or _dry_reads[s] == 1:
                        live_set.discard(s)
                        _dry_reads.pop(s, None)
                    else:
                        _dry_reads[s] -= 1
        return emit_fn

    for pp in range(p.k_u):
        pending = sorted(pending_by_section[pp], key=lambda kv: kv[0])
        # dry pass without the hoisted loads measures this section's own
        # register need; the leftover headroom is the hoisting budget
        flow = [(k, i) for k, i in pending if i.vid not in hoisted_vids]
        _dry_reads = {}
        for _, ins in flow:
            for s in ins.srcs:
                if not s.startswith("acc"):
                    _dry_reads[s] = _dry_reads.get(s, 0) + 1
        dry_live = set(live)
        dry_peak = len(dry_live)
        saved_pos, saved_prod = dict(pos_of), dict(producer)

        def dry_emit(ins, _emit=make_emit(dry_live, record=False)):
            nonlocal dry_peak
            if ins.dest and not ins.dest.startswith("acc"):
                pos_of[ins.dest] = 10 ** 9  # mark emitted for dep checks
            _emit(ins)
            dry_peak = max(dry_peak, len(dry_live))

        run_section(flow, dry_live, dry_emit, reads_left=_dry_reads)
        pos_of.clear()
        pos_of.update(saved_pos)
        producer.clear()
        producer.update(saved_prod)

        budget = max(0, pool - dry_peak)
        run_section(pending, live, make_emit(live, record=True),
                    hoist_budget=budget)

    return preload, body


def _needed_now(ins: VirtualInstr, pending, idx) -> bool:
    """True when a consumer of ins.dest is the next in-order fma."""
    for key, other in pending[:idx]:
        if other.role == FMA and ins.dest in other.srcs:
            return True
    return bool(pending) and bool(pending[0][1].srcs) \
        and ins.dest in pending[0][1].srcs


# ---------------------------------------------------------------------------
# Register allocation


def regalloc(preload: list[VirtualInstr], body: list[VirtualInstr],
             plan: KernelPlan) -> Schedule:
    """Map virtual registers onto architectural ids, zero spills.

    Accumulators are pinned to the top of the register file; working values
    get the lowest free low-ordered register over their (possibly
    wrap-around) live range in the loop body.
    """
    machine = plan.machine
    p = plan.params
    r_total = plan.budget.r_total
    r_acc = plan.budget.r_acc
    acc_regs = {i: r_total - r_acc + i for i in range(r_acc)}
    n = len(body)
    needs_temp = not machine.fma_is_fused

    defs: dict[str, list[int]] = {}
    uses: dict[str, list[int]] = {}
    for pos, ins in enumerate(body):
        if ins.dest and not ins.dest.startswith("acc"):
            defs.setdefault(ins.dest, []).append(pos)
        for s in ins.srcs:
            if not s.startswith("acc"):
                uses.setdefault(s, []).append(pos)

    carried = {i.dest for i in preload}
    segments: dict[str, list[tuple[int, int]]] = {}
    for name in sorted(set(defs) | set(uses)):
        d = defs.get(name, [])
        u = uses.get(name, [])
        if name in carried:
            head_end = max([x for x in u if not d or x < min(d)] or [0])
            tail_start = min(d) if d else n - 1
            segments[name] = [(0, head_end), (tail_start, n - 1)]
        else:
            if not d:
                raise ScheduleError(f"register {name} read but never written")
            segments[name] = [(min(d), max(u + d))]

    n_low = r_total - r_acc
    occupied: list[set[int]] = [set() for _ in range(n_low)]

    def fits(reg: int, segs) -> bool:
        for a, b in segs:
            if occupied[reg].intersection(range(a, b + 1)):
                return False
        return True

    def take(reg: int, segs):
        for a, b in segs:
            occupied[reg].update(range(a, b + 1))

    # a shuffle that is the last reader of its source may overwrite it
    inplace_pref: dict[str, str] = {}
    for pos, ins in enumerate(body):
        if ins.role == SHUFFLE and ins.dest and len(ins.srcs) == 1:
            src = ins.srcs[0]
            if src in segments and max(e for _, e in segments[src]) == pos:
                inplace_pref[ins.dest] = src

    assignment: dict[str, int] = {}
    order = sorted(segments, key=lambda nm: (nm not in carried,
                                             segments[nm][0][0], nm))
    for name in order:
        segs = segments[name]
        reg = None
        src = inplace_pref.get(name)
        if src in assignment:
            cand = assignment[src]
            d, e = segs[0]
            rest = ([(d + 1, e)] if e > d else []) + list(segs[1:])
            if fits(cand, rest):
                reg = cand
        if reg is None:
            reg = next((r for r in range(n_low) if fits(r, segs)), None)
        if reg is None:
            raise AllocationFailure(
                f"{machine.name}: working set exceeds {n_low} low registers "
                f"at depth {plan.depth} (register {name})")
        assignment[name] = reg
        take(reg, segs)

    temps: dict[int, int] = {}
    if needs_temp:
        for pos, ins in enumerate(body):
            if ins.role == FMA and machine.instr(ins.mnemonic).needs_temp:
                reg = next((r for r in range(n_low)
                            if pos not in occupied[r]), None)
                if reg is None and len(ins.srcs) >= 2:
                    # destructive multiply into the b operand when its live
                    # range ends here (the a operand must stay intact)
                    s = ins.srcs[1]
                    if not s.startswith("acc") and s in assignment \
                            and max(e for _, e in segments[s]) == pos:
                        reg = assignment[s]
                if reg is None:
                    raise AllocationFailure(
                        f"{machine.name}: no scratch register for the multiply "
                        f"temporary at position {pos}")
                temps[pos] = reg

    def regmap(ins: VirtualInstr) -> dict:
        out = {}
        names = list(ins.srcs) + ([ins.dest] if ins.dest else [])
        for nm in names:
            if nm.startswith("acc"):
                out[nm] = acc_regs[int(nm[3:])]
            else:
                out[nm] = assignment[nm]
        return out

    zero = machine.zero_instr()
    zero_ops = [
        ScheduledOp(
            instr=VirtualInstr(vid=-1000 - i, mnemonic=zero.mnemonic, role=ZERO,
                               dest=f"acc{i}", srcs=(), acc=i),
            regs={f"acc{i}": acc_regs[i]})
        for i in range(r_acc)
    ]
    preload_ops = [ScheduledOp(instr=i, regs=regmap(i)) for i in preload]
    body_ops = [ScheduledOp(instr=ins, regs=regmap(ins), temp=temps.get(pos))
                for pos, ins in enumerate(body)]

    peak = 0
    for pos in range(n):
        live_here = sum(1 for r in range(n_low) if pos in occupied[r])
        if pos in temps and pos not in occupied[temps[pos]]:
            live_here += 1  # temp in an otherwise-free register
        peak = max(peak, live_here)
    if peak + r_acc > r_total:
        raise AllocationFailure(f"live registers {peak + r_acc} exceed {r_total}")

    return Schedule(
        machine_name=machine.name,
        k_u=p.k_u,
        depth=plan.depth,
        zero_ops=zero_ops,
        preload_ops=preload_ops,
        body=body_ops,
        acc_regs=acc_regs,
        live_peak=peak + r_acc,
        bias_bytes=128,
    )


def dependency_stalls(schedule: Schedule, machine: MachineDesc) -> dict:
    """Per-port stall budget for the waiting-time refinement W' = L + n*k.

    Counts true-dependency edges between jobs queued on the same port whose
    separation in that queue is smaller than the producer's latency: those
    are the consumers the port must idle for. Latency-hidden schedules
    return an empty dict, which is the unadjusted model.
    """
    per_port_jobs: dict[str, list[tuple[str, tuple[str, ...], int]]] = {}
    for op in schedule.body:
        ins = op.instr
        desc = machine.instr(ins.mnemonic)
        srcs = tuple(s for s in ins.srcs if not s.startswith("acc"))
        for part in desc.parts:
            for alts in part.ports.alternatives():
                port = alts[0]  # alternatives share the queue-position count
                per_port_jobs.setdefault(port, []).append(
                    (ins.dest, srcs, desc.latency))
    stalls: dict[str, tuple[int, int]] = {}
    for port, jobs in per_port_jobs.items():
        produced_at: dict[str, tuple[int, int]] = {}
        n, k = 0, 0
        for pos, (dest, srcs, latency) in enumerate(jobs):
            for src in srcs:
                if src in produced_at:
                    ppos, plat = produced_at[src]
                    if pos - ppos < plat:
                        n += 1
                        k = max(k, plat)
            if dest:
                produced_at[dest] = (pos, latency)
        if n:
            stalls[port] = (n, k)
    return stalls


def build_schedule(plan: KernelPlan, depth: Optional[int] = None) -> Schedule:
    """expand -> cse -> pipeline -> regalloc, then fill in issue slots."""
    if depth is not None:
        plan = replace(plan, depth=depth)
    stream = cse(expand(plan))
    preload, body = pipeline(stream, plan)
    sched = regalloc(preload, body, plan)
    from .vsim import fill_slots
    fill_slots(sched, plan.machine)
    return sched
