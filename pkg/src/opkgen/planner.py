"""Kernel planning: pick an instruction mix, budget registers, choose the
register sub-blocking, and capture the per-index instruction dispatch
(embedding functions) that later stages expand into straight-line code.

The accumulator block stays resident for the whole k loop, so the number of
unit updates that can be in flight without spilling is

    N_updates = floor((R_total - m_r*n_r/v - R_A) / R_R)

with R_A registers holding the A column and R_R the registers a unit update
consumes (2 without a fused multiply-add: the arrangement and the multiply
temporary; 1 with). The sub-block dimensions are chosen so that
m_s * n_s <= N_updates * v.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

from .machine import MachineDesc, ShufflePattern, resolve_machine
from .qmodel import estimate, rank_mixes
from .tiling import InstructionMix, NoTiling, Tiling, enumerate_tilings, instruction_mix
from .updates import (
    Arrangement,
    FmaStep,
    NoCoverage,
    ShuffleStep,
    UnitUpdate,
    enumerate_nu_choices,
    permutation_tree,
    search_unit_updates,
)


class PlanError(ValueError):
    pass


class InsufficientRegisters(PlanError):
    pass


@dataclass(frozen=True)
class RegisterBudget:
    r_total: int
    r_acc: int  # accumulator block, m_r*n_r/v registers
    r_a: int  # registers holding the A column
    r_r: int  # new registers per in-flight unit update
    n_updates: int


def register_budget(machine: MachineDesc, m_r: int, n_r: int) -> RegisterBudget:
    v = machine.vector_width
    if m_r % v or m_r <= 0 or n_r <= 0:
        raise NoTiling(f"m_r={m_r} must be a positive multiple of the vector "
                       f"width {v} (n_r={n_r} must be positive)")
    r_acc = m_r * n_r // v
    r_a = math.ceil(m_r / v)
    r_r = 1 if machine.fma_is_fused else 2
    free = machine.num_registers - r_acc - r_a
    if free <= 0:
        raise InsufficientRegisters(
            f"{machine.name}: {r_acc} accumulators + {r_a} A registers exceed "
            f"{machine.num_registers} registers for a {m_r}x{n_r} block")
    n_upd = free // r_r
    if n_upd < 1:
        raise InsufficientRegisters(
            f"{machine.name}: no registers left for unit updates at {m_r}x{n_r}")
    return RegisterBudget(r_total=machine.num_registers, r_acc=r_acc, r_a=r_a,
                          r_r=r_r, n_updates=n_upd)


def choose_subblock(m_r: int, n_r: int, n_updates: int, v: int) -> tuple[int, int]:
    """Largest register sub-block within the budget.

    m_s is pinned to one vector of rows (every shipped kernel does this; the
    A column then needs exactly one live register per sub-block) and n_s is
    the largest divisor of n_r keeping m_s * n_s <= N_updates * v.
    """
    m_s = v
    best = 1
    for n_s in range(1, n_r + 1):
        if n_r % n_s == 0 and m_s * n_s <= n_updates * v:
            best = n_s
    return m_s, best


def subblock_violation(m_s: int, n_s: int, n_updates: int, v: int) -> Optional[str]:
    if m_s * n_s > n_updates * v:
        return (f"sub-block {m_s}x{n_s} holds {m_s * n_s} elements, above the "
                f"register bound N_updates*v = {n_updates * v}")
    return None


@dataclass(frozen=True)
class KernelParams:
    m_r: int
    n_r: int
    m_s: int
    n_s: int
    k_u: int
    k_c: int

    def __post_init__(self):
        if self.m_r % self.m_s:
            raise PlanError(f"m_s={self.m_s} must divide m_r={self.m_r}")
        if self.k_c % self.k_u:
            raise PlanError(f"k_u={self.k_u} must divide k_c={self.k_c}")


@dataclass(frozen=True)
class LoopNest:
    """Loop skeleton: zero phase, the blocked compute nest, write-back."""

    trip_counts: tuple[int, ...]  # (k_c/k_u, m_r/m_s, n_r/n_s, m_s, n_s)
    unroll: int
    pipelined: bool
    zero_count: int
    writeback_count: int


def build_skeleton(params: KernelParams, v: int) -> LoopNest:
    p = params
    return LoopNest(
        trip_counts=(p.k_c // p.k_u, p.m_r // p.m_s, p.n_r // p.n_s, p.m_s, p.n_s),
        unroll=p.k_u,
        pipelined=p.k_u > 1,
        zero_count=p.m_r * p.n_r // v,
        writeback_count=p.m_r * p.n_r // v,
    )


@dataclass(frozen=True)
class Emission:
    """One virtual instruction requested by an embedding function."""

    role: str  # aload | bload | shuffle | fma | prefetch
    mnemonic: str
    row_block: int  # ii // v
    seg_col: int  # segment anchor column
    step: int  # arrangement index within the segment (loads/shuffles/fmas)
    parent_step: int = -1  # shuffle parent / fma source arrangement
    acc: int = -1  # accumulator slot for fmas
    broadcast_col: int = -1  # absolute column for per-row-block broadcasts


class EmbeddingSet:
    """Total maps from loop indices to at most one instruction each.

    get_a_element emits the A column load at the first column of the first
    sub-block column; get_b_element dispatches the segment's load/shuffle
    chain keyed by the column's position inside its segment; fma emits one
    multiply-accumulate per vector of rows.
    """

    def __init__(self, plan: "KernelPlan"):
        self.plan = plan
        self.v = plan.vector_width
        self._seg_of: dict[int, tuple[int, UnitUpdate]] = {}
        for col, upd in plan.segments:
            for jj in range(col, col + upd.n_u):
                self._seg_of[jj] = (col, upd)

    def segment_at(self, jj: int) -> tuple[int, UnitUpdate]:
        return self._seg_of[jj]

    def get_a_element(self, ii: int, jj: int) -> Optional[Emission]:
        if jj == 0 and ii % self.v == 0:
            return Emission(role="aload",
                            mnemonic=self.plan.machine.vector_load().mnemonic,
                            row_block=ii // self.v, seg_col=0, step=0)
        return None

    def get_b_element(self, ii: int, jj: int) -> Optional[Emission]:
        col, upd = self.segment_at(jj)
        s = jj - col
        rb = ii // self.v
        if upd.n_u == 1:
            # broadcast: reloaded for every vector of rows
            if ii % self.v == 0 and not upd.load_fused_compute:
                return Emission(role="bload", mnemonic=upd.b_load, row_block=rb,
                                seg_col=col, step=0, broadcast_col=jj)
            return None
        if ii != 0:
            return None  # arrangements are shared by all row blocks
        if s == 0:
            return Emission(role="bload", mnemonic=upd.b_load, row_block=0,
                            seg_col=col, step=0)
        step = next(st for st in upd.shuffle_steps if st.result == s)
        if step.fused:
            return None  # realized inside the consuming multiply-accumulate
        return Emission(role="shuffle", mnemonic=step.mnemonic, row_block=0,
                        seg_col=col, step=s, parent_step=step.parent)

    def fma(self, ii: int, jj: int) -> Optional[Emission]:
        if ii % self.v:
            return None
        col, upd = self.segment_at(jj)
        s = jj - col
        rb = ii // self.v
        fstep = upd.fma_steps[s]
        return Emission(role="fma", mnemonic=fstep.mnemonic, row_block=rb,
                        seg_col=col, step=s, parent_step=fstep.src_arrangement,
                        acc=self.plan.acc_index(rb, col + s),
                        broadcast_col=col + s if upd.n_u == 1 else -1)


@dataclass(frozen=True)
class KernelPlan:
    machine: MachineDesc
    params: KernelParams
    segments: tuple[tuple[int, UnitUpdate], ...]
    prefetches: int
    depth: int  # software-pipeline overlap of consecutive iterations
    subblock_pinned: bool
    subblock_issue: Optional[str]
    column_splits: tuple[int, ...]  # sub-block column widths, left to right
    budget: RegisterBudget

    @property
    def vector_width(self) -> int:
        return self.machine.vector_width

    def tiling(self) -> Tiling:
        from .tiling import Cell
        cells = []
        for col, upd in self.segments:
            for row in range(0, self.params.m_r, self.vector_width):
                cells.append(Cell(row=row, col=col, update=upd))
        return Tiling(m_r=self.params.m_r, n_r=self.params.n_r, cells=tuple(cells))

    def mix(self) -> InstructionMix:
        return instruction_mix(self.tiling(), self.machine, self.prefetches)

    def acc_index(self, row_block: int, col: int) -> int:
        return row_block * self.params.n_r + col

    def writeback(self) -> list[tuple[int, int, int, int]]:
        """(acc slot, lane, C row, C col) for the final accumulate phase."""
        out = []
        v = self.vector_width
        for col, upd in self.segments:
            for rb in range(self.params.m_r // v):
                for s, fstep in enumerate(upd.fma_steps):
                    arr = upd.arrangements[fstep.arrangement]
                    acc = self.acc_index(rb, col + s)
                    for lane in range(v):
                        out.append((acc, lane, rb * v + lane, col + arr.lanes[lane]))
        return sorted(out)

    def subblocks(self) -> list[tuple[int, int, int, int]]:
        """(row, col, m_s, width) in schedule order: column splits outer."""
        out = []
        col = 0
        for width in self.column_splits:
            for row in range(0, self.params.m_r, self.params.m_s):
                out.append((row, col, self.params.m_s, width))
            col += width
        return out

    def embeddings(self) -> EmbeddingSet:
        return EmbeddingSet(self)


def _parse_mix_selector(selector: str, tilings, machine, m_r, n_r, prefetches):
    ranked = rank_mixes([
        (t, instruction_mix(t, machine, prefetches),
         estimate(instruction_mix(t, machine, prefetches), machine, m_r, n_r))
        for t in tilings
    ])
    if selector == "auto":
        return ranked[0]
    if selector == "broadcast":
        match = [c for c in ranked if all(u.n_u == 1 for _, u in c[0].segments())]
    elif selector in ("shuffle", "permute"):
        match = [c for c in ranked if all(u.n_u > 1 for _, u in c[0].segments())]
    else:
        match = [c for c in ranked if c[0].signature() == selector]
    if not match:
        have = ", ".join(c[0].signature() for c in ranked)
        raise PlanError(f"no tiling matches mix {selector!r} (have: {have})")
    return match[0]


def _materialized_peak(upd: UnitUpdate) -> int:
    """Most arrangement registers live at once, consuming in index order.

    A shuffle whose parent has no later readers overwrites it in place;
    fold-away swizzles never occupy a register of their own.
    """
    created_by = {s.result: s for s in upd.shuffle_steps}
    last_read: dict[int, int] = {}
    for f in upd.fma_steps:
        last_read[f.src_arrangement] = max(
            last_read.get(f.src_arrangement, 0), f.arrangement)
    for s in upd.shuffle_steps:
        last_read[s.parent] = max(last_read.get(s.parent, 0), s.result)
    live = {0}
    peak = 1
    for pos in range(1, upd.n_u):
        step = created_by.get(pos)
        if step is not None and not step.fused:
            if last_read.get(step.parent) == pos:
                live.discard(step.parent)
            live.add(pos)
            peak = max(peak, len(live))
        live = {a for a in live if last_read.get(a, -1) > pos}
    return peak


def _variant_for_budget(machine: MachineDesc, upd: UnitUpdate,
                        n_updates: int) -> UnitUpdate:
    if upd.n_u == 1:
        return upd
    if n_updates >= 2:
        return permutation_tree(upd, machine)
    ranked = sorted(
        (c for c in search_unit_updates(machine, upd.n_u)
         if c.b_load == upd.b_load),
        key=_materialized_peak)
    return ranked[0] if ranked else upd


def available_updates(machine: MachineDesc) -> list[UnitUpdate]:
    ups = []
    for n_u in sorted(enumerate_nu_choices(machine.vector_width, machine)):
        try:
            found = search_unit_updates(machine, n_u)
        except NoCoverage:
            continue
        ups.extend(found)
    return ups


def make_plan(machine: MachineDesc, m_r: int, n_r: int, mix: str = "auto",
              k_c: Optional[int] = None, k_u: int = 4, depth: int = 2,
              non_uniform: bool = False) -> KernelPlan:
    """Select a tiling and fix every parameter needed to build the kernel."""
    budget = register_budget(machine, m_r, n_r)
    tilings = enumerate_tilings(m_r, n_r, available_updates(machine))
    prefetches = int(machine.meta.get("prefetches", 0))
    tiling, _, _ = _parse_mix_selector(mix, tilings, machine, m_r, n_r, prefetches)

    meta = machine.meta
    pinned = (bool(meta.get("pinned_subblock"))
              and meta.get("mr") == m_r and meta.get("nr") == n_r)
    if pinned:
        m_s, n_s = int(meta["ms"]), int(meta["ns"])
    else:
        m_s, n_s = choose_subblock(m_r, n_r, budget.n_updates, machine.vector_width)
    issue = subblock_violation(m_s, n_s, budget.n_updates, machine.vector_width)
    if issue and not pinned:
        raise PlanError(issue)

    if k_c is None:
        k_c = int(meta.get("kc", 256))
    params = KernelParams(m_r=m_r, n_r=n_r, m_s=m_s, n_s=n_s, k_u=k_u, k_c=k_c)
    if not non_uniform and n_r % n_s:
        raise PlanError(f"n_s={n_s} must divide n_r={n_r}")

    if non_uniform:
        # experiment variant: skew the first two column splits (n_s+1, n_s-1)
        if n_s < 2:
            raise PlanError("a non-uniform split needs n_s >= 2")
        splits = [n_s + 1, n_s - 1]
        rest = n_r - sum(splits)
        if rest < 0 or rest % n_s:
            raise PlanError(f"no non-uniform split of {n_r} columns around n_s={n_s}")
        column_splits = tuple(splits + [n_s] * (rest // n_s))
    else:
        column_splits = tuple([n_s] * (n_r // n_s))

    # restructure each segment's shuffle sequence for the register budget:
    # with two or more updates in flight the depth-minimized tree removes
    # false dependencies; with a single one only the sequential chain fits
    # (each shuffle overwrites its dying source)
    segments = tuple(
        (col, _variant_for_budget(machine, upd, budget.n_updates))
        for col, upd in tiling.segments())

    return KernelPlan(
        machine=machine,
        params=params,
        segments=segments,
        prefetches=prefetches,
        depth=depth,
        subblock_pinned=pinned,
        subblock_issue=issue,
        column_splits=column_splits,
        budget=budget,
    )


# ---------------------------------------------------------------------------
# Plan document (self-contained JSON)


def _update_doc(u: UnitUpdate) -> dict:
    return {
        "m_v": u.m_v,
        "n_u": u.n_u,
        "b_load": u.b_load,
        "load_fused_compute": u.load_fused_compute,
        "arrangements": [list(a.lanes) for a in u.arrangements],
        "shuffle_steps": [
            {"pattern": list(s.pattern.src_index), "parent": s.parent,
             "result": s.result, "mnemonic": s.mnemonic}
            for s in u.shuffle_steps
        ],
        "fma_steps": [
            {"arrangement": f.arrangement, "acc_slot": f.acc_slot,
             "mnemonic": f.mnemonic, "src_arrangement": f.src_arrangement}
            for f in u.fma_steps
        ],
    }


def _update_from_doc(d: dict) -> UnitUpdate:
    return UnitUpdate(
        m_v=d["m_v"],
        n_u=d["n_u"],
        b_load=d["b_load"],
        load_fused_compute=d["load_fused_compute"],
        arrangements=tuple(Arrangement(tuple(a)) for a in d["arrangements"]),
        shuffle_steps=tuple(
            ShuffleStep(pattern=ShufflePattern(tuple(s["pattern"])),
                        parent=s["parent"], result=s["result"],
                        mnemonic=s["mnemonic"])
            for s in d["shuffle_steps"]
        ),
        fma_steps=tuple(
            FmaStep(arrangement=f["arrangement"], acc_slot=f["acc_slot"],
                    mnemonic=f["mnemonic"], src_arrangement=f["src_arrangement"])
            for f in d["fma_steps"]
        ),
    )


def plan_to_doc(plan: KernelPlan) -> str:
    from .machine import emit_machine

    p = plan.params
    doc = {
        "machine": plan.machine.name,
        "machine_desc": emit_machine(plan.machine),
        "params": {"mr": p.m_r, "nr": p.n_r, "ms": p.m_s, "ns": p.n_s,
                   "ku": p.k_u, "kc": p.k_c},
        "depth": plan.depth,
        "prefetches": plan.prefetches,
        "column_splits": list(plan.column_splits),
        "subblock_pinned": plan.subblock_pinned,
        "subblock_issue": plan.subblock_issue,
        "segments": [{"col": col, "update": _update_doc(u)}
                     for col, u in plan.segments],
        "budget": {"r_total": plan.budget.r_total, "r_acc": plan.budget.r_acc,
                   "r_a": plan.budget.r_a, "r_r": plan.budget.r_r,
                   "n_updates": plan.budget.n_updates},
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def plan_from_doc(text: str, machine: Optional[MachineDesc] = None) -> KernelPlan:
    try:
        doc = json.loads(text)
        if machine is None:
            # plans are self-contained: prefer the embedded description
            if "machine_desc" in doc:
                from .machine import parse_machine

                machine = parse_machine(doc["machine_desc"])
            else:
                machine = resolve_machine(doc["machine"])
        p = doc["params"]
        params = KernelParams(m_r=p["mr"], n_r=p["nr"], m_s=p["ms"], n_s=p["ns"],
                              k_u=p["ku"], k_c=p["kc"])
        b = doc["budget"]
        return KernelPlan(
            machine=machine,
            params=params,
            segments=tuple((s["col"], _update_from_doc(s["update"]))
                           for s in doc["segments"]),
            prefetches=doc["prefetches"],
            depth=doc["depth"],
            subblock_pinned=doc["subblock_pinned"],
            subblock_issue=doc["subblock_issue"],
            column_splits=tuple(doc["column_splits"]),
            budget=RegisterBudget(r_total=b["r_total"], r_acc=b["r_acc"],
                                  r_a=b["r_a"], r_r=b["r_r"],
                                  n_updates=b["n_updates"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, PlanError):
            raise
        raise PlanError(f"malformed plan document: {e}") from None
