"""Virtual-instruction IR shared by the scheduler, the evaluators and the
emitter.

A body is the text of the unrolled k-loop: k_u sections, each one
outer-product iteration. Memory operands are (panel, element offset)
relative to the current trip base; offsets at section index k_u belong to
the software-pipelined loads for the next trip. Registers are virtual names
until regalloc maps them onto architectural ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional


A_PANEL, B_PANEL = "A", "B"

ALOAD, BLOAD, SHUFFLE, FMA, PREFETCH, ZERO = (
    "aload", "bload", "shuffle", "fma", "prefetch", "zero")


@dataclass(frozen=True)
class VirtualInstr:
    vid: int
    mnemonic: str
    role: str
    dest: Optional[str]
    srcs: tuple[str, ...]
    mem: Optional[tuple[str, int]] = None  # (panel, element offset)
    acc: int = -1
    pp: int = 0  # section; == k_u marks a next-trip hoisted load
    cell: Optional[tuple[int, int]] = None  # (row block, absolute column)
    subblock: int = -1  # canonical index of the consuming sub-block
    remat: bool = False  # duplicate on purpose; exempt from CSE
    swizzle: Optional[tuple[int, ...]] = None  # fused operand swizzle

    def reads(self) -> tuple[str, ...]:
        return self.srcs

    def key(self):
        """Value-numbering key for common-subexpression elimination."""
        return (self.mnemonic, self.role, self.srcs, self.mem, self.swizzle, self.pp)


@dataclass
class ScheduledOp:
    instr: VirtualInstr
    slot: int = -1  # issue cycle of one cold pass, filled by the issue model
    regs: dict = field(default_factory=dict)  # virtual name -> architectural id
    temp: Optional[int] = None  # scratch register for mul+add pairs
    emitted_mnemonic: Optional[str] = None  # after byte-length optimization

    @property
    def mnemonic(self) -> str:
        return self.emitted_mnemonic or self.instr.mnemonic

    def reg_of(self, name: str) -> int:
        return self.regs[name]


@dataclass
class Schedule:
    machine_name: str
    k_u: int
    depth: int
    zero_ops: list  # accumulator clears, before the loop
    preload_ops: list  # prologue panel loads (first trip, section 0)
    body: list  # list[ScheduledOp], the steady-state loop body
    acc_regs: dict = field(default_factory=dict)  # acc slot -> architectural id
    live_peak: int = 0
    bias_bytes: int = 0  # base-pointer bias applied to displacements

    def body_instrs(self) -> list[VirtualInstr]:
        return [op.instr for op in self.body]

    def epilogue_ops(self) -> list:
        """Body variant for the final trip: next-trip hoists dropped."""
        return [op for op in self.body if op.instr.pp < self.k_u]

    def stores(self) -> list:
        return [op for op in self.body if op.instr.role == "store"]
