"""Coverings of the full outer product by unit updates, and their flattened
per-iteration instruction counts.

A tiling partitions the m_r x n_r grid into cells, each an instance of a unit
update. Mixing happens along the n dimension only: the columns are split into
segments, one update shape per segment, applied to every v-row block. For
segments wider than one column the B load and shuffle sequence are computed
once per segment and shared by all row blocks; single-column (broadcast)
segments reload per row block, which keeps live ranges short and matches how
such kernels are written in practice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .machine import MachineDesc
from .updates import UnitUpdate


class TilingError(ValueError):
    pass


class NoTiling(TilingError):
    pass


@dataclass(frozen=True)
class Cell:
    row: int  # top row offset (multiple of v)
    col: int  # left column offset
    update: UnitUpdate


@dataclass(frozen=True)
class Tiling:
    m_r: int
    n_r: int
    cells: tuple[Cell, ...]

    def __post_init__(self):
        covered = set()
        for c in self.cells:
            for i in range(c.update.m_v):
                for j in range(c.update.n_u):
                    key = (c.row + i, c.col + j)
                    if key in covered:
                        raise TilingError(f"cell overlap at {key}")
                    covered.add(key)
        want = {(i, j) for i in range(self.m_r) for j in range(self.n_r)}
        if covered != want:
            raise TilingError("cells do not partition the grid")

    def segments(self) -> list[tuple[int, UnitUpdate]]:
        """Column segments (col offset, update), ordered left to right."""
        segs = {}
        for c in self.cells:
            prev = segs.setdefault(c.col, c.update)
            if prev.signature() != c.update.signature():
                raise TilingError("row blocks of one segment use different updates")
        return sorted(segs.items())

    def composition(self) -> dict[str, int]:
        """Update signature -> number of cells, for display and tie-breaks."""
        out: dict[str, int] = {}
        for c in self.cells:
            key = f"{c.update.m_v}x{c.update.n_u}:{c.update.b_load}"
            out[key] = out.get(key, 0) + 1
        return out

    def signature(self) -> str:
        return "+".join(f"{n}*{k}" for k, n in sorted(self.composition().items()))


@dataclass(frozen=True)
class InstructionMix:
    """Instruction counts for one outer-product iteration."""

    counts: dict = field(default_factory=dict)  # mnemonic -> count

    def total(self) -> int:
        return sum(self.counts.values())


def enumerate_tilings(m_r: int, n_r: int, updates: list[UnitUpdate]) -> list[Tiling]:
    """All coverings of the grid, deduplicated by update-count multiset.

    Column segments are laid out in canonical order (wider updates first), so
    two coverings that differ only by segment permutation collapse into one.
    """
    if not updates:
        raise NoTiling("no unit updates available")
    v = updates[0].m_v
    if m_r % v or m_r < v:
        raise NoTiling(f"m_r={m_r} is not a positive multiple of the vector width {v}")
    if n_r < 1:
        raise NoTiling("n_r must be >= 1")

    # one representative update per distinct width, first in the caller's
    # (search-ranked) order; alternate realizations of the same width have
    # identical counts, so they are interchangeable here
    by_width: dict[int, UnitUpdate] = {}
    for u in updates:
        by_width.setdefault(u.n_u, u)
    widths = sorted(by_width, reverse=True)

    solutions: list[list[tuple[int, int]]] = []  # [(width, count), ...]

    def solve(idx: int, remaining: int, acc: list[tuple[int, int]]):
        if remaining == 0:
            solutions.append(list(acc))
            return
        if idx == len(widths):
            return
        w = widths[idx]
        for count in range(remaining // w, -1, -1):
            acc.append((w, count))
            solve(idx + 1, remaining - w * count, acc)
            acc.pop()

    solve(0, n_r, [])
    if not solutions:
        raise NoTiling(f"no combination of update widths {widths} covers n_r={n_r}")

    tilings = []
    for sol in solutions:
        cells = []
        col = 0
        for w, count in sol:
            for _ in range(count):
                for row in range(0, m_r, v):
                    cells.append(Cell(row=row, col=col, update=by_width[w]))
                col += w
        tilings.append(Tiling(m_r=m_r, n_r=n_r, cells=tuple(cells)))
    # canonical order: most wide-update cells first
    tilings.sort(key=lambda t: t.signature())
    return tilings


def instruction_mix(t: Tiling, machine: MachineDesc, prefetches: int = 0) -> InstructionMix:
    """Flatten a tiling into per-iteration instruction counts.

    Counts the A column loads, every segment's B load / shuffle / compute
    instructions (B arrangement work shared across row blocks for multi-column
    segments, per row block for broadcasts), and the configured prefetches.
    """
    counts: dict[str, int] = {}

    def bump(mnemonic: str, by: int = 1):
        counts[mnemonic] = counts.get(mnemonic, 0) + by

    row_blocks = t.m_r // machine.vector_width
    bump(machine.vector_load().mnemonic, row_blocks)

    for _, update in t.segments():
        b_instances = 1 if update.n_u > 1 else row_blocks
        if not update.load_fused_compute:
            bump(update.b_load, b_instances)
        for s in update.standalone_shuffles():
            bump(s.mnemonic, b_instances)
        for f in update.fma_steps:
            bump(f.mnemonic, row_blocks)

    if prefetches:
        pf = machine.prefetch_instr()
        if pf is None:
            raise TilingError(f"{machine.name} has no prefetch instruction")
        bump(pf.mnemonic, prefetches)
    return InstructionMix(counts=counts)


def uniform_partition(m_r: int, n_r: int, m_s: int, n_s: int) -> list[tuple[int, int]]:
    """Sub-block origins for a uniform m_s x n_s register blocking."""
    if m_r % m_s or n_r % n_s:
        raise TilingError(
            f"non-divisible sub-block {m_s}x{n_s} for a {m_r}x{n_r} outer product")
    return [(i, j) for j in range(0, n_r, n_s) for i in range(0, m_r, m_s)]
