"""Unit updates: the small v x n_u outer products a machine can realize.

A unit update loads one register's worth of B (n_u unique elements, each
duplicated v/n_u times), derives further lane arrangements via shuffles, and
multiply-accumulates each arrangement against the A column. An update is
valid when, per lane, the arrangements jointly pair every A row with every
B element exactly once.

Arrangements can be materialized by standalone shuffle instructions or, on
machines whose multiply-accumulate can swizzle an operand for free, realized
inside the consuming compute (no standalone instruction, no port job).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .machine import InstrDesc, MachineDesc, ShufflePattern


class UpdateError(ValueError):
    pass


class EmptyRepertoire(UpdateError):
    pass


class NoCoverage(UpdateError):
    pass


@dataclass(frozen=True)
class Arrangement:
    """lanes[i] is the index (0..n_u-1) of the B element sitting in lane i."""

    lanes: tuple[int, ...]

    def __post_init__(self):
        n_u = len(set(self.lanes))
        v = len(self.lanes)
        for x in self.lanes:
            if self.lanes.count(x) != v // n_u:
                raise UpdateError(f"uneven duplication in arrangement {self.lanes}")


@dataclass(frozen=True)
class ShuffleStep:
    """Derives arrangement `result` from arrangement `parent`.

    mnemonic is None when the pattern is folded into the consuming compute
    (register-swizzle multiply-add); such arrangements are never parents.
    """

    pattern: ShufflePattern
    parent: int
    result: int
    mnemonic: Optional[str]

    @property
    def fused(self) -> bool:
        return self.mnemonic is None


@dataclass(frozen=True)
class FmaStep:
    """Multiply-accumulate of one arrangement into one accumulator slot."""

    arrangement: int
    acc_slot: int
    mnemonic: str
    # register actually read: the arrangement itself, or its parent when fused
    src_arrangement: int


@dataclass(frozen=True)
class UnitUpdate:
    m_v: int
    n_u: int
    b_load: str  # mnemonic; may be a load+fma composite (then load_fused_compute)
    load_fused_compute: bool
    arrangements: tuple[Arrangement, ...]  # index 0 is the loaded one
    shuffle_steps: tuple[ShuffleStep, ...]  # exactly n_u - 1
    fma_steps: tuple[FmaStep, ...]

    @property
    def depth(self) -> int:
        """Longest chain of shuffle steps from the loaded arrangement."""
        d = {0: 0}
        for s in self.shuffle_steps:
            d[s.result] = d[s.parent] + 1
        return max(d.values())

    def standalone_shuffles(self) -> list[ShuffleStep]:
        return [s for s in self.shuffle_steps if not s.fused]

    def pairing(self) -> dict[tuple[int, int], tuple[int, int]]:
        """(fma step index, lane) -> (row, col) of the covered C element."""
        out = {}
        for idx, step in enumerate(self.fma_steps):
            arr = self.arrangements[step.arrangement]
            for lane, col in enumerate(arr.lanes):
                out[(idx, lane)] = (lane, col)
        return out

    def signature(self) -> str:
        shufs = ",".join(s.mnemonic or "~" for s in self.shuffle_steps)
        arrs = ";".join("".join(map(str, a.lanes)) for a in self.arrangements)
        return f"{self.m_v}x{self.n_u}:{self.b_load}:{shufs}:{arrs}"


def loaded_arrangement(v: int, instr: InstrDesc) -> Arrangement:
    """Arrangement produced by a load of u unique elements.

    Each element is duplicated v/u times; the layout is cyclic (lane i holds
    element i mod u) unless the load declares an explicit lane pattern.
    """
    part = instr.load_part
    u = part.unique_elements
    if part.pattern is not None:
        return Arrangement(part.pattern.src_index)
    return Arrangement(tuple(i % u for i in range(v)))


def enumerate_nu_choices(v: int, machine: MachineDesc) -> set[int]:
    """Widths n_u for which a matching load exists (powers of two <= v)."""
    loads = machine.loads()
    if not loads:
        raise EmptyRepertoire(f"{machine.name}: no load instruction")
    out = set()
    for ins in loads:
        u = ins.load_part.unique_elements
        if u <= v:
            out.add(u)
    return out


def coverage_check(u: UnitUpdate) -> Optional[list[str]]:
    """None when the pairing is a bijection onto the m_v x n_u grid."""
    seen: dict[tuple[int, int], int] = {}
    problems = []
    for (step, lane), pair in u.pairing().items():
        if pair in seen:
            problems.append(f"duplicate pair {pair} (steps {seen[pair]} and {step})")
        seen[pair] = step
    for row in range(u.m_v):
        for col in range(u.n_u):
            if (row, col) not in seen:
                problems.append(f"missing pair ({row}, {col})")
    return problems or None


def _build_update(machine: MachineDesc, load: InstrDesc, arrs: list[Arrangement],
                  steps: list[ShuffleStep]) -> UnitUpdate:
    v = machine.vector_width
    fused_compute = load.compute_part is not None
    plain = machine.plain_fma()
    swizzles = {tuple(i.compute_part.pattern.src_index): i for i in machine.swizzle_computes()}
    fused_parents = {s.result: s for s in steps if s.fused}
    fmas = []
    for idx, arr in enumerate(arrs):
        if idx == 0 and fused_compute:
            mnemonic = load.mnemonic  # the load already multiplies and accumulates
            src = idx
        elif idx in fused_parents:
            step = fused_parents[idx]
            mnemonic = swizzles[tuple(step.pattern.src_index)].mnemonic
            src = step.parent
        else:
            mnemonic = plain.mnemonic
            src = idx
        fmas.append(FmaStep(arrangement=idx, acc_slot=idx, mnemonic=mnemonic,
                            src_arrangement=src))
    return UnitUpdate(
        m_v=v,
        n_u=len(arrs),
        b_load=load.mnemonic,
        load_fused_compute=fused_compute,
        arrangements=tuple(arrs),
        shuffle_steps=tuple(steps),
        fma_steps=tuple(fmas),
    )


def search_unit_updates(machine: MachineDesc, n_u: int) -> list[UnitUpdate]:
    """All minimal shuffle sequences realizing a v x n_u unit update.

    Breadth-first search over compositions of the available patterns starting
    from the loaded arrangement. A sequence is minimal when it uses exactly
    n_u - 1 shuffle steps, all arrangements distinct, and per lane the
    arrangements cover every B element exactly once. Results are returned in
    deterministic order (lexicographic by shuffle mnemonics, then by the
    arrangement tuples).
    """
    v = machine.vector_width
    if n_u not in enumerate_nu_choices(v, machine):
        raise UpdateError(f"no load with {n_u} unique elements on {machine.name}")

    loads = [i for i in machine.loads() if i.load_part.unique_elements == n_u]
    # a load fused with a compute cannot feed shuffles: its result is consumed
    # by its own multiply-accumulate, so it only supports n_u == 1
    if n_u > 1:
        loads = [i for i in loads if i.compute_part is None]
        if not loads:
            raise NoCoverage(f"{machine.name}: only fused loads for n_u={n_u}")

    standalone = [(i.mnemonic, i.parts[0].pattern) for i in machine.shuffles()]
    fused = [(None, i.compute_part.pattern) for i in machine.swizzle_computes()]
    moves = sorted(standalone, key=lambda m: m[0]) + sorted(
        fused, key=lambda m: m[1].src_index)

    def covers(arrs: list[Arrangement]) -> bool:
        for lane in range(v):
            if {a.lanes[lane] for a in arrs} != set(range(n_u)):
                return False
        return True

    results: list[UnitUpdate] = []
    seen_signatures = set()
    for load in sorted(loads, key=lambda i: i.mnemonic):
        start = loaded_arrangement(v, load)
        if n_u == 1:
            upd = _build_update(machine, load, [start], [])
            if coverage_check(upd) is None and upd.signature() not in seen_signatures:
                seen_signatures.add(upd.signature())
                results.append(upd)
            continue

        # state: (arrangements so far, steps so far); extend one shuffle at a time
        frontier: list[tuple[list[Arrangement], list[ShuffleStep]]] = [([start], [])]
        for _ in range(n_u - 1):
            if len(frontier) > 200_000:
                raise UpdateError(
                    f"{machine.name}: shuffle search space too large for "
                    f"n_u={n_u}; trim the shuffle repertoire")
            nxt = []
            for arrs, steps in frontier:
                fused_ids = {s.result for s in steps if s.fused}
                for mnemonic, pattern in moves:
                    for parent, parr in enumerate(arrs):
                        if parent in fused_ids:
                            continue  # swizzled values are never materialized
                        cand = Arrangement(pattern.apply(parr.lanes))
                        if any(cand.lanes == a.lanes for a in arrs):
                            continue
                        step = ShuffleStep(pattern=pattern, parent=parent,
                                           result=len(arrs), mnemonic=mnemonic)
                        nxt.append((arrs + [cand], steps + [step]))
            frontier = nxt
        for arrs, steps in frontier:
            if not covers(arrs):
                continue
            upd = _build_update(machine, load, arrs, steps)
            sig = upd.signature()
            if sig in seen_signatures:
                continue
            assert coverage_check(upd) is None
            seen_signatures.add(sig)
            results.append(upd)

    if not results:
        raise NoCoverage(
            f"{machine.name}: no {n_u - 1}-shuffle sequence covers a "
            f"{v}x{n_u} update")

    # cheapest shuffle work first (fold-away swizzles are free); early steps
    # feed the earliest consumers, so prefer cheap and shallow ones up front;
    # the mnemonic/arrangement tuples make the order fully deterministic
    def lat(step: ShuffleStep) -> int:
        return 0 if step.fused else machine.instr(step.mnemonic).latency

    def step_depths(u: UnitUpdate) -> tuple[int, ...]:
        d = {0: 0}
        for s in u.shuffle_steps:
            d[s.result] = d[s.parent] + 1
        return tuple(d[s.result] for s in u.shuffle_steps)

    results.sort(key=lambda u: (sum(lat(s) for s in u.shuffle_steps),
                                len(u.standalone_shuffles()),
                                tuple(lat(s) for s in u.shuffle_steps),
                                step_depths(u),
                                tuple(s.mnemonic or "~" for s in u.shuffle_steps),
                                tuple(a.lanes for a in u.arrangements)))
    return results


def permutation_tree(u: UnitUpdate, machine: MachineDesc) -> UnitUpdate:
    """Restructure the shuffle steps to minimize dependency depth.

    Keeps the same arrangement set; every non-loaded arrangement is re-derived
    from the shallowest producible parent within the set. Falls back to the
    input when no shallower structure exists in the repertoire's closure.
    """
    if len(u.arrangements) <= 2 or u.load_fused_compute:
        return u

    standalone = [(i.mnemonic, i.parts[0].pattern) for i in machine.shuffles()]
    fused = [(None, i.compute_part.pattern) for i in machine.swizzle_computes()]
    moves = sorted(standalone, key=lambda m: m[0]) + sorted(
        fused, key=lambda m: m[1].src_index)

    lanes = [a.lanes for a in u.arrangements]
    n = len(lanes)
    # candidate producers per arrangement: (parent index, mnemonic, pattern)
    producers: dict[int, list[tuple[int, Optional[str], ShufflePattern]]] = {}
    for target in range(1, n):
        cands = []
        for parent in range(n):
            if parent == target:
                continue
            for mnemonic, pattern in moves:
                if pattern.apply(lanes[parent]) == lanes[target]:
                    cands.append((parent, mnemonic, pattern))
        if not cands:
            return u
        producers[target] = cands

    # exhaustive over producer choices (n_u <= 8 keeps this tiny)
    best_depth = u.depth
    best_steps: Optional[list[ShuffleStep]] = None

    def search(idx: int, chosen: dict[int, tuple[int, Optional[str], ShufflePattern]]):
        nonlocal best_depth, best_steps
        if idx == n:
            depth = {0: 0}
            pend = dict(chosen)
            fused_targets = {t for t, (_, mn, _) in chosen.items() if mn is None}
            while pend:
                ready = [t for t, (p, _, _) in pend.items()
                         if p in depth and p not in fused_targets]
                if not ready:
                    return
                for t in ready:
                    depth[t] = depth[pend[t][0]] + 1
                    del pend[t]
            d = max(depth.values())
            if d < best_depth:
                best_depth = d
                order = sorted(chosen, key=lambda t: (depth[t], t))
                best_steps = [
                    ShuffleStep(pattern=chosen[t][2], parent=chosen[t][0],
                                result=t, mnemonic=chosen[t][1])
                    for t in order
                ]
            return
        for cand in producers[idx]:
            chosen[idx] = cand
            search(idx + 1, chosen)
        del chosen[idx]

    search(1, {})
    if best_steps is None:
        return u
    # renumber arrangements into creation order (the steps are already
    # topologically sorted), so downstream dispatch-by-index stays valid;
    # accumulator slots are just register names and follow the new order
    order = [0] + [s.result for s in best_steps]
    new_index = {old: new for new, old in enumerate(order)}
    arrs = [u.arrangements[old] for old in order]
    steps = [
        ShuffleStep(pattern=s.pattern, parent=new_index[s.parent],
                    result=new_index[s.result], mnemonic=s.mnemonic)
        for s in best_steps
    ]
    rebuilt = _build_update(machine, machine.instr(u.b_load), arrs, steps)
    assert {a.lanes for a in rebuilt.arrangements} == {a.lanes for a in u.arrangements}
    assert rebuilt.depth <= u.depth
    return rebuilt
