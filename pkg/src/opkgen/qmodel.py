"""Queueing-model throughput estimation.

Each execution port is a queue served at a fixed rate; the instructions of
one outer-product iteration are jobs. A job whose port expression names
alternatives (`p2 | p3`) is split fractionally so the most-utilized port is
as lightly loaded as possible (water-filling). The iteration throughput is
the inverse of the drain time of the slowest port:

    lambda = min over ports of (port throughput / assigned jobs)

All arithmetic is exact (fractions), so per-port counts and throughputs
come out as exact rationals rather than float approximations.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from typing import Optional

from .machine import MachineDesc
from .tiling import InstructionMix, Tiling


class ModelError(ValueError):
    pass


class UnknownMnemonic(ModelError):
    pass


@dataclass(frozen=True)
class PortLoads:
    """Jobs per port for one iteration, after water-filling."""

    loads: dict  # port name -> Fraction
    group_loads: dict  # alternatives tuple -> total jobs routed to the group

    def load(self, port: str) -> Fraction:
        return self.loads.get(port, Fraction(0))


@dataclass(frozen=True)
class ThroughputEstimate:
    lambda_outer: Fraction  # outer products per cycle
    bottleneck_port: str
    flop_per_cycle: Fraction
    gflops: Fraction
    port_loads: PortLoads


def _gather_jobs(mix: InstructionMix, machine: MachineDesc):
    """Yield (alternatives tuple, count) for every port job in the mix."""
    known = {i.mnemonic for i in machine.instructions}
    for mnemonic, count in sorted(mix.counts.items()):
        if mnemonic not in known:
            raise UnknownMnemonic(mnemonic)
        for part in machine.instr(mnemonic).parts:
            for alts in part.ports.alternatives():
                yield alts, Fraction(count)


def assign_ports(mix: InstructionMix, machine: MachineDesc) -> PortLoads:
    """Assign every job of the mix to ports.

    Single-port jobs are fixed. Jobs with alternatives are split to minimize
    the maximum of load/throughput across their ports; equal-throughput,
    equally-loaded alternatives split evenly.
    """
    rate = {p.name: p.throughput for p in machine.ports}
    fixed: dict[str, Fraction] = {p.name: Fraction(0) for p in machine.ports}
    groups: dict[tuple[str, ...], Fraction] = {}
    group_totals: dict[tuple[str, ...], Fraction] = {}
    for alts, count in _gather_jobs(mix, machine):
        group_totals[alts] = group_totals.get(alts, Fraction(0)) + count
        if len(alts) == 1:
            fixed[alts[0]] += count
        else:
            groups[alts] = groups.get(alts, Fraction(0)) + count

    loads = dict(fixed)

    def fill(alts: tuple[str, ...], amount: Fraction):
        # water-filling one group: raise the lowest load/rate levels first
        remaining = amount
        while remaining > 0:
            levels = {p: loads[p] / rate[p] for p in alts}
            low = min(levels.values())
            at_low = [p for p in alts if levels[p] == low]
            higher = [levels[p] for p in alts if levels[p] > low]
            cap = min(higher) if higher else None
            room = sum(rate[p] for p in at_low)
            if cap is None:
                for p in at_low:
                    loads[p] += remaining * rate[p] / room
                return
            step = min(remaining, (cap - low) * room)
            for p in at_low:
                loads[p] += step * rate[p] / room
            remaining -= step

    for alts in sorted(groups):
        fill(alts, groups[alts])

    # exact optimum check: the best achievable bottleneck utilization is
    # max over port subsets S of (fixed(S) + jobs of groups confined to S)
    # divided by the capacity of S
    ports = [p.name for p in machine.ports]
    best = Fraction(0)
    for r in range(1, len(ports) + 1):
        for sub in combinations(ports, r):
            s = set(sub)
            demand = sum(fixed[p] for p in sub)
            demand += sum(c for alts, c in groups.items() if set(alts) <= s)
            cap = sum(rate[p] for p in sub)
            if demand > 0:
                best = max(best, Fraction(demand, 1) / cap)
    got = max((loads[p] / rate[p] for p in ports if loads[p] > 0), default=Fraction(0))
    if got != best:
        raise ModelError(
            f"water-filling did not reach the optimal bottleneck "
            f"({got} vs {best}); overlapping alternative groups?")

    return PortLoads(loads={p: loads[p] for p in ports if loads[p] > 0},
                     group_loads=group_totals)


def little_throughput(pl: PortLoads, machine: MachineDesc) -> Fraction:
    """Iteration throughput: min over loaded ports of throughput/jobs."""
    if not pl.loads:
        raise ModelError("empty port loads")
    best: Optional[Fraction] = None
    for p in machine.ports:
        load = pl.loads.get(p.name)
        if not load:
            continue
        lam = p.throughput / load
        if best is None or lam < best:
            best = lam
    return best


def bottleneck_port(pl: PortLoads, machine: MachineDesc) -> str:
    lam = little_throughput(pl, machine)
    for p in machine.ports:
        load = pl.loads.get(p.name)
        if load and p.throughput / load == lam:
            return p.name
    raise ModelError("no bottleneck port")


def stall_adjust(drain: Fraction, n_dependent: int, latency: int) -> Fraction:
    """Waiting time of a pipeline whose jobs form a dependency chain.

    With n dependent instructions of latency k queued behind each other the
    drain time grows from L to L + n*k; the port's effective throughput
    scales by L / (L + n*k).
    """
    if n_dependent < 0:
        raise ModelError("n_dependent must be >= 0")
    return drain + n_dependent * latency


def flops_and_gflops(lambda_outer: Fraction, m_r: int, n_r: int,
                     frequency_ghz: Fraction) -> tuple[Fraction, Fraction]:
    """Per-cycle and absolute flop rates for an m_r x n_r outer product."""
    flop_cyc = lambda_outer * m_r * n_r * 2
    return flop_cyc, frequency_ghz * flop_cyc


def estimate(mix: InstructionMix, machine: MachineDesc, m_r: int,
             n_r: int) -> ThroughputEstimate:
    pl = assign_ports(mix, machine)
    lam = little_throughput(pl, machine)
    flop_cyc, gflops = flops_and_gflops(lam, m_r, n_r, machine.frequency_ghz)
    return ThroughputEstimate(
        lambda_outer=lam,
        bottleneck_port=bottleneck_port(pl, machine),
        flop_per_cycle=flop_cyc,
        gflops=gflops,
        port_loads=pl,
    )


def rank_mixes(candidates: list[tuple[Tiling, InstructionMix, ThroughputEstimate]]):
    """Order candidates best-first: highest throughput, then fewer total
    instructions, then fewer standalone shuffles, then tiling signature."""
    dims = {(t.m_r, t.n_r) for t, _, _ in candidates}
    if len(dims) > 1:
        raise ModelError(f"cannot rank mixes across kernel sizes {sorted(dims)}")

    def shuffle_jobs(t: Tiling, mix: InstructionMix) -> int:
        total = 0
        for _, upd in t.segments():
            total += len(upd.standalone_shuffles())
        return total

    return sorted(
        candidates,
        key=lambda c: (-c[2].lambda_outer, c[1].total(), shuffle_jobs(c[0], c[1]),
                       c[0].signature()),
    )
