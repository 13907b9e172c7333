"""Machine descriptions: execution ports, registers, and the SIMD repertoire.

A machine is described declaratively in a YAML document (see presets/). The
model cares about five instruction classes: stores, loads (with a number of
unique elements), shuffles (single-source lane permutations), element-wise
computes, and composites built from the simpler classes. Port requirements
are boolean expressions over port names: `&` means all named ports are
occupied, `|` means any one of them suffices.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Iterator, Optional

import yaml


class MachineError(ValueError):
    """Malformed machine description."""


class UnknownPort(MachineError):
    pass


class BadVectorWidth(MachineError):
    pass


class BadShuffle(MachineError):
    pass


class DuplicateMnemonic(MachineError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


# ---------------------------------------------------------------------------
# Ports and port expressions


@dataclass(frozen=True)
class Port:
    name: str
    throughput: Fraction  # jobs retired per cycle

    def __post_init__(self):
        if self.throughput <= 0:
            raise MachineError(f"port {self.name}: throughput must be positive")


@dataclass(frozen=True)
class PortExpr:
    """Tree of port requirements. op is 'leaf', 'all' or 'any'."""

    op: str
    port: Optional[str] = None
    children: tuple["PortExpr", ...] = ()

    def __post_init__(self):
        if self.op == "leaf":
            if not self.port:
                raise MachineError("leaf port expression needs a port name")
        elif self.op in ("all", "any"):
            if len(self.children) < 2:
                raise MachineError(f"'{self.op}' expression needs at least 2 children")
        else:
            raise MachineError(f"bad port expression op {self.op!r}")

    def leaves(self) -> Iterator[str]:
        if self.op == "leaf":
            yield self.port
        else:
            for c in self.children:
                yield from c.leaves()

    def alternatives(self) -> list[tuple[str, ...]]:
        """Flatten to independent jobs, each a tuple of alternative ports.

        An `all` node occupies every operand, so it contributes one job per
        child. An `any` node is a single job that may go to any listed port.
        Nested `any`-of-`all` is not used by any known core and is rejected.
        """
        if self.op == "leaf":
            return [(self.port,)]
        if self.op == "all":
            out: list[tuple[str, ...]] = []
            for c in self.children:
                out.extend(c.alternatives())
            return out
        # any: children must each flatten to a single port
        ports = []
        for c in self.children:
            alts = c.alternatives()
            if len(alts) != 1 or len(alts[0]) != 1:
                raise MachineError("'any' over compound expressions is not supported")
            ports.append(alts[0][0])
        return [tuple(ports)]

    def text(self) -> str:
        if self.op == "leaf":
            return self.port
        sep = " & " if self.op == "all" else " | "
        parts = []
        for c in self.children:
            t = c.text()
            if c.op != "leaf" and c.op != self.op:
                t = f"({t})"
            parts.append(t)
        return sep.join(parts)


_PORT_TOKEN = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*|[&|()])")


def parse_port_expr(text: str) -> PortExpr:
    """Parse `p0 & (p2 | p3)` style expressions. `&` binds tighter than `|`."""
    tokens = []
    pos = 0
    while pos < len(text):
        m = _PORT_TOKEN.match(text, pos)
        if not m:
            if text[pos:].strip():
                raise MachineError(f"bad port expression: {text!r}")
            break
        tokens.append(m.group(1))
        pos = m.end()
    idx = 0

    def peek():
        return tokens[idx] if idx < len(tokens) else None

    def take(tok=None):
        nonlocal idx
        t = peek()
        if t is None or (tok is not None and t != tok):
            raise MachineError(f"bad port expression: {text!r}")
        idx += 1
        return t

    def factor() -> PortExpr:
        t = peek()
        if t == "(":
            take("(")
            e = expr()
            take(")")
            return e
        name = take()
        if name in ("&", "|", ")"):
            raise MachineError(f"bad port expression: {text!r}")
        return PortExpr("leaf", port=name)

    def term() -> PortExpr:
        parts = [factor()]
        while peek() == "&":
            take("&")
            parts.append(factor())
        return parts[0] if len(parts) == 1 else PortExpr("all", children=tuple(parts))

    def expr() -> PortExpr:
        parts = [term()]
        while peek() == "|":
            take("|")
            parts.append(term())
        return parts[0] if len(parts) == 1 else PortExpr("any", children=tuple(parts))

    e = expr()
    if idx != len(tokens):
        raise MachineError(f"bad port expression: {text!r}")
    return e


# ---------------------------------------------------------------------------
# Shuffle patterns


@dataclass(frozen=True)
class ShufflePattern:
    """Lane permutation: output lane i takes input lane src_index[i].

    As a 0/1 matrix this has exactly one 1 per row; the per-column counts
    (fan-out of each input lane) must each be zero or a power of two.
    """

    src_index: tuple[int, ...]

    def apply(self, lanes: tuple) -> tuple:
        return tuple(lanes[s] for s in self.src_index)

    @property
    def width(self) -> int:
        return len(self.src_index)


def validate_shuffle(pattern: ShufflePattern, v: int) -> Optional[str]:
    """Return None if the pattern is legal for width v, else a description."""
    if len(pattern.src_index) != v:
        return f"pattern length {len(pattern.src_index)} != vector width {v}"
    counts = [0] * v
    for i, s in enumerate(pattern.src_index):
        if not 0 <= s < v:
            return f"lane {i} reads out-of-range source {s}"
        counts[s] += 1
    for col, c in enumerate(counts):
        if c != 0 and not _is_pow2(c):
            return f"source lane {col} duplicated {c} times (not a power of two)"
    return None


# ---------------------------------------------------------------------------
# Instructions


LOAD, STORE, SHUFFLE, COMPUTE, PREFETCH = "load", "store", "shuffle", "compute", "prefetch"
COMPUTE_OPS = ("mul", "add", "fma", "zero")


@dataclass(frozen=True)
class OpPart:
    """One constituent of an instruction (a single port job)."""

    kind: str  # load | store | shuffle | compute | prefetch
    ports: PortExpr
    latency: int
    unique_elements: Optional[int] = None  # loads: u distinct elements
    pattern: Optional[ShufflePattern] = None  # shuffles; computes may carry an operand swizzle
    op: Optional[str] = None  # computes: mul | add | fma | zero

    def __post_init__(self):
        if self.kind not in (LOAD, STORE, SHUFFLE, COMPUTE, PREFETCH):
            raise MachineError(f"bad instruction class {self.kind!r}")
        if self.latency < 1:
            raise MachineError("latency must be >= 1")
        if self.kind == LOAD and self.unique_elements is None:
            raise MachineError("load needs unique_elements")
        if self.kind == SHUFFLE and self.pattern is None:
            raise MachineError("shuffle needs a pattern")
        if self.kind == COMPUTE and self.op not in COMPUTE_OPS:
            raise MachineError(f"bad compute op {self.op!r}")


@dataclass(frozen=True)
class InstrDesc:
    """An instruction: one part, or several for composites.

    Composite constituents execute in order; the total latency is the sum of
    the constituent latencies (a non-fused multiply-add is stored as a mul
    part followed by an add part).
    """

    mnemonic: str
    parts: tuple[OpPart, ...]
    encoded_bytes: int = 4
    imm: Optional[int] = None  # immediate operand, kept for emission
    alias: Optional[str] = None  # shorter-encoding mnemonic with identical semantics
    alias_bytes: Optional[int] = None
    needs_temp: bool = False  # mul+add pair needs a scratch register

    def __post_init__(self):
        if not self.parts:
            raise MachineError(f"{self.mnemonic}: instruction needs at least one part")

    @property
    def latency(self) -> int:
        return sum(p.latency for p in self.parts)

    @property
    def is_composite(self) -> bool:
        return len(self.parts) > 1

    def part(self, kind: str) -> Optional[OpPart]:
        for p in self.parts:
            if p.kind == kind:
                return p
        return None

    @property
    def load_part(self) -> Optional[OpPart]:
        return self.part(LOAD)

    @property
    def compute_part(self) -> Optional[OpPart]:
        return self.part(COMPUTE)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(p.kind for p in self.parts)


def job_decomposition(instr: InstrDesc) -> list[tuple[PortExpr, int]]:
    """Split an instruction into its independent port jobs."""
    return [(p.ports, p.latency) for p in instr.parts]


# ---------------------------------------------------------------------------
# Machine description


@dataclass(frozen=True)
class MachineDesc:
    name: str
    frequency_ghz: Fraction
    vector_width: int
    num_registers: int
    issue_width: int
    ports: tuple[Port, ...]
    instructions: tuple[InstrDesc, ...]
    meta: dict = field(default_factory=dict, compare=True)

    def __post_init__(self):
        v = self.vector_width
        if v not in (2, 4, 8, 16):
            raise BadVectorWidth(f"vector_width {v} not in {{2,4,8,16}}")
        if self.num_registers < 2:
            raise MachineError("need at least 2 registers")
        if self.frequency_ghz <= 0:
            raise MachineError("frequency must be positive")
        if self.issue_width < 1:
            raise MachineError("issue_width must be >= 1")
        names = [p.name for p in self.ports]
        if len(set(names)) != len(names):
            raise MachineError("port names must be unique")
        known = set(names)
        seen = set()
        for ins in self.instructions:
            if ins.mnemonic in seen:
                raise DuplicateMnemonic(ins.mnemonic)
            seen.add(ins.mnemonic)
            for part in ins.parts:
                for port in part.ports.leaves():
                    if port not in known:
                        raise UnknownPort(f"{ins.mnemonic}: undeclared port {port}")
                part.ports.alternatives()  # reject unsupported nesting early
                if part.kind == LOAD:
                    u = part.unique_elements
                    if not _is_pow2(u) or u > v:
                        raise MachineError(
                            f"{ins.mnemonic}: load unique_elements {u} must be a power "
                            f"of two <= {v}"
                        )
                for pat in (part.pattern,):
                    if pat is not None:
                        bad = validate_shuffle(pat, v)
                        if bad:
                            raise BadShuffle(f"{ins.mnemonic}: {bad}")

    def port(self, name: str) -> Port:
        for p in self.ports:
            if p.name == name:
                return p
        raise UnknownPort(name)

    def instr(self, mnemonic: str) -> InstrDesc:
        for i in self.instructions:
            if i.mnemonic == mnemonic:
                return i
        raise MachineError(f"unknown mnemonic {mnemonic!r}")

    def loads(self) -> list[InstrDesc]:
        """Instructions that bring B/A elements into a register (not prefetches)."""
        return [i for i in self.instructions if i.load_part is not None]

    def shuffles(self) -> list[InstrDesc]:
        return [i for i in self.instructions if i.kinds == (SHUFFLE,)]

    def swizzle_computes(self) -> list[InstrDesc]:
        """Computes with a built-in operand swizzle (free lane rearrangement)."""
        out = []
        for i in self.instructions:
            cp = i.compute_part
            if cp is not None and cp.pattern is not None:
                out.append(i)
        return out

    def plain_fma(self) -> InstrDesc:
        """The multiply-accumulate used for an unswizzled arrangement."""
        for i in self.instructions:
            cp = i.compute_part
            if cp is not None and cp.op in ("fma", "mul") and cp.pattern is None \
                    and i.load_part is None:
                return i
        raise MachineError(f"{self.name}: no multiply-accumulate instruction")

    @property
    def fma_is_fused(self) -> bool:
        """True when multiply-accumulate is a single instruction (one new reg)."""
        return not self.plain_fma().needs_temp

    def vector_load(self) -> InstrDesc:
        """Full-width load (used for columns of A)."""
        for i in self.loads():
            if i.load_part.unique_elements == self.vector_width and i.compute_part is None:
                return i
        raise MachineError(f"{self.name}: no full-width vector load")

    def prefetch_instr(self) -> Optional[InstrDesc]:
        for i in self.instructions:
            if i.kinds == (PREFETCH,):
                return i
        return None

    def store_instr(self) -> InstrDesc:
        for i in self.instructions:
            if i.kinds == (STORE,):
                return i
        raise MachineError(f"{self.name}: no store instruction")

    def zero_instr(self) -> InstrDesc:
        for i in self.instructions:
            cp = i.compute_part
            if cp is not None and cp.op == "zero":
                return i
        raise MachineError(f"{self.name}: no register-zeroing instruction")


# ---------------------------------------------------------------------------
# Parsing and emission


def _frac(value) -> Fraction:
    # floats go through str() so YAML numbers like 3.3 stay exact decimals
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)


def _parse_part(entry: dict, default_ports: Optional[str] = None) -> OpPart:
    kind = entry["class"]
    if kind not in (LOAD, STORE, SHUFFLE, COMPUTE, PREFETCH):
        raise MachineError(f"bad instruction class {kind!r}")
    ports = parse_port_expr(str(entry.get("ports", default_ports)))
    pattern = None
    if "pattern" in entry:
        pattern = ShufflePattern(tuple(int(x) for x in entry["pattern"]))
    return OpPart(
        kind=kind,
        ports=ports,
        latency=int(entry["latency"]),
        unique_elements=int(entry["unique_elements"]) if "unique_elements" in entry else None,
        pattern=pattern,
        op=entry.get("op"),
    )


def parse_machine(text: str) -> MachineDesc:
    """Parse a YAML machine description and validate it."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise MachineError(f"malformed machine description: {e}") from None
    if not isinstance(doc, dict):
        raise MachineError("machine description must be a mapping")
    try:
        ports = tuple(
            Port(name=str(p["name"]), throughput=_frac(p["throughput"]))
            for p in doc["ports"]
        )
        instructions = []
        for e in doc["instructions"]:
            if e["class"] == "composite":
                parts = tuple(_parse_part(c) for c in e["constituents"])
            else:
                parts = (_parse_part(e),)
            instructions.append(
                InstrDesc(
                    mnemonic=str(e["mnemonic"]),
                    parts=parts,
                    encoded_bytes=int(e.get("bytes", 4)),
                    imm=int(e["imm"]) if "imm" in e else None,
                    alias=e.get("alias"),
                    alias_bytes=int(e["alias_bytes"]) if "alias_bytes" in e else None,
                    needs_temp=bool(e.get("needs_temp", False)),
                )
            )
        return MachineDesc(
            name=str(doc["name"]),
            frequency_ghz=_frac(doc["frequency_ghz"]),
            vector_width=int(doc["vector_width"]),
            num_registers=int(doc["num_registers"]),
            issue_width=int(doc["issue_width"]),
            ports=ports,
            instructions=tuple(instructions),
            meta=dict(doc.get("meta", {})),
        )
    except KeyError as e:
        raise MachineError(f"missing required key {e.args[0]!r}") from None


def _emit_part(p: OpPart) -> dict:
    out = {"class": p.kind, "ports": p.ports.text(), "latency": p.latency}
    if p.unique_elements is not None:
        out["unique_elements"] = p.unique_elements
    if p.pattern is not None:
        out["pattern"] = list(p.pattern.src_index)
    if p.op is not None:
        out["op"] = p.op
    return out


def emit_machine(m: MachineDesc) -> str:
    """Serialize back to the YAML dialect accepted by parse_machine."""
    instructions = []
    for i in m.instructions:
        if i.is_composite:
            e = {"mnemonic": i.mnemonic, "class": "composite",
                 "constituents": [_emit_part(p) for p in i.parts]}
        else:
            e = {"mnemonic": i.mnemonic, **_emit_part(i.parts[0])}
        e["bytes"] = i.encoded_bytes
        if i.imm is not None:
            e["imm"] = i.imm
        if i.alias is not None:
            e["alias"] = i.alias
            e["alias_bytes"] = i.alias_bytes
        if i.needs_temp:
            e["needs_temp"] = True
        instructions.append(e)
    doc = {
        "name": m.name,
        "frequency_ghz": str(m.frequency_ghz) if m.frequency_ghz.denominator > 1
        else int(m.frequency_ghz),
        "vector_width": m.vector_width,
        "num_registers": m.num_registers,
        "issue_width": m.issue_width,
        "ports": [{"name": p.name,
                   "throughput": str(p.throughput) if p.throughput.denominator > 1
                   else int(p.throughput)}
                  for p in m.ports],
        "instructions": instructions,
        "meta": m.meta,
    }
    return yaml.safe_dump(doc, sort_keys=False)


PRESET_NAMES = ("penryn", "nehalem", "sandybridge", "haswell", "knc")


def load_preset(name: str) -> MachineDesc:
    if name not in PRESET_NAMES:
        raise MachineError(f"unknown preset {name!r} (have: {', '.join(PRESET_NAMES)})")
    text = resources.files("opkgen.presets").joinpath(f"{name}.yaml").read_text()
    return parse_machine(text)


def resolve_machine(spec: str) -> MachineDesc:
    """Accept a preset name or a path to a machine description file."""
    if spec in PRESET_NAMES:
        return load_preset(spec)
    try:
        with open(spec, "r", encoding="utf-8") as f:
            return parse_machine(f.read())
    except FileNotFoundError:
        raise MachineError(f"no preset or file named {spec!r}") from None
