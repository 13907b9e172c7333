"""opkgen: SIMD outer-product micro-kernel generator.

Enumerates the ways a small GEMM outer product can be mapped onto a core's
load/shuffle/multiply-accumulate repertoire, picks the highest-throughput
instruction mix with a queueing model, schedules it without register spills,
and emits compilable C. A built-in interpreter and port-level simulator check
both correctness and the predicted throughput.
"""

__version__ = "0.1.0"

from .machine import MachineDesc, load_preset, parse_machine, resolve_machine

__all__ = ["MachineDesc", "load_preset", "parse_machine", "resolve_machine", "__version__"]
