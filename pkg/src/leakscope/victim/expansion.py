"""Per-opcode native-instruction expansions and the timing/fusion noise model.

Each bytecode opcode expands into a fixed sequence of native steps during
loading (the parse loop decodes every static instruction) and, unless the
loader optimized it away, another sequence during interpretation. A step
template fixes the code page, the memory behavior, a latency distribution
(mean plus uniform spread), the control-flow flag, and whether the step may
macro-fuse with its successor.

Interpret expansions all end with the dispatch step: an indirect jump that
fetches the next handler address, the control-flow anchor that separates
instructions in a trace. Load expansions all start with the parse loop's
entry steps on the loader page.

Data-dependent opcodes carry structured expansions: ``clz`` iterates once
per leading zero of its operand, and ``br_if``/``if`` select between a
taken and a not-taken template sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ParseError
from ..trace_model import MemAccess
from .bytecode import OPCODES

# Page layout of the simulated victim binary and address space.
INTERP_DISPATCH_PAGE = 0
INTERP_ARITH_PAGE = 1
INTERP_MEM_PAGE = 2
LOADER_LOOP_PAGE = 3
LOADER_LOCALS_PAGE = 4
LOADER_ARITH_PAGE = 5
LOADER_CONTROL_PAGE = 6
STACK_PAGE = 8
HEAP_PAGE = 9
PROGRAM_PAGE = 10
CODE_ARRAY_PAGE = 11

LOADER_LOOP_ENTRY_IP = 0x3000


@dataclass(frozen=True)
class StepTemplate:
    code_page: int
    mem_access: MemAccess = MemAccess.NONE
    data_page: int | None = None
    stack_access: bool = False
    latency_mean: int = 1
    latency_spread: int = 0
    is_control_flow: bool = False
    fuseable_with_next: bool = False

    def __post_init__(self):
        if (self.data_page is None) != (self.mem_access is MemAccess.NONE):
            raise ValueError("data_page must be present iff the step accesses memory")
        if self.latency_mean < 0 or self.latency_spread < 0:
            raise ValueError("latency parameters must be non-negative")


@dataclass(frozen=True)
class LinearExpansion:
    steps: tuple[StepTemplate, ...]


@dataclass(frozen=True)
class LoopExpansion:
    """Prologue, one repeatable iteration, epilogue; count chosen at runtime."""

    prologue: tuple[StepTemplate, ...]
    iteration: tuple[StepTemplate, ...]
    epilogue: tuple[StepTemplate, ...]


@dataclass(frozen=True)
class BranchExpansion:
    taken: tuple[StepTemplate, ...]
    not_taken: tuple[StepTemplate, ...]


Expansion = LinearExpansion | LoopExpansion | BranchExpansion


@dataclass(frozen=True)
class NoiseModel:
    """Observation noise: macro-fusion coin flips and uniform latency jitter.

    A fuseable step pair is observed fused with probability
    ``fusion_probability`` (independently per dynamic occurrence); jitter
    adds a uniform value in [-latency_jitter, +latency_jitter] to every
    step's sampled latency. Fully deterministic given the seed.
    """

    fusion_probability: float = 0.0
    latency_jitter: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fusion_probability <= 1.0:
            raise ValueError("fusion_probability must be within [0, 1]")
        if self.latency_jitter < 0:
            raise ValueError("latency_jitter must be non-negative")


@dataclass(frozen=True)
class ExpansionSpec:
    load: dict[str, LinearExpansion]
    interpret: dict[str, Expansion]
    trap: tuple[StepTemplate, ...]
    stack_page: int = STACK_PAGE
    heap_page: int = HEAP_PAGE
    loop_entry_ip: int = LOADER_LOOP_ENTRY_IP

    def __post_init__(self):
        missing = [op for op in OPCODES if op not in self.load]
        if missing:
            raise ValueError(f"opcodes without a load expansion: {missing}")
        for name, exp in self.load.items():
            _check_steps(f"load/{name}", exp.steps)
        for name, exp in self.interpret.items():
            for part_name, steps in _parts(exp):
                _check_steps(f"interpret/{name}/{part_name}", steps)
            for steps in _terminal_parts(exp):
                if not steps or not steps[-1].is_control_flow:
                    raise ValueError(
                        f"interpret/{name} must end with a control-flow step")
        _check_steps("trap", self.trap)

    def is_optimized_away(self, opcode: str) -> bool:
        """Loader folds this opcode; it emits nothing while interpreting."""
        return opcode not in self.interpret


def _parts(exp: Expansion):
    if isinstance(exp, LinearExpansion):
        return (("steps", exp.steps),)
    if isinstance(exp, LoopExpansion):
        return (("prologue", exp.prologue), ("iteration", exp.iteration),
                ("epilogue", exp.epilogue))
    return (("taken", exp.taken), ("not_taken", exp.not_taken))


def _terminal_parts(exp: Expansion):
    if isinstance(exp, LinearExpansion):
        return (exp.steps,)
    if isinstance(exp, LoopExpansion):
        return (exp.epilogue,)
    return (exp.taken, exp.not_taken)


def _check_steps(where: str, steps: tuple[StepTemplate, ...]) -> None:
    for i, step in enumerate(steps):
        if not step.fuseable_with_next:
            continue
        if i + 1 >= len(steps):
            raise ValueError(f"{where}: last step cannot be fuseable")
        nxt = steps[i + 1]
        if nxt.fuseable_with_next:
            raise ValueError(f"{where}: fusion chains of 3+ are not supported")
        if step.code_page != nxt.code_page:
            raise ValueError(f"{where}: fuseable pair must share a code page")
        if (step.mem_access is not MemAccess.NONE
                and nxt.mem_access is not MemAccess.NONE):
            raise ValueError(f"{where}: fuseable pair cannot contain two memory ops")


# ----------------------------------------------------------------------------
# Default expansion tables
# ----------------------------------------------------------------------------

def _t(page: int, mem: str = "-", data: int | None = None, *, stack: bool = False,
       lat: int = 1, spread: int = 0, cf: bool = False,
       fuse: bool = False) -> StepTemplate:
    return StepTemplate(
        code_page=page,
        mem_access=MemAccess.from_tag(mem),
        data_page=data,
        stack_access=stack,
        latency_mean=lat,
        latency_spread=spread,
        is_control_flow=cf,
        fuseable_with_next=fuse,
    )


def _dispatch() -> StepTemplate:
    # Indirect jump through the decoded-code array: the per-instruction anchor.
    return _t(INTERP_DISPATCH_PAGE, "r", CODE_ARRAY_PAGE, lat=4, cf=True)


def _sread(page: int, lat: int = 3, fuse: bool = False) -> StepTemplate:
    return _t(page, "r", STACK_PAGE, stack=True, lat=lat, fuse=fuse)


def _swrite(page: int, lat: int = 3) -> StepTemplate:
    return _t(page, "w", STACK_PAGE, stack=True, lat=lat)


def _binop_interp(op_lat: int) -> LinearExpansion:
    p = INTERP_ARITH_PAGE
    return LinearExpansion((
        _t(p, lat=2), _sread(p), _t(p), _sread(p),
        _t(p, lat=op_lat, fuse=True), _t(p),
        _swrite(p), _t(p, lat=2), _dispatch(),
    ))


def _cmpop_interp(op_lat: int) -> LinearExpansion:
    p = INTERP_ARITH_PAGE
    return LinearExpansion((
        _t(p, lat=2), _sread(p), _t(p), _sread(p),
        _t(p, lat=op_lat, fuse=True), _t(p), _t(p),
        _swrite(p), _t(p), _t(p, lat=2), _dispatch(),
    ))


def _interp_expansions() -> dict[str, Expansion]:
    a, m = INTERP_ARITH_PAGE, INTERP_MEM_PAGE
    exp: dict[str, Expansion] = {}

    exp["add"] = _binop_interp(1)
    exp["sub"] = _binop_interp(2)
    # mul shares length 9 with add/sub but differs in token structure
    exp["mul"] = LinearExpansion((
        _t(a, lat=2), _sread(a), _t(a), _sread(a),
        _t(a, lat=5, fuse=True), _t(a), _t(a),
        _swrite(a), _dispatch(),
    ))
    exp["div"] = LinearExpansion((
        _t(a, lat=2), _sread(a), _t(a), _sread(a),
        _t(a, lat=2), _t(a, lat=18), _t(a, lat=2), _t(a),
        _swrite(a), _t(a), _t(a), _dispatch(),
    ))
    exp["lt_s"] = _cmpop_interp(1)
    exp["eq"] = _cmpop_interp(2)
    exp["clz"] = LoopExpansion(
        prologue=(_t(m, lat=2), _sread(m), _t(m)),
        iteration=(_t(m), _t(m), _t(m, lat=2)),
        epilogue=(_swrite(m), _t(m), _dispatch()),
    )
    exp["load"] = LinearExpansion((
        _t(m, lat=2), _sread(m), _t(m), _t(m),
        _t(m, "r", HEAP_PAGE, lat=6), _t(m, fuse=True), _t(m),
        _t(m), _t(m), _t(m), _t(m),
        _swrite(m), _t(m), _dispatch(),
    ))
    exp["store"] = LinearExpansion((
        _t(m, lat=2), _sread(m), _t(m), _sread(m),
        _t(m), _t(m), _t(m, "w", HEAP_PAGE, lat=6), _t(m),
        _t(m, fuse=True), _t(m), _t(m), _t(m), _t(m),
        _dispatch(),
    ))
    exp["local.tee"] = LinearExpansion((
        _t(a, lat=2), _sread(a), _t(a), _t(a),
        _swrite(a), _t(a), _dispatch(),
    ))
    exp["drop"] = LinearExpansion((
        _t(a, lat=2), _t(a), _t(a), _dispatch(),
    ))
    _brif = lambda resolve_lat: (
        _t(a, lat=2), _sread(a), _t(a), _t(a, fuse=True), _t(a),
        _t(a, lat=resolve_lat), _t(a), _t(a), _t(a), _t(a),
        _t(a, lat=2), _t(a), _t(a), _dispatch(),
    )
    exp["br_if"] = BranchExpansion(taken=_brif(8), not_taken=_brif(2))
    exp["br"] = LinearExpansion((
        _t(a, lat=2), _t(a), _t(a, lat=2), _t(a), _t(a),
        _t(a, lat=2), _t(a), _dispatch(),
    ))
    _if = lambda resolve_lat: (
        _t(a, lat=2), _sread(a), _t(a), _t(a),
        _t(a, fuse=True), _t(a), _t(a),
        _t(a, lat=resolve_lat), _t(a), _t(a), _t(a), _dispatch(),
    )
    exp["if"] = BranchExpansion(taken=_if(2), not_taken=_if(7))
    exp["else"] = LinearExpansion((
        _t(a, lat=2), _t(a), _t(a), _t(a, lat=2), _dispatch(),
    ))
    exp["call"] = LinearExpansion((
        _t(m, lat=2), _sread(m), _t(m), _sread(m), _t(m),
        _swrite(m), _t(m), _t(m), _swrite(m),
        _t(m, fuse=True), _t(m), _t(m, lat=2), _t(m), _t(m), _t(m),
        _dispatch(),
    ))
    exp["return"] = LinearExpansion((
        _t(m, lat=2), _sread(m), _t(m), _t(m), _t(m), _t(m),
        _swrite(m), _t(m), _t(m), _dispatch(),
    ))
    return exp


def _load_expansions() -> dict[str, LinearExpansion]:
    lp, lo, la, lc = (LOADER_LOOP_PAGE, LOADER_LOCALS_PAGE,
                      LOADER_ARITH_PAGE, LOADER_CONTROL_PAGE)
    entry = (_t(lp, "r", PROGRAM_PAGE, lat=4), _t(lp, lat=2))
    tail = (_t(lp, lat=2, cf=True),)

    def mk(*body: StepTemplate) -> LinearExpansion:
        return LinearExpansion(entry + body + tail)

    pread = lambda p: _t(p, "r", PROGRAM_PAGE, lat=3)   # decode an operand byte
    cread = lambda p: _t(p, "r", CODE_ARRAY_PAGE, lat=3)  # consult emitted code
    emit = lambda p: _t(p, "w", CODE_ARRAY_PAGE, lat=3)   # append decoded form

    exp: dict[str, LinearExpansion] = {}
    exp["const"] = mk(_t(lo), pread(lo), _t(lo), _t(lo), emit(lo),
                      _t(lo, fuse=True), _t(lo))
    exp["local.get"] = mk(_t(lo), pread(lo), _t(lo), emit(lo),
                          _t(lo, fuse=True), _t(lo))
    exp["local.set"] = mk(_t(lo), pread(lo), _t(lo), _t(lo), emit(lo),
                          _t(lo), emit(lo), _t(lo))
    exp["local.tee"] = mk(_t(lo), pread(lo), _t(lo, fuse=True), _t(lo), emit(lo),
                          _t(lo), _t(lo), emit(lo), _t(lo))
    exp["drop"] = mk(_t(lo), _t(lo), emit(lo), _t(lo))
    exp["nop"] = mk(_t(lo), _t(lo), _t(lo))
    for op in ("add", "sub", "mul", "div", "lt_s", "eq"):
        # the loader's switch lumps all binary arithmetic into one case arm
        exp[op] = mk(_t(la), _t(la), emit(la), _t(la, fuse=True), _t(la))
    exp["clz"] = mk(_t(la), _t(la), _t(la), emit(la), _t(la), _t(la))
    exp["load"] = mk(_t(lc), pread(lc), _t(lc), pread(lc), _t(lc, fuse=True),
                     _t(lc), _t(lc), emit(lc), _t(lc), emit(lc), _t(lc))
    exp["store"] = mk(_t(lc), pread(lc), _t(lc), pread(lc), _t(lc, fuse=True),
                      _t(lc), cread(lc), _t(lc), emit(lc), _t(lc), emit(lc), _t(lc))
    exp["loop"] = mk(_t(lc), _t(lc), emit(lc), _t(lc), emit(lc),
                     _t(lc, fuse=True), _t(lc), _t(lc), _t(lc))
    exp["block"] = mk(_t(lc), _t(lc), cread(lc), _t(lc), emit(lc),
                      _t(lc), _t(lc), _t(lc))
    exp["end"] = mk(_t(lc), _t(lc), _t(lc), cread(lc), _t(lc), emit(lc), _t(lc))
    exp["br"] = mk(_t(lc), pread(lc), _t(lc), _t(lc), cread(lc),
                   _t(lc, fuse=True), _t(lc), emit(lc), _t(lc), _t(lc))
    exp["else"] = mk(_t(lc), _t(lc), cread(lc), _t(lc), emit(lc),
                     _t(lc), emit(lc), _t(lc, fuse=True), _t(lc), _t(lc))
    exp["br_if"] = mk(_t(lc), pread(lc), _t(lc), _t(lc), cread(lc), _t(lc),
                      _t(lc), emit(lc), _t(lc, fuse=True), _t(lc), emit(lc),
                      _t(lc), _t(lc))
    exp["if"] = mk(_t(lc), _t(lc), emit(lc), _t(lc), cread(lc), _t(lc),
                   _t(lc), emit(lc), _t(lc, fuse=True), _t(lc), emit(lc),
                   _t(lc), _t(lc), _t(lc))
    exp["call"] = mk(_t(lc), pread(lc), _t(lc), cread(lc), _t(lc), _t(lc),
                     emit(lc), _t(lc), _t(lc, fuse=True), _t(lc), emit(lc),
                     _t(lc), _t(lc), emit(lc), _t(lc))
    exp["return"] = mk(_t(lc), _t(lc), _t(lc), emit(lc), _t(lc, fuse=True), _t(lc))
    return exp


def default_spec() -> ExpansionSpec:
    return ExpansionSpec(
        load=_load_expansions(),
        interpret=_interp_expansions(),
        trap=(_t(INTERP_ARITH_PAGE, lat=2), _sread(INTERP_ARITH_PAGE),
              _t(INTERP_ARITH_PAGE, lat=2),
              _t(INTERP_DISPATCH_PAGE, lat=6, cf=True)),
    )


# ----------------------------------------------------------------------------
# JSON serialization (CLI --spec files)
# ----------------------------------------------------------------------------

def _step_to_dict(s: StepTemplate) -> dict:
    return {
        "page": s.code_page, "mem": s.mem_access.value, "data": s.data_page,
        "stack": s.stack_access, "lat": s.latency_mean, "spread": s.latency_spread,
        "cf": s.is_control_flow, "fuse": s.fuseable_with_next,
    }


def _step_from_dict(d: dict) -> StepTemplate:
    return StepTemplate(
        code_page=d["page"], mem_access=MemAccess.from_tag(d["mem"]),
        data_page=d.get("data"), stack_access=d.get("stack", False),
        latency_mean=d.get("lat", 1), latency_spread=d.get("spread", 0),
        is_control_flow=d.get("cf", False),
        fuseable_with_next=d.get("fuse", False),
    )


def _expansion_to_dict(exp: Expansion) -> dict:
    if isinstance(exp, LinearExpansion):
        return {"kind": "linear", "steps": [_step_to_dict(s) for s in exp.steps]}
    if isinstance(exp, LoopExpansion):
        return {"kind": "loop",
                "prologue": [_step_to_dict(s) for s in exp.prologue],
                "iteration": [_step_to_dict(s) for s in exp.iteration],
                "epilogue": [_step_to_dict(s) for s in exp.epilogue]}
    return {"kind": "branch",
            "taken": [_step_to_dict(s) for s in exp.taken],
            "not_taken": [_step_to_dict(s) for s in exp.not_taken]}


def _expansion_from_dict(d: dict) -> Expansion:
    steps = lambda key: tuple(_step_from_dict(s) for s in d[key])
    if d["kind"] == "linear":
        return LinearExpansion(steps("steps"))
    if d["kind"] == "loop":
        return LoopExpansion(steps("prologue"), steps("iteration"),
                             steps("epilogue"))
    if d["kind"] == "branch":
        return BranchExpansion(steps("taken"), steps("not_taken"))
    raise ParseError(f"unknown expansion kind {d['kind']!r}")


def save_spec(spec: ExpansionSpec, path: str | Path) -> None:
    doc = {
        "load": {op: _expansion_to_dict(exp) for op, exp in sorted(spec.load.items())},
        "interpret": {op: _expansion_to_dict(exp)
                      for op, exp in sorted(spec.interpret.items())},
        "trap": [_step_to_dict(s) for s in spec.trap],
        "stack_page": spec.stack_page,
        "heap_page": spec.heap_page,
        "loop_entry_ip": spec.loop_entry_ip,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_spec(path: str | Path) -> ExpansionSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    load = {op: _expansion_from_dict(d) for op, d in doc["load"].items()}
    for op, exp in load.items():
        if not isinstance(exp, LinearExpansion):
            raise ParseError(f"load expansion for {op} must be linear")
    return ExpansionSpec(
        load=load,
        interpret={op: _expansion_from_dict(d)
                   for op, d in doc["interpret"].items()},
        trap=tuple(_step_from_dict(s) for s in doc["trap"]),
        stack_page=doc.get("stack_page", STACK_PAGE),
        heap_page=doc.get("heap_page", HEAP_PAGE),
        loop_entry_ip=doc.get("loop_entry_ip", LOADER_LOOP_ENTRY_IP),
    )
