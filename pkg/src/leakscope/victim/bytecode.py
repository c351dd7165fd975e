"""Mini stack-bytecode ISA: program model, text format, structural checks.

The ISA is a 24-opcode cut-down of a WASM-like stack machine: enough to
exercise locals, linear memory, structured control flow (block/loop/if
closed by end, relative-depth branches), calls, and one data-dependent
instruction (clz, whose handler loops once per leading zero).

Text format, one instruction per line::

    # comment
    #input 5,2            <- optional input vectors for the entry function
    func main 2           <- name and number of parameters (default 0)
      loop
        ...
      end
    endfunc

Operands are integers except for ``call``, which names a function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ProgramError

OPCODES = (
    "const", "local.get", "local.set", "local.tee",
    "add", "sub", "mul", "div", "lt_s", "eq", "clz",
    "load", "store",
    "loop", "block", "if", "else", "end", "br", "br_if",
    "call", "return", "drop", "nop",
)

_INT_OPERAND = {"const", "local.get", "local.set", "local.tee", "br", "br_if"}
_NAME_OPERAND = {"call"}
_BLOCK_OPENERS = {"loop", "block", "if"}


@dataclass(frozen=True)
class Instruction:
    opcode: str
    operand: int | str | None = None


@dataclass(frozen=True)
class Function:
    name: str
    n_params: int
    body: tuple[Instruction, ...]


@dataclass(frozen=True)
class ControlLayout:
    """Per-function control-flow resolution computed during validation."""

    matching_end: dict[int, int]
    else_of: dict[int, int | None]
    opener_of_end: dict[int, int]
    opener_of_else: dict[int, int]


@dataclass(frozen=True)
class BytecodeProgram:
    functions: tuple[Function, ...]
    input_sweeps: tuple[tuple[int, ...], ...] = ()
    layouts: dict[str, ControlLayout] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.functions:
            raise ProgramError("program has no functions")
        names = [f.name for f in self.functions]
        if len(set(names)) != len(names):
            raise ProgramError("duplicate function names")
        for fn in self.functions:
            self.layouts[fn.name] = _validate_function(fn, set(names))

    @property
    def entry(self) -> Function:
        return self.functions[0]

    def function(self, name: str) -> Function:
        for fn in self.functions:
            if fn.name == name:
                return fn
        raise ProgramError(f"unknown function {name!r}")

    def static_instructions(self) -> list[tuple[str, Instruction]]:
        """All instructions in static order, paired with their function name."""
        out = []
        for fn in self.functions:
            out.extend((fn.name, ins) for ins in fn.body)
        return out


def _validate_function(fn: Function, known_functions: set[str]) -> ControlLayout:
    matching_end: dict[int, int] = {}
    else_of: dict[int, int | None] = {}
    opener_of_end: dict[int, int] = {}
    opener_of_else: dict[int, int] = {}
    open_stack: list[int] = []

    for i, ins in enumerate(fn.body):
        op = ins.opcode
        if op not in OPCODES:
            raise ProgramError(f"{fn.name}: unknown opcode {op!r}", i)
        if op in _INT_OPERAND:
            if not isinstance(ins.operand, int):
                raise ProgramError(f"{fn.name}: {op} needs an integer operand", i)
        elif op in _NAME_OPERAND:
            if not isinstance(ins.operand, str):
                raise ProgramError(f"{fn.name}: call needs a function name", i)
            if ins.operand not in known_functions:
                raise ProgramError(
                    f"{fn.name}: call to unknown function {ins.operand!r}", i)
        elif ins.operand is not None:
            raise ProgramError(f"{fn.name}: {op} takes no operand", i)

        if op in _BLOCK_OPENERS:
            open_stack.append(i)
            if op == "if":
                else_of[i] = None
        elif op == "else":
            if not open_stack or fn.body[open_stack[-1]].opcode != "if":
                raise ProgramError(f"{fn.name}: else outside an if", i)
            opener = open_stack[-1]
            if else_of[opener] is not None:
                raise ProgramError(f"{fn.name}: duplicate else", i)
            else_of[opener] = i
            opener_of_else[i] = opener
        elif op == "end":
            if not open_stack:
                raise ProgramError(f"{fn.name}: end without an open block", i)
            opener = open_stack.pop()
            matching_end[opener] = i
            opener_of_end[i] = opener
        elif op in ("br", "br_if"):
            depth = ins.operand
            assert isinstance(depth, int)
            if depth < 0 or depth >= len(open_stack):
                raise ProgramError(
                    f"{fn.name}: branch depth {depth} out of range "
                    f"(nesting is {len(open_stack)})", i)

    if open_stack:
        raise ProgramError(
            f"{fn.name}: unclosed {fn.body[open_stack[-1]].opcode}", open_stack[-1])
    return ControlLayout(matching_end, else_of, opener_of_end, opener_of_else)


def parse_program(text: str) -> BytecodeProgram:
    functions: list[Function] = []
    sweeps: list[tuple[int, ...]] = []
    current: list[Instruction] | None = None
    current_name = ""
    current_params = 0

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip() if not raw.strip().startswith("#input") \
            else raw.strip()
        if not line:
            continue
        if line.startswith("#input"):
            spec = line[len("#input"):].strip()
            try:
                sweeps.append(tuple(int(v) for v in spec.split(",")) if spec else ())
            except ValueError:
                raise ProgramError(f"line {lineno}: bad #input directive {spec!r}")
            continue
        parts = line.split()
        if parts[0] == "func":
            if current is not None:
                raise ProgramError(f"line {lineno}: nested func")
            if len(parts) not in (2, 3):
                raise ProgramError(f"line {lineno}: func takes a name and "
                                   "optionally a parameter count")
            current_name = parts[1]
            current_params = int(parts[2]) if len(parts) == 3 else 0
            current = []
            continue
        if parts[0] == "endfunc":
            if current is None:
                raise ProgramError(f"line {lineno}: endfunc outside a function")
            functions.append(Function(current_name, current_params, tuple(current)))
            current = None
            continue
        if current is None:
            raise ProgramError(f"line {lineno}: instruction outside a function")
        if len(parts) == 1:
            current.append(Instruction(parts[0]))
        elif len(parts) == 2:
            operand: int | str
            try:
                operand = int(parts[1])
            except ValueError:
                operand = parts[1]
            current.append(Instruction(parts[0], operand))
        else:
            raise ProgramError(f"line {lineno}: expected 'opcode [operand]'")

    if current is not None:
        raise ProgramError("missing endfunc at end of file")
    return BytecodeProgram(tuple(functions), tuple(sweeps))


def parse_program_file(path: str | Path) -> BytecodeProgram:
    return parse_program(Path(path).read_text())
