"""Execute mini-bytecode programs and emit per-native-instruction traces.

The loader pass walks every static instruction and emits its load expansion;
the interpreter executes the program and emits expansions only for opcodes
the loader did not optimize away. Ground-truth label spans are always
recorded; callers strip them (``ExecutionTrace.without_ground_truth``) to
obtain the production view. Fusion ground truth travels in the trace
metadata: ``fused_at`` maps IM indices to the token pair they merged, and
``fuseable_at`` lists the first IM of pairs that could have fused but were
observed separately.
"""

from __future__ import annotations

import random

from ..errors import ProgramError, TruncationError
from ..trace_model import (
    ExecutionTrace,
    InstructionMeasurement,
    LabelSpan,
    MemAccess,
    Phase,
    Token,
)
from .bytecode import OPCODES, BytecodeProgram, Function
from .expansion import (
    BranchExpansion,
    ExpansionSpec,
    LinearExpansion,
    LoopExpansion,
    NoiseModel,
    StepTemplate,
)

_IP_PHASE_BASE = {Phase.LOAD: 0x100000, Phase.INTERPRET: 0x200000}


def _step_ip(phase: Phase, opcode: str, part: int, index: int,
             spec: ExpansionSpec) -> int:
    if phase is Phase.LOAD and index == 0:
        return spec.loop_entry_ip
    op_index = OPCODES.index(opcode) if opcode in OPCODES else len(OPCODES)
    return _IP_PHASE_BASE[phase] + op_index * 0x1000 + part * 0x100 + index


class _TraceBuilder:
    def __init__(self, phase: Phase, spec: ExpansionSpec, noise: NoiseModel,
                 rng: random.Random):
        self.phase = phase
        self.spec = spec
        self.noise = noise
        self.rng = rng
        self.ims: list[InstructionMeasurement] = []
        self.labels: list[LabelSpan] = []
        self.fused_at: dict[int, tuple[Token, Token]] = {}
        self.fuseable_at: list[int] = []

    def _sample_latency(self, step: StepTemplate) -> int:
        lat = step.latency_mean
        lat += self.rng.randint(-step.latency_spread, step.latency_spread)
        lat += self.rng.randint(-self.noise.latency_jitter,
                                self.noise.latency_jitter)
        return max(lat, 0)

    def _im(self, step: StepTemplate, latency: int, ip: int,
            cf: bool | None = None) -> InstructionMeasurement:
        return InstructionMeasurement(
            latency_cycles=latency,
            code_page=step.code_page,
            mem_access=step.mem_access,
            data_page=step.data_page,
            stack_access=step.stack_access,
            is_control_flow=step.is_control_flow if cf is None else cf,
            ip=ip,
        )

    def emit(self, opcode: str, steps: tuple[StepTemplate, ...],
             part: int = 0, part_offsets: tuple[int, ...] | None = None) -> None:
        """Emit one instruction's expansion, applying fusion coin flips.

        ``part_offsets`` supplies per-step (part, index) ip coordinates when
        the step sequence was assembled from several expansion parts.
        """
        start = len(self.ims)
        i = 0
        while i < len(steps):
            step = steps[i]
            if part_offsets is None:
                ip = _step_ip(self.phase, opcode, part, i, self.spec)
            else:
                ip = _step_ip(self.phase, opcode, part_offsets[i] >> 8,
                              part_offsets[i] & 0xFF, self.spec)
            lat = self._sample_latency(step)
            if step.fuseable_with_next:
                nxt = steps[i + 1]
                lat_next = self._sample_latency(nxt)
                fused = self.rng.random() < self.noise.fusion_probability
                tok_a = Token(step.code_page, step.mem_access)
                tok_b = Token(nxt.code_page, nxt.mem_access)
                if fused:
                    mem_step = step if step.mem_access is not MemAccess.NONE else nxt
                    merged = InstructionMeasurement(
                        latency_cycles=lat + lat_next,
                        code_page=step.code_page,
                        mem_access=mem_step.mem_access,
                        data_page=mem_step.data_page,
                        stack_access=mem_step.stack_access,
                        is_control_flow=step.is_control_flow
                        or nxt.is_control_flow,
                        ip=ip,
                    )
                    self.fused_at[len(self.ims)] = (tok_a, tok_b)
                    self.ims.append(merged)
                else:
                    self.fuseable_at.append(len(self.ims))
                    self.ims.append(self._im(step, lat, ip))
                    if part_offsets is None:
                        ip_next = _step_ip(self.phase, opcode, part, i + 1,
                                           self.spec)
                    else:
                        ip_next = _step_ip(self.phase, opcode,
                                           part_offsets[i + 1] >> 8,
                                           part_offsets[i + 1] & 0xFF, self.spec)
                    self.ims.append(self._im(nxt, lat_next, ip_next))
                i += 2
            else:
                self.ims.append(self._im(step, lat, ip))
                i += 1
        self.labels.append(LabelSpan(start, len(self.ims), opcode))

    def build(self, extra_metadata: dict[str, str]) -> ExecutionTrace:
        metadata = dict(extra_metadata)
        if self.fused_at:
            metadata["fused_at"] = ";".join(
                f"{idx}={a.text}|{b.text}"
                for idx, (a, b) in sorted(self.fused_at.items()))
        if self.fuseable_at:
            metadata["fuseable_at"] = ",".join(str(i) for i in self.fuseable_at)
        return ExecutionTrace(tuple(self.ims), self.phase,
                              tuple(self.labels), metadata)


def _rng(noise: NoiseModel, salt: int) -> random.Random:
    return random.Random(noise.seed * 1000003 + salt)


def load_phase(program: BytecodeProgram, spec: ExpansionSpec,
               noise: NoiseModel) -> ExecutionTrace:
    """Parse every static instruction in order, emitting its load expansion."""
    builder = _TraceBuilder(Phase.LOAD, spec, noise, _rng(noise, 1))
    optimized: list[int] = []
    for index, (_, ins) in enumerate(program.static_instructions()):
        builder.emit(ins.opcode, spec.load[ins.opcode].steps)
        if spec.is_optimized_away(ins.opcode):
            optimized.append(index)
    meta = {
        "static_count": str(len(program.static_instructions())),
        "optimized": ",".join(str(i) for i in optimized),
    }
    return builder.build(meta)


def _clz32(value: int) -> int:
    return 32 - (value & 0xFFFFFFFF).bit_length()


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def _loop_steps(exp: LoopExpansion, count: int):
    """Materialize a loop expansion plus (part, index) ip coordinates."""
    steps = list(exp.prologue) + list(exp.iteration) * count + list(exp.epilogue)
    coords = [(0 << 8) | i for i in range(len(exp.prologue))]
    for _ in range(count):
        coords.extend((1 << 8) | i for i in range(len(exp.iteration)))
    coords.extend((2 << 8) | i for i in range(len(exp.epilogue)))
    return tuple(steps), tuple(coords)


class _Frame:
    __slots__ = ("function", "pc", "locals", "control", "return_to")

    def __init__(self, function: Function, locals_: dict[int, int],
                 return_to: tuple | None):
        self.function = function
        self.pc = 0
        self.locals = locals_
        self.control: list[tuple[str, int]] = []
        self.return_to = return_to


def interpret_phase(program: BytecodeProgram, inputs: list[int],
                    spec: ExpansionSpec, noise: NoiseModel,
                    max_steps: int = 100_000) -> ExecutionTrace:
    """Run the program and emit expansions for executed, non-optimized opcodes."""
    entry = program.entry
    if len(inputs) != entry.n_params:
        raise ProgramError(
            f"entry function {entry.name!r} takes {entry.n_params} inputs, "
            f"got {len(inputs)}")

    builder = _TraceBuilder(Phase.INTERPRET, spec, noise, _rng(noise, 2))
    stack: list[int] = []
    memory: dict[int, int] = {}
    frame = _Frame(entry, {i: v for i, v in enumerate(inputs)}, None)
    call_stack: list[_Frame] = [frame]
    executed = 0
    trap: str | None = None

    def emit_linear(opcode: str, selector: bool | None = None) -> None:
        exp = spec.interpret.get(opcode)
        if exp is None:
            return
        if isinstance(exp, LinearExpansion):
            builder.emit(opcode, exp.steps)
        elif isinstance(exp, BranchExpansion):
            steps = exp.taken if selector else exp.not_taken
            builder.emit(opcode, steps, part=0 if selector else 1)
        else:
            raise ProgramError(f"{opcode}: loop expansion needs an iteration count")

    def finish(meta_trap: str | None) -> ExecutionTrace:
        meta = {
            "executed": str(executed),
            "emitted_instructions": str(len(builder.labels)),
        }
        if builder.labels:
            meta["amplification"] = (
                f"{len(builder.ims) / len(builder.labels):.4f}")
        if meta_trap:
            meta["trap"] = meta_trap
        return builder.build(meta)

    while call_stack:
        frame = call_stack[-1]
        layout = program.layouts[frame.function.name]
        body = frame.function.body
        if frame.pc >= len(body):
            # implicit return; the caller's pc was advanced at call time
            call_stack.pop()
            continue
        if executed >= max_steps:
            raise TruncationError(
                f"step budget of {max_steps} exhausted in {frame.function.name!r}",
                partial_trace=finish(trap))
        ins = body[frame.pc]
        op = ins.opcode
        executed += 1

        if op == "const":
            stack.append(ins.operand)
            frame.pc += 1
        elif op == "local.get":
            stack.append(frame.locals.get(ins.operand, 0))
            frame.pc += 1
        elif op == "local.set":
            frame.locals[ins.operand] = stack.pop()
            frame.pc += 1
        elif op == "local.tee":
            frame.locals[ins.operand] = stack[-1]
            emit_linear(op)
            frame.pc += 1
        elif op in ("add", "sub", "mul"):
            b, a = stack.pop(), stack.pop()
            stack.append({"add": a + b, "sub": a - b, "mul": a * b}[op])
            emit_linear(op)
            frame.pc += 1
        elif op == "div":
            b, a = stack.pop(), stack.pop()
            if b == 0:
                builder.emit("div", spec.trap)
                trap = "div_by_zero"
                break
            stack.append(_trunc_div(a, b))
            emit_linear(op)
            frame.pc += 1
        elif op == "lt_s":
            b, a = stack.pop(), stack.pop()
            stack.append(1 if a < b else 0)
            emit_linear(op)
            frame.pc += 1
        elif op == "eq":
            b, a = stack.pop(), stack.pop()
            stack.append(1 if a == b else 0)
            emit_linear(op)
            frame.pc += 1
        elif op == "clz":
            v = stack.pop()
            count = _clz32(v)
            stack.append(count)
            exp = spec.interpret.get(op)
            if isinstance(exp, LoopExpansion):
                steps, coords = _loop_steps(exp, count)
                builder.emit(op, steps, part_offsets=coords)
            else:
                emit_linear(op)
            frame.pc += 1
        elif op == "load":
            addr = stack.pop()
            stack.append(memory.get(addr, 0))
            emit_linear(op)
            frame.pc += 1
        elif op == "store":
            value, addr = stack.pop(), stack.pop()
            memory[addr] = value
            emit_linear(op)
            frame.pc += 1
        elif op in ("loop", "block"):
            frame.control.append((op, frame.pc))
            emit_linear(op)
            frame.pc += 1
        elif op == "if":
            cond = stack.pop() != 0
            emit_linear(op, selector=cond)
            frame.control.append(("if", frame.pc))
            if cond:
                frame.pc += 1
            else:
                else_pos = layout.else_of[frame.pc]
                frame.pc = (else_pos + 1 if else_pos is not None
                            else layout.matching_end[frame.pc])
        elif op == "else":
            # reached by falling out of the then-arm: skip over the else-arm
            emit_linear(op)
            opener = layout.opener_of_else[frame.pc]
            frame.pc = layout.matching_end[opener]
        elif op == "end":
            if frame.control:
                frame.control.pop()
            emit_linear(op)
            frame.pc += 1
        elif op in ("br", "br_if"):
            if op == "br_if":
                cond = stack.pop() != 0
                emit_linear(op, selector=cond)
            else:
                cond = True
                emit_linear(op)
            if cond:
                depth = ins.operand
                kind, opener = frame.control[-1 - depth]
                if kind == "loop":
                    del frame.control[len(frame.control) - depth:]
                    frame.pc = opener + 1
                else:
                    del frame.control[len(frame.control) - depth - 1:]
                    frame.pc = layout.matching_end[opener] + 1
            else:
                frame.pc += 1
        elif op == "call":
            emit_linear(op)
            callee = program.function(ins.operand)
            args = [stack.pop() for _ in range(callee.n_params)]
            frame.pc += 1
            call_stack.append(_Frame(
                callee, {i: v for i, v in enumerate(reversed(args))},
                return_to=(frame.function.name, frame.pc)))
        elif op == "return":
            emit_linear(op)
            call_stack.pop()
        elif op == "drop":
            stack.pop()
            emit_linear(op)
            frame.pc += 1
        elif op == "nop":
            emit_linear(op)
            frame.pc += 1
        else:
            raise ProgramError(f"unhandled opcode {op!r}")

    return finish(trap)
