"""Bytecode-level instrumentation.

Local probes overwrite one instruction in a per-function copy of the body
with the reserved ``PROBE`` byte; its handler fires the callbacks and then
runs the original instruction through the main table.  The global probe
switches the interpreter's dispatch to a table that fires a callback before
every instruction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import audit
from .errors import InstrumentationError, ProbeHalt
from .opcodes import PROBE
from .runtime import FunctionInstance, Instance, from_stack_value
from .validator import validate_function


@dataclass(frozen=True)
class ProbeAction:
    kind: str = "continue"
    reason: str = ""

    @classmethod
    def halt(cls, reason: str = "halted by probe") -> "ProbeAction":
        return cls("halt", reason)


CONTINUE = ProbeAction()


class ProbeCopy:
    """Writable copy of one function body, addressed by module offsets."""

    __slots__ = ("buf", "base", "end")

    def __init__(self, original: bytes, start: int, end: int):
        self.buf = bytearray(original[start:end])
        self.base = start
        self.end = end
        audit.record("probe-copy", end - start)

    def __len__(self):
        return self.end

    def __getitem__(self, i):
        if isinstance(i, slice):
            return bytes(self.buf[i.start - self.base:i.stop - self.base])
        return self.buf[i - self.base]

    def __setitem__(self, i: int, value: int):
        self.buf[i - self.base] = value


class ProbeFrameView:
    """Read-only view of the machine while a probe callback runs.

    Operand values are raw stack cells (integers unsigned); ``locals`` are
    converted using the declared local types.
    """

    def __init__(self, machine, ip: int, opcode: int):
        self._m = machine
        self._ip = ip
        self._opcode = opcode
        self._active = True

    def _live(self):
        if not self._active:
            raise InstrumentationError("frame view used outside its probe callback")
        return self._m

    @property
    def function(self) -> FunctionInstance:
        return self._live().func

    @property
    def function_index(self) -> int:
        return self._live().func.index

    @property
    def ip(self) -> int:
        self._live()
        return self._ip

    @property
    def opcode(self) -> int:
        self._live()
        return self._opcode

    @property
    def vfp(self) -> int:
        return self._live().vfp

    @property
    def vsp(self) -> int:
        return self._live().sp

    @property
    def frame_depth(self) -> int:
        return len(self._live().frames)

    @property
    def stack_height(self) -> int:
        """Operand count above the current frame's locals."""
        m = self._live()
        return m.sp - m.vfp - m.func.num_locals

    @property
    def interpreter(self):
        return self._live()

    @property
    def registry(self) -> "ProbeRegistry":
        return self._live().probes

    def operands(self) -> list:
        m = self._live()
        return m.stack[m.vfp + m.func.num_locals:m.sp]

    def peek(self, n: int = 1) -> list:
        """Top ``n`` operands, bottom first."""
        m = self._live()
        if n > self.stack_height:
            raise InstrumentationError(f"only {self.stack_height} operands on the stack")
        return m.stack[m.sp - n:m.sp]

    @property
    def locals(self) -> list:
        m = self._live()
        f = m.func
        raw = m.stack[m.vfp:m.vfp + f.num_locals]
        return [from_stack_value(t, v) for t, v in zip(f.validated.local_types, raw)]


class _LocalProbe:
    __slots__ = ("original", "callbacks")

    def __init__(self, original: int):
        self.original = original
        self.callbacks: list = []


class ProbeRegistry:
    """Local and global probes for one interpreter."""

    def __init__(self, machine):
        self.machine = machine
        self.local: dict = {}          # (FunctionInstance, offset) -> _LocalProbe
        self.copies: dict = {}         # FunctionInstance -> ProbeCopy
        self.global_callback: Callable | None = None
        self._boundaries: dict = {}

    # -- local probes ------------------------------------------------------

    def boundaries(self, func: FunctionInstance) -> frozenset:
        b = self._boundaries.get(func)
        if b is None:
            vf = validate_function(func.instance.module, func.index, collect_boundaries=True)
            b = self._boundaries[func] = vf.boundaries
        return b

    def insert_local(self, func: FunctionInstance, offset: int, callback: Callable) -> None:
        if not isinstance(func, FunctionInstance):
            raise InstrumentationError("local probes require a module-defined function")
        if offset not in self.boundaries(func):
            raise InstrumentationError(
                f"offset {offset} is not an instruction boundary of function {func.index}")
        key = (func, offset)
        probe = self.local.get(key)
        if probe is None:
            copy = self.copies.get(func)
            if copy is None:
                copy = ProbeCopy(func.instance.module.original_bytes, func.code_start,
                                 func.eip + 1)
                self.copies[func] = copy
                func.code = copy
            probe = _LocalProbe(copy[offset])
            copy[offset] = PROBE
            self.local[key] = probe
        probe.callbacks.append(callback)

    def remove_local(self, func: FunctionInstance, offset: int, callback: Callable | None = None) -> None:
        """Remove ``callback`` (or every callback) at ``offset``."""
        key = (func, offset)
        probe = self.local.get(key)
        if probe is None:
            return
        if callback is not None:
            try:
                probe.callbacks.remove(callback)
            except ValueError:
                pass
            if probe.callbacks:
                return
        del self.local[key]
        copy = self.copies[func]
        copy[offset] = probe.original
        if not any(f is func for f, _ in self.local):
            del self.copies[func]
            func.code = func.instance.module.original_bytes

    def remove_all(self) -> None:
        for func, offset in list(self.local):
            self.remove_local(func, offset)
        self.clear_global()

    def fire_local(self, m, ip: int) -> int:
        probe = self.local.get((m.func, ip))
        if probe is None:
            raise InstrumentationError(f"PROBE byte at {ip} has no registered probe")
        original = probe.original
        self._fire(m, ip, original, list(probe.callbacks))
        return original

    # -- global probe ------------------------------------------------------

    def set_global(self, callback: Callable) -> None:
        self.global_callback = callback
        self.machine.dispatch = _probe_table()

    def clear_global(self) -> None:
        self.global_callback = None
        self.machine.dispatch = self.machine.base_table

    def fire_global(self, m, ip: int) -> None:
        cb = self.global_callback
        if cb is None:
            m.dispatch = m.base_table
            return
        opcode = m.code[ip]
        if opcode == PROBE:
            opcode = self.local[(m.func, ip)].original
        self._fire(m, ip, opcode, (cb,))

    # -- shared ------------------------------------------------------------

    def _fire(self, m, ip, opcode, callbacks) -> None:
        view = ProbeFrameView(m, ip, opcode)
        outer = m.in_probe
        m.in_probe = view
        try:
            for cb in callbacks:
                action = cb(view)
                if action is not None and action.kind == "halt":
                    raise ProbeHalt(action.reason)
        finally:
            view._active = False
            m.in_probe = outer

    def __len__(self):
        return len(self.local) + (1 if self.global_callback is not None else 0)


def _probe_table():
    from .interpreter import PROBE_TABLE
    return PROBE_TABLE


def _function(instance: Instance, func_index: int) -> FunctionInstance:
    return instance.functions[func_index]


def insert_local_probe(registry: ProbeRegistry, instance: Instance, func_index: int,
                       offset: int, callback: Callable) -> None:
    registry.insert_local(_function(instance, func_index), offset, callback)


def remove_local_probe(registry: ProbeRegistry, instance: Instance, func_index: int,
                       offset: int, callback: Callable | None = None) -> None:
    registry.remove_local(_function(instance, func_index), offset, callback)


def set_global_probe(registry: ProbeRegistry, callback: Callable) -> None:
    registry.set_global(callback)


def clear_global_probe(registry: ProbeRegistry) -> None:
    registry.clear_global()


def probe_frame_view(machine) -> ProbeFrameView:
    """The view for the probe callback currently running on ``machine``."""
    view = machine.in_probe
    if view is None:
        raise InstrumentationError("probe_frame_view called outside a probe callback")
    return view
