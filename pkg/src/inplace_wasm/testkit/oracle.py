"""Scan-based branch oracle.

Branch targets are found by walking the instruction stream rather than by
keeping a control stack with fixups: the enclosing construct of a branch is
located once by a forward nesting scan from the function start and once by a
backward nesting scan from the branch, and the two must agree.  Stack
heights come from a separate abstract replay of the body.  Nothing here
shares code with the validator except the instruction decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..binary import F32, F64, I32, I64, EXTERNREF, FUNCREF, Module
from ..opcodes import iter_instructions

_VALTYPES = {I32, I64, F32, F64, FUNCREF, EXTERNREF}
_OPENERS = {"block", "loop", "if"}
FUNCTION = -1  # pseudo index of the implicit function-level construct


class OracleError(AssertionError):
    """The oracle's own cross-checks disagree or a query is malformed."""


@dataclass(frozen=True)
class ScanResult:
    target_ip: int
    valcnt: int
    popcnt: int
    target_stp: int


class BodyScan:
    """One function body: decoded instructions plus abstract heights."""

    def __init__(self, module: Module, func_index: int):
        decl = module.defined_function(func_index)
        self.module = module
        self.code = module.original_bytes
        self.ftype = module.types[decl.type_index]
        self.instrs = list(iter_instructions(self.code, decl.body.code_start, decl.body.code_end))
        self.index = {off: i for i, (off, _, _) in enumerate(self.instrs)}
        self.eip = self.instrs[-1][0]
        # The replay keeps its own opener stack only to look up block
        # signatures; branch targets are always resolved by the scans below.
        # entries_before[i]: sidetable entries owned by instructions before i
        self.entries_before = [0] * (len(self.instrs) + 1)
        for i, (_, info, imm) in enumerate(self.instrs):
            self.entries_before[i + 1] = self.entries_before[i] + self.entry_count(info.name, imm)
        self._replay()

    @staticmethod
    def entry_count(name: str, imm) -> int:
        if name in ("if", "else", "br", "br_if"):
            return 1
        if name == "br_table":
            return 2 + len(imm[0])
        return 0

    def total_entries(self) -> int:
        return self.entries_before[-1]

    def stp_at(self, ip: int) -> int:
        """Number of entries whose branch instruction lies before ``ip``."""
        return self.entries_before[self.index[ip]]

    def signature(self, i: int) -> tuple:
        off = self.instrs[i][0]
        b = self.code[off + 1]
        if b == 0x40:
            return (), ()
        if b in _VALTYPES:
            return (), (b,)
        t = self.module.types[self.instrs[i][2]]
        return t.params, t.results

    # -- abstract height replay ------------------------------------------------

    def _replay(self):
        funcs = [self.module.types[t] for t in self.module.function_type_indices()]
        n = len(self.instrs)
        self.heights = [0] * n      # operand height before each instruction
        self.reachable = [True] * n
        self.bases: dict[int, int] = {FUNCTION: 0}
        ctl = [[0, False, FUNCTION]]   # [base, unreachable, opener index]
        h = 0

        def pop(k):
            nonlocal h
            base, dead, _ = ctl[-1]
            h = max(base, h - k) if dead else h - k

        def kill():
            nonlocal h
            h = ctl[-1][0]
            ctl[-1][1] = True

        for i, (off, info, imm) in enumerate(self.instrs):
            self.heights[i] = h
            self.reachable[i] = not ctl[-1][1]
            name = info.name
            if name in ("block", "loop", "if"):
                params, _ = self.signature(i)
                if name == "if":
                    pop(1)
                pop(len(params))
                ctl.append([h, False, i])
                self.bases[i] = h
                h += len(params)
            elif name == "else":
                base, _, opener = ctl.pop()
                params, _ = self.signature(opener)
                ctl.append([base, False, opener])
                h = base + len(params)
            elif name == "end":
                base, _, opener = ctl.pop()
                if opener == FUNCTION:
                    results = self.ftype.results
                else:
                    results = self.signature(opener)[1]
                h = base + len(results)
            elif name in ("br", "br_table", "return", "unreachable"):
                kill()
            elif name == "br_if":
                pop(1)
                k = self.arity(ctl[-1 - imm][2])
                pop(k)
                h += k
            elif name == "call":
                t = funcs[imm]
                pop(len(t.params))
                h += len(t.results)
            elif name == "call_indirect":
                t = self.module.types[imm[0]]
                pop(1)
                pop(len(t.params))
                h += len(t.results)
            else:
                p, q = _EFFECTS.get(name) or (len(info.pops), len(info.pushes))
                pop(p)
                h += q

    # -- nesting scans -----------------------------------------------------------

    def enclosing_forward(self, i: int, depth: int) -> int:
        stack = [FUNCTION]
        for j in range(i):
            name = self.instrs[j][1].name
            if name in _OPENERS:
                stack.append(j)
            elif name == "end":
                stack.pop()
        if depth >= len(stack):
            raise OracleError(f"label {depth} out of range at instruction {i}")
        return stack[-1 - depth]

    def enclosing_backward(self, i: int, depth: int) -> int:
        nesting = 0
        for j in range(i - 1, -1, -1):
            name = self.instrs[j][1].name
            if name == "end":
                nesting += 1
            elif name in _OPENERS:
                if nesting:
                    nesting -= 1
                elif depth == 0:
                    return j
                else:
                    depth -= 1
        if depth == 0:
            return FUNCTION
        raise OracleError(f"label out of range at instruction {i}")

    def enclosing(self, i: int, depth: int) -> int:
        """The construct ``depth`` levels out from instruction ``i``; both scans must agree."""
        a = self.enclosing_forward(i, depth)
        b = self.enclosing_backward(i, depth)
        if a != b:
            raise OracleError(f"forward scan found {a}, backward scan found {b}")
        return a

    def matching_end(self, opener: int) -> int:
        if opener == FUNCTION:
            return len(self.instrs) - 1
        nesting = 0
        for j in range(opener + 1, len(self.instrs)):
            name = self.instrs[j][1].name
            if name in _OPENERS:
                nesting += 1
            elif name == "end":
                if nesting == 0:
                    return j
                nesting -= 1
        raise OracleError("construct has no end")

    def matching_else(self, opener: int) -> int | None:
        nesting = 0
        for j in range(opener + 1, len(self.instrs)):
            name = self.instrs[j][1].name
            if name in _OPENERS:
                nesting += 1
            elif name == "end":
                if nesting == 0:
                    return None
                nesting -= 1
            elif name == "else" and nesting == 0:
                return j
        raise OracleError("if has no end")

    def arity(self, opener: int) -> int:
        if opener == FUNCTION:
            return len(self.ftype.results)
        params, results = self.signature(opener)
        return len(params) if self.instrs[opener][1].name == "loop" else len(results)

    # -- queries -------------------------------------------------------------------

    def target(self, i: int, depth: int) -> ScanResult:
        """Where a branch at instruction ``i`` to label ``depth`` lands."""
        opener = self.enclosing(i, depth)
        valcnt = self.arity(opener)
        if opener != FUNCTION and self.instrs[opener][1].name == "loop":
            ip = self.instrs[opener][0]
        else:
            ip = self.instrs[self.matching_end(opener)][0]
        name = self.instrs[i][1].name
        height = self.heights[i] - (1 if name in ("br_if", "br_table") else 0)
        popcnt = height - self.bases[opener] - valcnt if self.reachable[i] else 0
        return ScanResult(ip, valcnt, popcnt, self.stp_at(ip))

    def if_false_target(self, i: int) -> ScanResult:
        e = self.matching_else(i)
        if e is None:
            ip = self.instrs[self.matching_end(i)][0]
            return ScanResult(ip, 0, 0, self.stp_at(ip))
        ip = self.instrs[e][0] + 1
        return ScanResult(ip, 0, 0, self.stp_at(ip))

    def else_target(self, i: int) -> ScanResult:
        opener = self.enclosing(i, 0)
        ip = self.instrs[self.matching_end(opener)][0]
        return ScanResult(ip, len(self.signature(opener)[1]), 0, self.stp_at(ip))

    def expected_entries(self) -> list:
        """Expected sidetable contents in emission order.

        Each item is ``(origin_ip, ScanResult)``; a br_table header is
        ``(origin_ip, case_count)``.
        """
        out = []
        for i, (off, info, imm) in enumerate(self.instrs):
            name = info.name
            if name == "if":
                out.append((off, self.if_false_target(i)))
            elif name == "else":
                out.append((off, self.else_target(i)))
            elif name in ("br", "br_if"):
                out.append((off, self.target(i, imm)))
            elif name == "br_table":
                targets, default = imm
                out.append((off, len(targets)))
                for d in targets:
                    out.append((off, self.target(i, d)))
                out.append((off, self.target(i, default)))
        return out


# Fixed (pops, pushes) for ops whose signature the opcode table leaves open.
_EFFECTS = {
    "drop": (1, 0), "select": (3, 1), "select_t": (3, 1),
    "local.get": (0, 1), "local.set": (1, 0), "local.tee": (1, 1),
    "global.get": (0, 1), "global.set": (1, 0),
    "table.get": (1, 1), "table.set": (2, 0),
    "ref.null": (0, 1), "ref.is_null": (1, 1), "ref.func": (0, 1),
    "table.grow": (2, 1), "table.fill": (3, 0),
}


def body_scan(module: Module, func_index: int) -> BodyScan:
    cache = module.__dict__.setdefault("_oracle_scans", {})
    scan = cache.get(func_index)
    if scan is None:
        scan = cache[func_index] = BodyScan(module, func_index)
    return scan


def scan_branch_target(module: Module, func_index: int, branch_ip: int,
                       depth: int | None = None) -> ScanResult:
    """Target of the branch-family instruction at module offset ``branch_ip``.

    For ``br``/``br_if`` the label comes from the instruction when ``depth``
    is omitted; for ``br_table`` pass the selected case's label.  For ``if``
    the result describes the false path, for ``else`` the jump to ``end``.
    """
    scan = body_scan(module, func_index)
    i = scan.index.get(branch_ip)
    if i is None:
        raise OracleError(f"{branch_ip} is not an instruction boundary")
    _, info, imm = scan.instrs[i]
    name = info.name
    if name == "if":
        return scan.if_false_target(i)
    if name == "else":
        return scan.else_target(i)
    if name in ("br", "br_if"):
        return scan.target(i, imm if depth is None else depth)
    if name == "br_table":
        return scan.target(i, imm[1] if depth is None else depth)
    raise OracleError(f"instruction at {branch_ip} is {name}, not a branch")


def expected_entry_count(module: Module, func_index: int) -> int:
    return body_scan(module, func_index).total_entries()


def check_sidetable(module: Module, func_index: int, validated) -> list[str]:
    """Compare a validator-produced sidetable with the oracle.

    Returns a list of human-readable mismatches (empty when they agree).
    """
    scan = body_scan(module, func_index)
    expected = scan.expected_entries()
    st = validated.sidetable
    problems = []
    if len(st) != len(expected):
        problems.append(f"function {func_index}: {len(st)} entries, oracle expects {len(expected)}")
        return problems
    for idx, (origin, want) in enumerate(expected):
        e = st[idx]
        if validated.origins[idx] != origin:
            problems.append(f"entry {idx}: origin {validated.origins[idx]} != {origin}")
            continue
        if isinstance(want, int):
            if e.valcnt != want or e.delta_ip or e.delta_stp or e.popcnt:
                problems.append(f"entry {idx}: br_table header {tuple(e)}, expected case count {want}")
            continue
        got = ScanResult(origin + e.delta_ip, e.valcnt, e.popcnt, idx + e.delta_stp)
        if got != want:
            problems.append(f"function {func_index} entry {idx} at {origin}: got {got}, oracle {want}")
    return problems


def check_module(module: Module, validated: list) -> list[str]:
    first = module.num_imported_functions
    problems = []
    for i, vf in enumerate(validated):
        problems.extend(check_sidetable(module, first + i, vf))
    return problems
