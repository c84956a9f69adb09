"""
概念 DSL：抽象语法、解释器、计划表示，以及不断增长的概念库。

程序文本是一种极简的 s 表达式：

    (def tower (n) (loop n (keep) (move top)))
    (def pyramid (n) (loop n :trim 2 (call row (+ (* 2 n) (* -2 i) -1)) (move top) (move right)))

尺寸表达式只允许 c0 + c1·n + c2·i 这种仿射形式，i 是最内层循环的下标（从 0 开始）。
调用一个概念时先 store_head、结束后 reset_head，因此调用返回时头部回到调用前的位置。
"""
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

from .block_world import (
    KEEP,
    RESET,
    STORE,
    ActionKind,
    Direction,
    ExecContext,
    PlacementResult,
    Pose,
    PrimitiveAction,
    Scene,
    apply_primitive,
)
from .exceptions import (
    DegenerateSizeError,
    ExecutionError,
    LibraryError,
    ProgramError,
    ProgramSyntaxError,
)

logger = logging.getLogger(__name__)

MAX_LOOP_DEPTH = 2
_NAME_RE = re.compile(r"^[A-Za-z0-9_]+$")


# ---- 尺寸表达式 ----

@dataclass(frozen=True)
class SizeExpr:
    """value(n, i) = c0 + c1·n + c2·i"""
    c0: int = 0
    c1: int = 0
    c2: int = 0

    @classmethod
    def const(cls, value: int) -> "SizeExpr":
        return cls(int(value), 0, 0)

    def value(self, n: int, i: int = 0) -> int:
        return self.c0 + self.c1 * n + self.c2 * i

    @property
    def is_constant(self) -> bool:
        return self.c1 == 0 and self.c2 == 0

    @property
    def uses_index(self) -> bool:
        return self.c2 != 0

    def scaled(self, k: int) -> "SizeExpr":
        return SizeExpr(self.c0 * k, self.c1 * k, self.c2 * k)

    def __add__(self, other: "SizeExpr") -> "SizeExpr":
        return SizeExpr(self.c0 + other.c0, self.c1 + other.c1, self.c2 + other.c2)

    def to_text(self, param: str = "n") -> str:
        terms = []
        if self.c1:
            terms.append(param if self.c1 == 1 else f"(* {self.c1} {param})")
        if self.c2:
            terms.append("i" if self.c2 == 1 else f"(* {self.c2} i)")
        if self.c0 or not terms:
            terms.append(str(self.c0))
        return terms[0] if len(terms) == 1 else "(+ " + " ".join(terms) + ")"

    def __str__(self) -> str:
        return self.to_text()


# ---- 语句 ----

@dataclass(frozen=True)
class Prim:
    action: PrimitiveAction

    def __post_init__(self):
        if self.action.kind is ActionKind.ASSIGN_HEAD:
            raise ProgramError("assign_head cannot appear inside a concept program")


@dataclass(frozen=True)
class Call:
    concept: str
    size: SizeExpr


@dataclass(frozen=True)
class Loop:
    count: SizeExpr
    body: Tuple["Stmt", ...]
    trim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "body", tuple(self.body))
        if not self.body:
            raise ProgramError("loop body must not be empty")
        if not 0 <= self.trim < len(self.body):
            raise ProgramError(
                f"epilogue trim {self.trim} must be in [0, {len(self.body)}) for a body of {len(self.body)}"
            )


Stmt = Union[Prim, Call, Loop]


def _loop_depth(stmts: Sequence[Stmt]) -> int:
    depth = 0
    for stmt in stmts:
        if isinstance(stmt, Loop):
            depth = max(depth, 1 + _loop_depth(stmt.body))
    return depth


def _check_index_scope(stmts: Sequence[Stmt], in_loop: bool) -> None:
    for stmt in stmts:
        if isinstance(stmt, Call) and stmt.size.uses_index and not in_loop:
            raise ProgramError(f"call {stmt.concept} uses the loop index outside a loop")
        if isinstance(stmt, Loop):
            if stmt.count.uses_index and not in_loop:
                raise ProgramError("loop count uses the loop index outside a loop")
            _check_index_scope(stmt.body, True)


def _called(stmts: Sequence[Stmt]) -> List[str]:
    names = []
    for stmt in stmts:
        if isinstance(stmt, Call):
            names.append(stmt.concept)
        elif isinstance(stmt, Loop):
            names.extend(_called(stmt.body))
    return names


@dataclass(frozen=True)
class Program:
    name: str
    body: Tuple[Stmt, ...]
    param: str = "n"

    def __post_init__(self):
        object.__setattr__(self, "body", tuple(self.body))
        if not _NAME_RE.match(self.name):
            raise ProgramError(f"invalid concept name '{self.name}'")
        if _loop_depth(self.body) > MAX_LOOP_DEPTH:
            raise ProgramError(f"loop nesting deeper than {MAX_LOOP_DEPTH} in '{self.name}'")
        _check_index_scope(self.body, False)

    @property
    def dependencies(self) -> Tuple[str, ...]:
        """按首次出现顺序去重的被调用概念名。"""
        return tuple(dict.fromkeys(_called(self.body)))

    def renamed(self, name: str) -> "Program":
        return Program(name, self.body, self.param)


# ---- 计划 ----

@dataclass(frozen=True)
class PrimStep:
    action: PrimitiveAction

    @property
    def label(self) -> str:
        return self.action.label

    @property
    def sort_key(self) -> Tuple:
        return (0, self.action.label)

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class MacroStep:
    concept: str
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ProgramError(f"macro step size must be >= 1, got {self.size}")

    @property
    def label(self) -> str:
        return f"Make_{self.concept}({self.size})"

    @property
    def sort_key(self) -> Tuple:
        return (1, self.concept, self.size)

    def __str__(self) -> str:
        return self.label


PlanStep = Union[PrimStep, MacroStep]
Plan = Tuple[PlanStep, ...]

KEEP_STEP = PrimStep(KEEP)
STORE_STEP = PrimStep(STORE)
RESET_STEP = PrimStep(RESET)
MOVE_STEPS = {d: PrimStep(PrimitiveAction.move(d)) for d in Direction}


def plan_text(plan: Iterable[PlanStep]) -> str:
    return ", ".join(step.label for step in plan)


# ---- 概念库 ----

class ConceptLibrary:
    """
    按拓扑顺序排列的概念程序集合。注册后不可修改；register 返回新库。
    """

    def __init__(self, programs: Iterable[Program] = ()):
        self._programs: List[Program] = []
        self._index: Dict[str, int] = {}
        self._unroll_cache: Dict[Tuple[str, int], Plan] = {}
        self._placement_cache: Dict[Tuple[str, int], Tuple[Tuple[float, float, float], ...]] = {}
        for program in programs:
            self._append(program)

    def _append(self, program: Program) -> None:
        if program.name in self._index:
            raise LibraryError(f"duplicate concept '{program.name}'")
        missing = [dep for dep in program.dependencies if dep not in self._index]
        if missing:
            raise LibraryError(
                f"unresolved dependency for '{program.name}': {', '.join(missing)} not registered"
            )
        self._index[program.name] = len(self._programs)
        self._programs.append(program)

    def register(self, program: Program) -> "ConceptLibrary":
        return ConceptLibrary([*self._programs, program])

    @property
    def programs(self) -> Tuple[Program, ...]:
        return tuple(self._programs)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(p.name for p in self._programs)

    def __len__(self) -> int:
        return len(self._programs)

    def __iter__(self) -> Iterator[Program]:
        return iter(self._programs)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def get(self, name: str) -> Program:
        try:
            return self._programs[self._index[name]]
        except KeyError:
            raise LibraryError(f"unknown concept '{name}'") from None

    def index_of(self, name: str) -> int:
        self.get(name)
        return self._index[name]

    def unrolled(self, name: str, size: int) -> Plan:
        key = (name, size)
        if key not in self._unroll_cache:
            self._unroll_cache[key] = unroll(self.get(name), size, self)
        return self._unroll_cache[key]

    def relative_placements(self, name: str, size: int) -> Tuple[Tuple[float, float, float], ...]:
        """从原点出发构造概念时每次放置的相对坐标（只模拟头部）。"""
        key = (name, size)
        if key not in self._placement_cache:
            poses = _simulate_head(self.unrolled(name, size), Pose(0.0, 0.0, 0.0))
            self._placement_cache[key] = tuple(tuple(p) for p in poses)
        return self._placement_cache[key]

    def is_unit(self, name: str) -> bool:
        """尺寸 1 时恰好在头部放一个方块的概念，与 keep_at_head 等价。"""
        return self.relative_placements(name, 1) == ((0.0, 0.0, 0.0),)


def register_concept(library: ConceptLibrary, program: Program) -> ConceptLibrary:
    """把新概念追加到库尾，保持已有顺序。"""
    updated = library.register(program)
    logger.info("Registered concept %s (library size %d)", program.name, len(updated))
    return updated


# ---- 展开与解释 ----

def _emit(stmts: Sequence[Stmt], n: int, i: int, library: Optional[ConceptLibrary],
          out: List[PlanStep], macro_level: bool) -> None:
    for stmt in stmts:
        if isinstance(stmt, Prim):
            out.append(PrimStep(stmt.action))
        elif isinstance(stmt, Call):
            size = stmt.size.value(n, i)
            if size < 0:
                raise DegenerateSizeError(stmt.concept, size)
            if size == 0:
                continue
            if macro_level:
                out.append(MacroStep(stmt.concept, size))
            else:
                if library is None:
                    raise LibraryError(f"unknown concept '{stmt.concept}'")
                out.append(STORE_STEP)
                out.extend(library.unrolled(stmt.concept, size))
                out.append(RESET_STEP)
        else:
            count = stmt.count.value(n, i)
            for k in range(max(count, 0)):
                body = stmt.body
                if stmt.trim and k == count - 1:
                    body = body[:len(body) - stmt.trim]
                _emit(body, n, k, library, out, macro_level)


def _resolve(program: Union[Program, str], library: Optional[ConceptLibrary]) -> Program:
    if isinstance(program, Program):
        return program
    if library is None:
        raise LibraryError(f"unknown concept '{program}'")
    return library.get(program)


def unroll(program: Union[Program, str], n: int, library: Optional[ConceptLibrary]) -> Plan:
    """
    把程序完全展开为原语计划。

    循环的最后一次迭代去掉末尾 trim 条语句；调用递归展开并包在 store/reset 之间。
    尺寸为 0 的调用什么都不做，负数尺寸报 "degenerate size"。
    """
    out: List[PlanStep] = []
    _emit(_resolve(program, library).body, n, 0, library, out, macro_level=False)
    return tuple(out)


def expand(program: Union[Program, str], n: int, library: Optional[ConceptLibrary] = None) -> Plan:
    """只展开一层：循环展开，调用保留为 MacroStep。"""
    out: List[PlanStep] = []
    _emit(_resolve(program, library).body, n, 0, library, out, macro_level=True)
    return tuple(out)


def flatten_plan(plan: Iterable[PlanStep], library: ConceptLibrary) -> Plan:
    out: List[PlanStep] = []
    for step in plan:
        if isinstance(step, MacroStep):
            out.append(STORE_STEP)
            out.extend(library.unrolled(step.concept, step.size))
            out.append(RESET_STEP)
        else:
            out.append(step)
    return tuple(out)


def _simulate_head(steps: Iterable[PlanStep], anchor: Pose) -> List[Pose]:
    head = anchor
    stack: List[Pose] = []
    placements = []
    for step in steps:
        kind = step.action.kind
        if kind is ActionKind.MOVE_HEAD:
            head = head.moved(step.action.direction)
        elif kind is ActionKind.KEEP_AT_HEAD:
            placements.append(head)
        elif kind is ActionKind.STORE_HEAD:
            stack.append(head)
        elif kind is ActionKind.RESET_HEAD:
            if not stack:
                raise ProgramError("reset_head without a matching store_head")
            head = stack.pop()
    return placements


def imagine_placements(library: Optional[ConceptLibrary], program: Union[Program, str],
                       n: int, anchor: Pose) -> List[Pose]:
    """在想象中从 anchor 构造概念，返回每次放置的头部位置（不检查物理约束）。"""
    if isinstance(program, str) and library is not None:
        return [anchor.translated(*offset) for offset in library.relative_placements(program, n)]
    return _simulate_head(unroll(program, n, library), anchor)


def placement_count(program: Union[Program, str], n: int, library: Optional[ConceptLibrary]) -> int:
    if isinstance(program, str) and library is not None:
        return len(library.relative_placements(program, n))
    return sum(1 for step in unroll(program, n, library) if step.action.kind is ActionKind.KEEP_AT_HEAD)


@dataclass
class ExecutionTrace:
    context: ExecContext
    keyframes: List[Scene] = field(default_factory=list)
    placements: List[PlacementResult] = field(default_factory=list)


def execute(target: Union[Program, str, Sequence[PlanStep]], ctx: ExecContext,
            library: Optional[ConceptLibrary], n: Optional[int] = None) -> ExecutionTrace:
    """
    依次执行原语，记录每次放置后的场景快照（第一帧是初始场景）。

    Args:
        target: 程序（或概念名，需要 n）或计划。
        ctx: 初始执行上下文。
        library: 解析调用用的概念库。
        n: 程序的尺寸参数。

    Raises:
        ExecutionError: 某次放置无效，携带步骤下标。
        NoObjectsLeftError / EmptyHeadStackError: 透传世界层错误。
    """
    if isinstance(target, (Program, str)):
        if n is None:
            raise ProgramError("executing a program requires a size n")
        steps = unroll(target, n, library)
    else:
        steps = flatten_plan(target, library) if library is not None else tuple(target)

    trace = ExecutionTrace(ctx, [ctx.scene], [])
    for index, step in enumerate(steps):
        if isinstance(step, MacroStep):
            raise LibraryError(f"unknown concept '{step.concept}'")
        ctx, result = apply_primitive(ctx, step.action)
        if result is None:
            continue
        if not result.valid:
            reason = "collision" if not result.collision_free else "unsupported"
            raise ExecutionError(
                f"invalid placement of block {result.block_id} at {tuple(result.cuboid)} ({reason})", index
            )
        trace.placements.append(result)
        trace.keyframes.append(ctx.scene)
    trace.context = ctx
    return trace


def description_length(item: Union[Program, Sequence[PlanStep]]) -> int:
    """程序按语句节点计数（循环算 1 加上循环体），计划按步数计数。"""
    if isinstance(item, Program):
        return _count_nodes(item.body)
    return len(item)


def _count_nodes(stmts: Sequence[Stmt]) -> int:
    total = 0
    for stmt in stmts:
        total += 1
        if isinstance(stmt, Loop):
            total += _count_nodes(stmt.body)
    return total


# ---- 文本格式 ----

def _stmt_text(stmt: Stmt, param: str) -> str:
    if isinstance(stmt, Prim):
        kind = stmt.action.kind
        if kind is ActionKind.MOVE_HEAD:
            return f"(move {stmt.action.direction.value})"
        return {
            ActionKind.KEEP_AT_HEAD: "(keep)",
            ActionKind.STORE_HEAD: "(store)",
            ActionKind.RESET_HEAD: "(reset)",
        }[kind]
    if isinstance(stmt, Call):
        return f"(call {stmt.concept} {stmt.size.to_text(param)})"
    trim = f" :trim {stmt.trim}" if stmt.trim else ""
    body = " ".join(_stmt_text(s, param) for s in stmt.body)
    return f"(loop {stmt.count.to_text(param)}{trim} {body})"


def emit_program_text(program: Program) -> str:
    body = " ".join(_stmt_text(s, program.param) for s in program.body)
    return f"(def {program.name} ({program.param}){' ' + body if body else ''})"


class _Atom(NamedTuple):
    text: str
    line: int
    column: int


class _List(NamedTuple):
    items: list
    line: int
    column: int


_TOKEN_RE = re.compile(r"\s+|;[^\n]*|\(|\)|[^\s();]+")


def _read_forms(text: str) -> List[Union[_Atom, _List]]:
    forms: List[Union[_Atom, _List]] = []
    stack: List[_List] = []
    line, line_start = 1, 0
    for match in _TOKEN_RE.finditer(text):
        token = match.group()
        column = match.start() - line_start + 1
        if token[0].isspace() or token[0] == ";":
            newlines = token.count("\n")
            if newlines:
                line += newlines
                line_start = match.start() + token.rindex("\n") + 1
            continue
        if token == "(":
            stack.append(_List([], line, column))
        elif token == ")":
            if not stack:
                raise ProgramSyntaxError("unexpected ')'", line, column)
            closed = stack.pop()
            (stack[-1].items if stack else forms).append(closed)
        else:
            (stack[-1].items if stack else forms).append(_Atom(token, line, column))
    if stack:
        raise ProgramSyntaxError("unclosed '('", stack[-1].line, stack[-1].column)
    return forms


def _where(node) -> Tuple[int, int]:
    return node.line, node.column


def _expect_atom(node, what: str) -> _Atom:
    if not isinstance(node, _Atom):
        raise ProgramSyntaxError(f"expected {what}", *_where(node))
    return node


def _parse_int(atom: _Atom) -> Optional[int]:
    try:
        return int(atom.text)
    except ValueError:
        return None


def _parse_size(node, param: str) -> SizeExpr:
    if isinstance(node, _Atom):
        value = _parse_int(node)
        if value is not None:
            return SizeExpr.const(value)
        if node.text == param:
            return SizeExpr(0, 1, 0)
        if node.text == "i":
            return SizeExpr(0, 0, 1)
        raise ProgramSyntaxError(f"unknown size symbol '{node.text}'", *_where(node))
    if not node.items:
        raise ProgramSyntaxError("empty size expression", *_where(node))
    head = _expect_atom(node.items[0], "'+' or '*'")
    if head.text == "+":
        total = SizeExpr()
        for item in node.items[1:]:
            total = total + _parse_size(item, param)
        return total
    if head.text == "*":
        if len(node.items) != 3:
            raise ProgramSyntaxError("'*' takes an integer and a size", *_where(node))
        factor = _parse_int(_expect_atom(node.items[1], "integer factor"))
        if factor is None:
            raise ProgramSyntaxError("'*' factor must be an integer", *_where(node.items[1]))
        return _parse_size(node.items[2], param).scaled(factor)
    raise ProgramSyntaxError(f"unknown size operator '{head.text}'", *_where(head))


def _parse_stmt(node, param: str) -> Stmt:
    if not isinstance(node, _List) or not node.items:
        raise ProgramSyntaxError("expected a statement", *_where(node))
    keyword = _expect_atom(node.items[0], "statement keyword")
    args = node.items[1:]
    kw = keyword.text
    if kw in ("keep", "store", "reset"):
        if args:
            raise ProgramSyntaxError(f"'{kw}' takes no arguments", *_where(args[0]))
        return Prim({"keep": KEEP, "store": STORE, "reset": RESET}[kw])
    if kw == "move":
        if len(args) != 1:
            raise ProgramSyntaxError("'move' takes one direction", *_where(keyword))
        direction = _expect_atom(args[0], "direction")
        try:
            return Prim(PrimitiveAction.move(direction.text))
        except ValueError:
            raise ProgramSyntaxError(f"unknown direction '{direction.text}'", *_where(direction)) from None
    if kw == "call":
        if len(args) != 2:
            raise ProgramSyntaxError("'call' takes a concept and a size", *_where(keyword))
        name = _expect_atom(args[0], "concept name")
        if not _NAME_RE.match(name.text):
            raise ProgramSyntaxError(f"invalid concept name '{name.text}'", *_where(name))
        return Call(name.text, _parse_size(args[1], param))
    if kw == "loop":
        if not args:
            raise ProgramSyntaxError("'loop' needs a count", *_where(keyword))
        count = _parse_size(args[0], param)
        rest = args[1:]
        trim = 0
        if rest and isinstance(rest[0], _Atom) and rest[0].text == ":trim":
            if len(rest) < 2 or not isinstance(rest[1], _Atom) or _parse_int(rest[1]) is None:
                raise ProgramSyntaxError("':trim' needs an integer", *_where(rest[0]))
            trim = _parse_int(rest[1])
            rest = rest[2:]
        body = tuple(_parse_stmt(item, param) for item in rest)
        try:
            return Loop(count, body, trim)
        except ProgramError as e:
            raise ProgramSyntaxError(str(e), *_where(node)) from None
    raise ProgramSyntaxError(f"unknown keyword '{kw}'", *_where(keyword))


def _parse_def(node) -> Program:
    if not isinstance(node, _List) or len(node.items) < 3:
        raise ProgramSyntaxError("expected (def NAME (PARAM) STMT...)", *_where(node))
    keyword = _expect_atom(node.items[0], "'def'")
    if keyword.text != "def":
        raise ProgramSyntaxError(f"unknown keyword '{keyword.text}'", *_where(keyword))
    name = _expect_atom(node.items[1], "concept name")
    params = node.items[2]
    if not isinstance(params, _List) or len(params.items) != 1:
        raise ProgramSyntaxError("concepts take exactly one size parameter", *_where(params))
    param = _expect_atom(params.items[0], "parameter name").text
    body = tuple(_parse_stmt(item, param) for item in node.items[3:])
    try:
        return Program(name.text, body, param)
    except ProgramError as e:
        raise ProgramSyntaxError(str(e), *_where(node)) from None


def parse_program_text(text: str) -> Program:
    forms = _read_forms(text)
    if len(forms) != 1:
        line, column = _where(forms[1]) if len(forms) > 1 else (1, 1)
        raise ProgramSyntaxError(f"expected exactly one definition, found {len(forms)}", line, column)
    return _parse_def(forms[0])


def parse_library_text(text: str) -> List[Program]:
    return [_parse_def(form) for form in _read_forms(text)]


def emit_library_text(library: ConceptLibrary) -> str:
    return "".join(emit_program_text(p) + "\n" for p in library)


def save_library(library: ConceptLibrary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(emit_library_text(library))


def load_library(path: str) -> ConceptLibrary:
    with open(path, "r", encoding="utf-8") as f:
        return ConceptLibrary(parse_library_text(f.read()))
