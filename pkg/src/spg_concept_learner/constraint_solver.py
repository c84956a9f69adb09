"""
带约束的构造：把指令里的关系子句编译成槽位级别的颜色 CSP，求解后生成落地计划。

槽位就是概念在尺寸 n 下的放置位置（按放置顺序编号），颜色变量的邻接关系来自想象场景的场景图。
"""
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .block_world import Block, Direction, ExecContext, Pose, Scene
from .concept_dsl import ConceptLibrary, Plan, execute, placement_count
from .exceptions import ConstraintCompileError, InstructionError
from .goal_planner import choose_anchor
from .scene_graph import RELATION_IOU_THRESHOLD, extract_scene_graph, find_size
from .sketch_parser import (
    Alternating,
    Clause,
    ConstrainedConstruct,
    DiffColorFrom,
    SameColorAs,
    SizeEquals,
    TaskSketch,
    TotalCount,
    matching_ids,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SlotGrid:
    concept: str
    size: int
    slots: Tuple[Pose, ...]
    # left[s] = s 左边的槽位；below[s] = s 正下方的槽位
    left: Dict[int, int] = field(default_factory=dict)
    below: Dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def levels(self) -> Tuple[int, ...]:
        if not self.slots:
            return ()
        base = min(p.z for p in self.slots)
        return tuple(int(round(p.z - base)) for p in self.slots)


def derive_slots(concept: str, n: int, library: ConceptLibrary,
                 threshold: float = RELATION_IOU_THRESHOLD) -> SlotGrid:
    """
    Raises:
        LibraryError: 概念不在库中。
    """
    library.get(concept)
    offsets = library.relative_placements(concept, n)
    anchor = Pose(0.5, 0.5, 0.5)
    poses = tuple(anchor.translated(*o) for o in offsets)
    imagined = Scene.from_blocks([Block(i, "gray", "cube", p) for i, p in enumerate(poses)],
                                 table_extent=(-1e6, -1e6, 1e6, 1e6))
    left, below = {}, {}
    for r in extract_scene_graph(imagined, threshold=threshold).relations:
        if r.direction is Direction.RIGHT:
            left[r.subject] = r.object
        elif r.direction is Direction.TOP:
            below[r.subject] = r.object
    return SlotGrid(concept, n, poses, left, below)


# ---- 约束 ----

@dataclass(frozen=True)
class Equal:
    a: int
    b: int

    def __str__(self) -> str:
        return f"color(s{self.a}) == color(s{self.b})"


@dataclass(frozen=True)
class NotEqual:
    a: int
    b: int

    def __str__(self) -> str:
        return f"color(s{self.a}) != color(s{self.b})"


@dataclass(frozen=True)
class Fixed:
    slot: int
    color: str

    def __str__(self) -> str:
        return f"color(s{self.slot}) == {self.color}"


@dataclass
class ConstraintSet:
    equalities: List[Equal] = field(default_factory=list)
    disequalities: List[NotEqual] = field(default_factory=list)
    fixed: List[Fixed] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.equalities) + len(self.disequalities) + len(self.fixed)

    def all(self) -> List:
        return [*self.equalities, *self.disequalities, *self.fixed]


def compile_constraints(clauses: Sequence[Clause], grid: SlotGrid) -> ConstraintSet:
    """
    SameColorAs(left) 对每个 (槽, 左邻) 生成相等约束，DiffColorFrom(top) 对每个竖直对生成不等约束，
    Alternating 按层的奇偶固定颜色（第 0 层取第一个颜色）。TotalCount / SizeEquals 在编译前已决定尺寸。

    Raises:
        ConstraintCompileError: 子句引用的邻接关系在槽位网格中不存在。
    """
    constraints = ConstraintSet()
    for clause in clauses:
        if isinstance(clause, SameColorAs):
            if clause.relation != "left":
                raise ConstraintCompileError(f"unsupported relation '{clause.relation}' for same-color clause")
            if not grid.left:
                raise ConstraintCompileError(f"{grid.concept}({grid.size}) has no horizontal neighbours")
            constraints.equalities.extend(Equal(s, o) for s, o in sorted(grid.left.items()))
        elif isinstance(clause, DiffColorFrom):
            if clause.relation != "top":
                raise ConstraintCompileError(f"unsupported relation '{clause.relation}' for different-color clause")
            if not grid.below:
                raise ConstraintCompileError(f"{grid.concept}({grid.size}) has no vertical neighbours")
            constraints.disequalities.extend(NotEqual(s, o) for s, o in sorted(grid.below.items()))
        elif isinstance(clause, Alternating):
            if clause.axis != "vertical":
                raise ConstraintCompileError(f"unsupported alternation axis '{clause.axis}'")
            constraints.fixed.extend(Fixed(s, clause.colors[level % 2]) for s, level in enumerate(grid.levels))
        elif isinstance(clause, (TotalCount, SizeEquals)):
            continue
        else:
            raise ConstraintCompileError(f"unknown clause {clause!r}")
    logger.debug("Compiled %d equalities, %d disequalities, %d fixed colors",
                 len(constraints.equalities), len(constraints.disequalities), len(constraints.fixed))
    return constraints


# ---- 求解 ----

@dataclass
class CSPResult:
    sat: bool
    colors: Dict[int, str] = field(default_factory=dict)
    assignment: Dict[int, int] = field(default_factory=dict)
    failed: Tuple[str, ...] = ()

    def block_order(self) -> Tuple[int, ...]:
        return tuple(self.assignment[s] for s in sorted(self.assignment))


UNSAT = CSPResult(False)


def solve_csp(grid: SlotGrid, constraints: ConstraintSet, blocks: Sequence[Block]) -> CSPResult:
    """
    带前向检查的回溯搜索。变量按槽位下标，值按颜色字典序；颜色确定后按 id 升序单射地挑方块。
    每种颜色最多用到该颜色可用方块的个数。
    """
    supply: Dict[str, List[int]] = defaultdict(list)
    for block in sorted(blocks, key=lambda b: b.id):
        supply[block.color].append(block.id)
    capacity = {color: len(ids) for color, ids in supply.items()}
    palette = sorted(capacity)

    neighbours: Dict[int, List[Tuple[int, bool, object]]] = defaultdict(list)
    for c in constraints.equalities:
        neighbours[c.a].append((c.b, True, c))
        neighbours[c.b].append((c.a, True, c))
    for c in constraints.disequalities:
        neighbours[c.a].append((c.b, False, c))
        neighbours[c.b].append((c.a, False, c))

    domains: List[Set[str]] = [set(palette) for _ in grid.slots]
    failed: Set[str] = set()
    for c in constraints.fixed:
        domains[c.slot] &= {c.color}
        if not domains[c.slot]:
            failed.add(str(c))
    if len(grid.slots) > sum(capacity.values()):
        failed.add(f"need {len(grid.slots)} blocks, have {sum(capacity.values())}")
    if failed:
        return CSPResult(False, failed=tuple(sorted(failed)))

    colors: Dict[int, str] = {}
    used: Counter = Counter()

    def forward_check(slot: int, color: str, doms: List[Set[str]]) -> Optional[List[Set[str]]]:
        doms = [set(d) for d in doms]
        doms[slot] = {color}
        for other, equal, constraint in neighbours[slot]:
            if other in colors:
                continue
            doms[other] = doms[other] & {color} if equal else doms[other] - {color}
            if not doms[other]:
                failed.add(str(constraint))
                return None
        if used[color] + 1 >= capacity[color]:
            for other in range(len(doms)):
                if other != slot and other not in colors:
                    doms[other].discard(color)
                    if not doms[other]:
                        failed.add(f"at most {capacity[color]} {color} blocks")
                        return None
        return doms

    def backtrack(slot: int, doms: List[Set[str]]) -> bool:
        if slot == len(grid.slots):
            return True
        for color in sorted(doms[slot]):
            if used[color] >= capacity[color]:
                continue
            pruned = forward_check(slot, color, doms)
            if pruned is None:
                continue
            colors[slot] = color
            used[color] += 1
            if backtrack(slot + 1, pruned):
                return True
            used[color] -= 1
            del colors[slot]
        return False

    if not backtrack(0, domains):
        logger.info("CSP over %d slots is UNSAT (%d conflicts seen)", len(grid.slots), len(failed))
        return CSPResult(False, failed=tuple(sorted(failed)))

    taken: Dict[str, int] = Counter()
    assignment = {}
    for slot in range(len(grid.slots)):
        color = colors[slot]
        assignment[slot] = supply[color][taken[color]]
        taken[color] += 1
    return CSPResult(True, dict(colors), assignment)


def to_grounded_plan(result: CSPResult, grid: SlotGrid, library: ConceptLibrary) -> Tuple[Plan, Tuple[int, ...]]:
    """返回概念的原语计划，以及让每次 keep_at_head 恰好消耗所分配方块的 remaining 顺序。"""
    return library.unrolled(grid.concept, grid.size), result.block_order()


# ---- 校验 ----

def verify_clauses(scene: Scene, placed: Sequence[int], clauses: Sequence[Clause],
                   threshold: float = RELATION_IOU_THRESHOLD) -> Tuple[int, List[str]]:
    """
    在执行后的场景上逐条核对子句。

    Returns:
        (核对过的关系实例数, 违反的实例描述)
    """
    graph = extract_scene_graph(scene, placed, threshold)
    checked, violations = 0, []
    color = {i: scene.block(i).color for i in placed}
    for clause in clauses:
        if isinstance(clause, SameColorAs):
            for r in graph.relations:
                if r.direction is Direction.RIGHT:
                    checked += 1
                    if color[r.subject] != color[r.object]:
                        violations.append(f"{r}: {color[r.subject]} vs {color[r.object]}")
        elif isinstance(clause, DiffColorFrom):
            for r in graph.relations:
                if r.direction is Direction.TOP:
                    checked += 1
                    if color[r.subject] == color[r.object]:
                        violations.append(f"{r}: both {color[r.subject]}")
        elif isinstance(clause, Alternating):
            base = min(scene.block(i).pose.z for i in placed)
            for i in placed:
                checked += 1
                expected = clause.colors[int(round(scene.block(i).pose.z - base)) % 2]
                if color[i] != expected:
                    violations.append(f"b{i}: {color[i]}, expected {expected}")
    return checked, violations


# ---- 指令级入口 ----

@dataclass
class ConstrainedOutcome:
    sketch: TaskSketch
    grid: SlotGrid
    constraints: ConstraintSet
    result: CSPResult
    plan: Plan = ()
    block_order: Tuple[int, ...] = ()
    final_scene: Optional[Scene] = None
    checked: int = 0
    violations: List[str] = field(default_factory=list)


def resolve_size(sketch: TaskSketch, clauses: Sequence[Clause], scene: Scene, library: ConceptLibrary,
                 threshold: float = RELATION_IOU_THRESHOLD) -> int:
    """
    TotalCount 取放置数恰好为 k 的最小尺寸；SizeEquals 用 find_size 量出参照结构的尺寸。

    Raises:
        InstructionError: 无法得到合法尺寸。
    """
    size = sketch.size
    for clause in clauses:
        if isinstance(clause, TotalCount):
            for n in range(1, clause.count + 1):
                if placement_count(sketch.concept, n, library) == clause.count:
                    size = n
                    break
            else:
                raise InstructionError(f"no {sketch.concept} uses exactly {clause.count} blocks")
        elif isinstance(clause, SizeEquals):
            query = clause.query
            size = find_size(scene, query.concept, matching_ids(scene, query.filter), library, threshold)
            if size < 1:
                raise InstructionError(f"no existing {query.concept} made of {' '.join(query.filter)}")
    return size


def construct_with_constraints(parsed: ConstrainedConstruct, scene: Scene, library: ConceptLibrary,
                               threshold: float = RELATION_IOU_THRESHOLD) -> ConstrainedOutcome:
    """完整的约束构造：定尺寸、建槽位、编译、求解，SAT 时从自动选择的锚点执行并核对。"""
    sketch = parsed.sketch
    size = resolve_size(sketch, parsed.clauses, scene, library, threshold)
    grid = derive_slots(sketch.concept, size, library, threshold)
    constraints = compile_constraints(parsed.clauses, grid)

    excluded = set()
    for clause in parsed.clauses:
        if isinstance(clause, SizeEquals):
            excluded |= set(matching_ids(scene, clause.query.filter))
    candidates = [scene.block(i) for i in matching_ids(scene, sketch.filter) if i not in excluded]
    result = solve_csp(grid, constraints, candidates)
    outcome = ConstrainedOutcome(TaskSketch(sketch.concept, size, sketch.filter), grid, constraints, result)
    if not result.sat:
        return outcome

    plan, order = to_grounded_plan(result, grid, library)
    offsets = library.relative_placements(sketch.concept, size)
    anchor = choose_anchor(scene, offsets)
    trace = execute(sketch.concept, ExecContext(scene, anchor, (), order), library, size)
    outcome.plan, outcome.block_order = plan, order
    outcome.final_scene = trace.context.scene
    outcome.checked, outcome.violations = verify_clauses(outcome.final_scene, order, parsed.clauses, threshold)
    logger.info("Constrained %s(%d): %d slots, %d relation checks, %d violations",
                sketch.concept, size, len(grid), outcome.checked, len(outcome.violations))
    return outcome
