"""
Sketch 阶段：把自然语言指令解析为任务草图，并在场景上完成对象落地。

默认实现是一个确定性的模板文法；可选的文本补全后端产出形如
"Tower(height = 3, objects = filter(yellow, cubes))" 的草图调用，由 parse_sketch_call 解析。
"""
import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

from .block_world import Direction, PrimitiveAction, Scene
from .concept_dsl import (
    KEEP_STEP,
    MOVE_STEPS,
    ConceptLibrary,
    MacroStep,
    Plan,
    PlanStep,
    PrimStep,
    placement_count,
)
from .exceptions import InstructionError, InsufficientObjectsError

logger = logging.getLogger(__name__)

COLORS = (
    "red", "green", "blue", "yellow", "cyan", "white", "black", "orange",
    "purple", "pink", "brown", "gray", "mauve", "chocolate", "magenta",
)

# 复数与别名统一成单数形式
SHAPE_ALIASES = {
    "cube": "cube", "cubes": "cube",
    "dice": "dice", "die": "dice", "dices": "dice",
    "lego": "lego", "legos": "lego",
    "block": "block", "blocks": "block",
}

SUPPORTED_FORMS = (
    "construct a <concept> of (size|height|length) <k> (using|with) <color> <shape>s",
    "construct a <concept> of <k> steps using <color> <shape>s",
    "find the size of the <concept> made of <color> <shape>s",
    "construct a <concept> of size <k> such that all blocks have the same color as the block to their left. "
    "no block should have the same color as the block on top of it",
    "construct a <concept> of <color> <shape> having the same height as the existing <concept> of <color> <shape>",
    "construct a <concept> of total <k> blocks using alternating <color> and <color> blocks",
    "construct a <concept> of size <k> using <color> <shape>s (to the left of|to the right of|on top of|"
    "in front of|behind) the <color> <shape>",
    "move the <color> <shape> (to the left of|to the right of|on top of|in front of|behind) the <color> <shape>"
    " [and the <color> <shape> ... the <color> <shape>]",
)

# 相对位置短语 -> 参照物的哪一侧
DIRECTION_PHRASES = {
    "to the left of": Direction.LEFT,
    "to the right of": Direction.RIGHT,
    "in front of": Direction.FRONT,
    "to the front of": Direction.FRONT,
    "behind": Direction.BACK,
    "to the back of": Direction.BACK,
    "on top of": Direction.TOP,
    "on the top of": Direction.TOP,
    "to the top of": Direction.TOP,
}


@dataclass(frozen=True)
class TaskSketch:
    concept: str
    size: int
    filter: Tuple[str, ...]

    def __post_init__(self):
        if self.size < 1:
            raise InstructionError(f"sketch size must be >= 1, got {self.size}")
        if not self.filter:
            raise InstructionError("sketch filter must not be empty")


@dataclass(frozen=True)
class GroundedSketch:
    concept: str
    size: int
    object_ids: Tuple[int, ...]


# ---- 约束子句 ----

@dataclass(frozen=True)
class SameColorAs:
    relation: str = "left"


@dataclass(frozen=True)
class DiffColorFrom:
    relation: str = "top"


@dataclass(frozen=True)
class Alternating:
    colors: Tuple[str, str]
    axis: str = "vertical"


@dataclass(frozen=True)
class TotalCount:
    count: int


@dataclass(frozen=True)
class SizeQuery:
    concept: str
    filter: Tuple[str, ...]


@dataclass(frozen=True)
class SizeEquals:
    query: SizeQuery


Clause = Union[SameColorAs, DiffColorFrom, Alternating, TotalCount, SizeEquals]


# ---- 解析结果 ----

@dataclass(frozen=True)
class RelativeAnchor:
    """在参照物的 direction 一侧开始构造。"""
    direction: Direction
    reference_filter: Tuple[str, ...]


@dataclass(frozen=True)
class RelativePlacement:
    object_filter: Tuple[str, ...]
    direction: Direction
    reference_filter: Tuple[str, ...]


@dataclass(frozen=True)
class RelativeMove:
    """把一个或多个方块依次放到参照物的某一侧。"""
    placements: Tuple[RelativePlacement, ...]


@dataclass(frozen=True)
class Construct:
    sketch: TaskSketch
    anchor: Optional[RelativeAnchor] = None


@dataclass(frozen=True)
class ConstrainedConstruct:
    sketch: TaskSketch
    clauses: Tuple[Clause, ...]


@dataclass(frozen=True)
class UnknownConcept:
    name: str
    sketch: Optional[TaskSketch] = None


ParsedInstruction = Union[Construct, SizeQuery, ConstrainedConstruct, UnknownConcept, RelativeMove]


_SIZE_QUERY_RE = re.compile(
    r"^(?:find|what is) the (?:size|height|length) of the (?P<name>\w+) (?:made )?of (?P<attrs>.+)$"
)
_CONSTRUCT_RE = re.compile(r"^(?:construct|build|make) (?:a|an|the) (?P<name>\w+)(?P<rest>.*)$")
_SIZE_RE = re.compile(r"\b(?:size|height|length) (?:of )?(?P<k>\d+)\b|\bof (?P<k2>\d+) (?:steps|levels|blocks)\b")
_TOTAL_RE = re.compile(r"\b(?:of )?total (?:of )?(?P<k>\d+) blocks\b")
_ALTERNATING_RE = re.compile(r"\balternating (?P<a>\w+) and (?P<b>\w+)(?: blocks)?\b|\b(?P<c>\w+) and (?P<d>\w+) blocks that are alternating\b")
_SAME_LEFT_RE = re.compile(r"same colou?r as the block to (?:their|its|the) left")
_DIFF_TOP_RE = re.compile(
    r"no block should have the same colou?r as the block on top of it"
    r"|different colou?r (?:from|than) the block on top"
)
_SAME_HEIGHT_RE = re.compile(
    r"(?:having|with) the same (?:height|size|length) as the existing (?P<name>\w+) (?:made )?of (?P<attrs>[a-z ]+)"
)
_CLAUSE_SPLIT_RE = re.compile(r"\b(?:such that|having|with the same)\b")

_RELATION_ALT = "|".join(sorted(DIRECTION_PHRASES, key=len, reverse=True))
_MOVE_RE = re.compile(r"^(?:move|put|place) (?P<rest>the .+)$")
_MOVE_PART_RE = re.compile(rf"^the (?P<obj>[a-z ]+?) (?P<rel>{_RELATION_ALT}) the (?P<ref>[a-z ]+)$")
_ANCHOR_RE = re.compile(rf"\s(?P<rel>{_RELATION_ALT}) the (?P<ref>[a-z ]+)$")


def _normalize(text: str) -> str:
    text = text.strip().lower()
    text = re.sub(r"[,;]", " ", text)
    text = re.sub(r"\s+", " ", text)
    return text.rstrip(". ")


def parse_attributes(text: str, exclude: Tuple[str, ...] = ()) -> Tuple[str, ...]:
    """从短语里取出颜色和形状词，颜色在前；没有任何属性时返回 ("block",)。"""
    colors, shapes = [], []
    for word in re.findall(r"[a-z]+", text):
        if word in COLORS and word not in exclude and word not in colors:
            colors.append(word)
        elif word in SHAPE_ALIASES and SHAPE_ALIASES[word] not in shapes:
            shapes.append(SHAPE_ALIASES[word])
    if len(shapes) > 1 and "block" in shapes:
        shapes.remove("block")
    tokens = tuple(colors + shapes)
    return tokens or ("block",)


def _parse_clauses(text: str) -> Tuple[Clause, ...]:
    clauses = []
    if _SAME_LEFT_RE.search(text):
        clauses.append(SameColorAs("left"))
    if _DIFF_TOP_RE.search(text):
        clauses.append(DiffColorFrom("top"))
    match = _ALTERNATING_RE.search(text)
    if match:
        a, b = (match.group("a"), match.group("b")) if match.group("a") else (match.group("c"), match.group("d"))
        if a not in COLORS or b not in COLORS:
            raise InstructionError(f"alternating clause needs two colors, got '{a}' and '{b}'")
        clauses.append(Alternating((a, b)))
    match = _TOTAL_RE.search(text)
    if match:
        clauses.append(TotalCount(int(match.group("k"))))
    match = _SAME_HEIGHT_RE.search(text)
    if match:
        clauses.append(SizeEquals(SizeQuery(match.group("name"), parse_attributes(match.group("attrs")))))
    return tuple(clauses)


def parse_instruction(text: str, library: ConceptLibrary) -> ParsedInstruction:
    """
    按模板文法解析指令。

    Returns:
        Construct / SizeQuery / ConstrainedConstruct / UnknownConcept / RelativeMove 之一。

    Raises:
        InstructionError: 文本不符合任何支持的形式。
    """
    normalized = _normalize(text)

    match = _MOVE_RE.match(normalized)
    if match:
        return _parse_relative_move(text, match.group("rest"))

    match = _SIZE_QUERY_RE.match(normalized)
    if match:
        name = match.group("name")
        if name not in library:
            return UnknownConcept(name)
        return SizeQuery(name, parse_attributes(match.group("attrs")))

    match = _CONSTRUCT_RE.match(normalized)
    if not match:
        raise InstructionError(
            f"cannot parse instruction '{text}'. Supported forms: " + " | ".join(SUPPORTED_FORMS)
        )
    name, rest = match.group("name"), match.group("rest")

    anchor = None
    anchor_match = _ANCHOR_RE.search(rest)
    if anchor_match:
        anchor = RelativeAnchor(DIRECTION_PHRASES[anchor_match.group("rel")],
                                parse_attributes(anchor_match.group("ref")))
        rest = rest[:anchor_match.start()]

    clauses = _parse_clauses(rest)
    if anchor is not None and clauses:
        raise InstructionError(f"instruction '{text}' combines a relative position with constraints")
    alternating = next((c for c in clauses if isinstance(c, Alternating)), None)
    main = _CLAUSE_SPLIT_RE.split(rest, maxsplit=1)[0]
    main = _TOTAL_RE.sub(" ", main)
    main = _ALTERNATING_RE.sub(" ", main)
    filter_tokens = parse_attributes(main, exclude=alternating.colors if alternating else ())

    size_match = _SIZE_RE.search(main)
    size: Optional[int] = None
    if size_match:
        size = int(size_match.group("k") or size_match.group("k2"))
    elif clauses and any(isinstance(c, (TotalCount, SizeEquals)) for c in clauses):
        # 由 TotalCount / SizeEquals 在求解前确定真实尺寸
        size = 1
    if size is None or size < 1:
        raise InstructionError(
            f"instruction '{text}' has no size. Supported forms: " + " | ".join(SUPPORTED_FORMS)
        )

    sketch = TaskSketch(name, size, filter_tokens)
    if name not in library:
        logger.info("Instruction names unknown concept '%s'; a demonstration is needed", name)
        return UnknownConcept(name, sketch)
    if clauses:
        return ConstrainedConstruct(sketch, clauses)
    return Construct(sketch, anchor)


def _parse_relative_move(text: str, rest: str) -> RelativeMove:
    placements = []
    for part in re.split(r" and (?=the )", rest):
        match = _MOVE_PART_RE.match(part)
        if not match:
            raise InstructionError(
                f"cannot parse placement '{part}' in '{text}'. Supported forms: " + " | ".join(SUPPORTED_FORMS)
            )
        placements.append(RelativePlacement(parse_attributes(match.group("obj")),
                                            DIRECTION_PHRASES[match.group("rel")],
                                            parse_attributes(match.group("ref"))))
    return RelativeMove(tuple(placements))


def matching_ids(scene: Scene, filter_tokens: Tuple[str, ...]) -> Tuple[int, ...]:
    wanted = set(filter_tokens)
    return tuple(i for i in scene.ids if wanted <= scene.blocks[i].attributes)


def ground_sketch(sketch: TaskSketch, scene: Scene, library: Optional[ConceptLibrary] = None,
                  required: Optional[int] = None) -> GroundedSketch:
    """
    按属性精确匹配落地对象，id 升序。

    Args:
        required: 需要的对象个数；默认取概念在该尺寸下的放置数（概念在库中时），否则为 1。

    Raises:
        InsufficientObjectsError: 匹配的对象少于需要的个数。
    """
    ids = matching_ids(scene, sketch.filter)
    if required is None:
        required = 1
        if library is not None and sketch.concept in library:
            required = placement_count(sketch.concept, sketch.size, library)
    if len(ids) < required:
        raise InsufficientObjectsError(required, len(ids), sketch.filter)
    return GroundedSketch(sketch.concept, sketch.size, ids)


# ---- 相对位置 ----

def ground_reference(scene: Scene, filter_tokens: Tuple[str, ...], exclude: Sequence[int] = ()) -> int:
    """
    参照物取匹配过滤条件的最小 id。

    Raises:
        InsufficientObjectsError: 没有匹配的方块。
    """
    ids = [i for i in matching_ids(scene, filter_tokens) if i not in exclude]
    if not ids:
        raise InsufficientObjectsError(1, 0, filter_tokens)
    return ids[0]


def ground_relative_move(move: RelativeMove, scene: Scene) -> List[Tuple[int, Direction, int]]:
    """
    把每个相对放置落地成 (mover, direction, reference)。

    参照物优先取前面已经搬过且匹配的方块，否则取匹配的最小 id；
    被搬的方块取除参照物和已搬方块外匹配的最小 id。
    """
    steps: List[Tuple[int, Direction, int]] = []
    for placement in move.placements:
        movers = [m for m, _, _ in steps]
        wanted = set(placement.reference_filter)
        moved = [m for m in reversed(movers) if wanted <= scene.blocks[m].attributes]
        reference = moved[0] if moved else ground_reference(scene, placement.reference_filter, movers)
        mover = ground_reference(scene, placement.object_filter, [reference, *movers])
        steps.append((mover, placement.direction, reference))
    return steps


def relative_plan(steps: Sequence[Tuple[int, Direction, int]]) -> Tuple[Plan, Tuple[int, ...]]:
    """每一步都是 assign_head(参照物), move_head(方向), keep_at_head；返回计划和放置顺序。"""
    plan: List[PlanStep] = []
    for _, direction, reference in steps:
        plan += [PrimStep(PrimitiveAction.assign(reference)), MOVE_STEPS[direction], KEEP_STEP]
    return tuple(plan), tuple(mover for mover, _, _ in steps)


def anchored_plan(sketch: TaskSketch, direction: Direction, reference: int) -> Plan:
    """在参照物旁边构造概念：assign_head(参照物), move_head(方向), Make_<concept>(size)。"""
    return (PrimStep(PrimitiveAction.assign(reference)), MOVE_STEPS[direction],
            MacroStep(sketch.concept, sketch.size))


# ---- 后端草图 ----

_SKETCH_CALL_RE = re.compile(
    r"(?P<name>[A-Za-z_]\w*)\s*\(\s*(?:\w+\s*=\s*)?(?P<size>\d+)\s*,\s*(?:\w+\s*=\s*)?"
    r"filter\s*\((?P<attrs>[^()]*)\)\s*\)"
)


def build_sketch_prompt(instruction: str, library: ConceptLibrary) -> str:
    known = ", ".join(library.names) or "none"
    return (
        "# Convert the construction instruction into a single function call of the form\n"
        "# Name(size = K, objects = filter(color, shape))\n"
        "# Example: Construct a tower of height 3 with yellow cubes\n"
        "# Tower(height = 3, objects = filter(yellow, cubes))\n"
        f"# Known structures: {known}\n"
        f"# Instruction: {instruction}\n"
    )


def parse_sketch_call(text: str) -> TaskSketch:
    """
    解析后端返回的草图调用。只接受一层 filter 嵌套。

    Raises:
        InstructionError: 没有可识别的调用或嵌套过深。
    """
    if re.search(r"filter\s*\([^)]*filter\s*\(", text):
        raise InstructionError("nested sketches deeper than one filter are not supported")
    match = _SKETCH_CALL_RE.search(text)
    if not match:
        raise InstructionError(f"no sketch call found in '{text.strip()[:80]}'")
    return TaskSketch(match.group("name").lower(), int(match.group("size")),
                      parse_attributes(match.group("attrs").lower()))
